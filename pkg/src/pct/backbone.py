"""Progressive dual-branch network: per-branch conv stages with a cross
transformer between stages, pooled into identity and group embeddings.

The identity branch output is the verification feature; the group branch
exists to carry the group-predictable component that the cross transformers
estimate and subtract. With every CT disabled the model degrades to a pair
of independent CNNs over the same stage topology.
"""

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .ct import CtConfig, CtWeights, FeatureMap, ct_forward
from .errors import ConfigError, ShapeError
from .tensor import Param, Tensor
from .tensorio import load_checkpoint, save_checkpoint


@dataclass
class BackboneConfig:
    input_h: int = 16
    input_w: int = 16
    input_channels: int = 1
    kernel: int = 3
    stem_width: int = 8
    stem_stride: int = 2
    stage_widths: tuple = (8, 16, 16, 32)
    stage_strides: tuple = (1, 2, 1, 2)
    ct_enabled: tuple = (True, True, True, True)
    heads: int = 2
    max_rel_offset: int = 7
    embed_dim: int = 32

    def __post_init__(self):
        self.stage_widths = tuple(int(v) for v in self.stage_widths)
        self.stage_strides = tuple(int(v) for v in self.stage_strides)
        self.ct_enabled = tuple(bool(v) for v in self.ct_enabled)
        if self.T < 1:
            raise ConfigError("need at least one stage")
        if len(self.stage_strides) != self.T or len(self.ct_enabled) != self.T:
            raise ConfigError(
                f"stage_widths/stage_strides/ct_enabled lengths disagree: "
                f"{len(self.stage_widths)}/{len(self.stage_strides)}/{len(self.ct_enabled)}"
            )
        if any(wd <= 0 for wd in self.stage_widths) or self.stem_width <= 0:
            raise ConfigError(f"stage widths must be positive, got {self.stage_widths}")
        for s in (self.stem_stride, *self.stage_strides):
            if s not in (1, 2):
                raise ConfigError(f"strides must be 1 or 2, got {s}")
        if self.embed_dim <= 0 or self.heads <= 0:
            raise ConfigError("embed_dim and heads must be positive")
        for t in range(1, self.T + 1):
            if self.ct_enabled[t - 1] and self.stage_in_width(t) % self.heads:
                raise ConfigError(
                    f"stage {t} feature dim {self.stage_in_width(t)} "
                    f"is not divisible by {self.heads} heads"
                )

    @property
    def T(self):
        return len(self.stage_widths)

    def stage_in_width(self, t):
        """Channel width of the features entering stage t (1-based)."""
        return self.stem_width if t == 1 else self.stage_widths[t - 2]

    def spatial_at(self, t):
        """(h, w) of the features entering stage t (1-based; t = T+1 is the output)."""
        h, w = _after(self.input_h, self.kernel, self.stem_stride), _after(
            self.input_w, self.kernel, self.stem_stride
        )
        for s in self.stage_strides[: t - 1]:
            h, w = _after(h, self.kernel, s), _after(w, self.kernel, s)
        return h, w

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _after(extent, k, stride):
    return (extent + 2 * (k // 2) - k) // stride + 1


@dataclass
class StagePair:
    """The per-stage pair of feature maps flowing through the backbone."""

    x_id: FeatureMap
    x_ra: FeatureMap
    stage_index: int

    def __post_init__(self):
        if self.x_id.values.shape != self.x_ra.values.shape:
            raise ShapeError(
                f"branch shapes differ at stage {self.stage_index}: "
                f"{self.x_id.values.shape} vs {self.x_ra.values.shape}"
            )


@dataclass
class EmbeddingPair:
    id_embed: Tensor  # the verification feature
    ra_embed: Tensor


def _to_grid(values, h, w):
    """(B, n, d) -> NCHW."""
    b, n, d = values.shape
    return T.reshape(T.transpose(values, (0, 2, 1)), (b, d, h, w))


def _to_positions(grid):
    """NCHW -> (B, n, d)."""
    b, d, h, w = grid.shape
    return T.transpose(T.reshape(grid, (b, d, h * w)), (0, 2, 1)), h, w


class PctModel:
    """Holds all backbone parameters and runs the progressive forward pass."""

    def __init__(self, cfg, rng=None):
        self.cfg = cfg
        self.params = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        k = cfg.kernel

        def conv_param(name, c_in, c_out):
            fan = k * k
            self.params[f"{name}.w"] = Param(
                T.xavier_uniform(rng, c_in * fan, c_out * fan, (c_out, c_in, k, k))
            )
            self.params[f"{name}.b"] = Param(np.zeros(c_out))

        for branch in ("id", "ra"):
            conv_param(f"stem.{branch}", cfg.input_channels, cfg.stem_width)
        self.ct_weights = {}
        for t in range(1, cfg.T + 1):
            if cfg.ct_enabled[t - 1]:
                ct_cfg = CtConfig(cfg.stage_in_width(t), cfg.heads, cfg.max_rel_offset)
                weights = CtWeights(ct_cfg, rng)
                self.ct_weights[t] = (ct_cfg, weights)
                for pname, p in weights.params().items():
                    self.params[f"ct{t}.{pname}"] = p
            for branch in ("id", "ra"):
                conv_param(f"stage{t}.{branch}", cfg.stage_in_width(t), cfg.stage_widths[t - 1])
        d_final = cfg.stage_widths[-1]
        for branch in ("id", "ra"):
            self.params[f"head.{branch}.w"] = Param(
                T.xavier_uniform(rng, d_final, cfg.embed_dim, (d_final, cfg.embed_dim))
            )
            self.params[f"head.{branch}.b"] = Param(np.zeros(cfg.embed_dim))

    def param_group(self, which):
        """'fr' = identity branch plus all CT weights; 'rc' = group branch."""
        if which == "fr":
            keep = lambda n: ".id." in n or n.startswith("ct")
        elif which == "rc":
            keep = lambda n: ".ra." in n
        else:
            raise ConfigError(f"unknown parameter group {which!r}")
        return [p for n, p in self.params.items() if keep(n)]

    def _conv(self, name, grid, stride):
        w = self.params[f"{name}.w"].value
        b = self.params[f"{name}.b"].value
        y = T.conv2d(grid, w, stride=stride, padding=self.cfg.kernel // 2)
        return T.relu(T.add(y, T.reshape(b, (1, -1, 1, 1))))

    def stem(self, images):
        """Two independent conv+ReLU stems produce the stage-1 feature pair."""
        cfg = self.cfg
        if images.shape[1:] != (cfg.input_channels, cfg.input_h, cfg.input_w):
            raise ConfigError(
                f"input {images.shape} does not match configured "
                f"({cfg.input_channels}, {cfg.input_h}, {cfg.input_w})"
            )
        maps = []
        for branch in ("id", "ra"):
            vals, h, w = _to_positions(self._conv(f"stem.{branch}", images, cfg.stem_stride))
            maps.append(FeatureMap(vals, h, w))
        return StagePair(maps[0], maps[1], stage_index=1)

    def stage_step(self, pair, t):
        """Apply the stage-t CT (when enabled) then the per-branch convs.

        Returns (next StagePair, CtOutput or None).
        """
        cfg = self.cfg
        ct_out = None
        x_id, x_ra = pair.x_id, pair.x_ra
        if t in self.ct_weights:
            ct_cfg, weights = self.ct_weights[t]
            ct_out = ct_forward(x_id, x_ra, weights, ct_cfg)
            x_id, x_ra = ct_out.x_id_out, ct_out.x_ra_out
        stride = cfg.stage_strides[t - 1]
        maps = []
        for branch, fm in (("id", x_id), ("ra", x_ra)):
            grid = _to_grid(fm.values, fm.h, fm.w)
            vals, h, w = _to_positions(self._conv(f"stage{t}.{branch}", grid, stride))
            maps.append(FeatureMap(vals, h, w))
        return StagePair(maps[0], maps[1], stage_index=t + 1), ct_out

    def forward(self, images, want_stage_features=False):
        """Full pass: stem, T stages, global average pooling, linear heads.

        Returns (EmbeddingPair, attention records) where the records list one
        entry per stage: None when the CT is disabled there, else a dict with
        the two attention tensors and the grid size. With
        want_stage_features=True each record also carries the post-CT
        identity features (detached) for probing.
        """
        images = images if isinstance(images, Tensor) else Tensor(images)
        pair = self.stem(images)
        records = []
        for t in range(1, self.cfg.T + 1):
            h, w = pair.x_id.h, pair.x_id.w
            pair, ct_out = self.stage_step(pair, t)
            rec = None
            if ct_out is not None:
                rec = {
                    "stage": t,
                    "h": h,
                    "w": w,
                    "attn_id_to_ra": ct_out.attn_id_to_ra.data,
                    "attn_ra_to_id": ct_out.attn_ra_to_id.data,
                }
                if want_stage_features:
                    rec["x_id_post_ct"] = ct_out.x_id_out.values.data
            if want_stage_features:
                rec = rec or {"stage": t, "h": h, "w": w}
                rec["x_id_next"] = pair.x_id.values.data
            records.append(rec)
        embeds = {}
        for branch, fm in (("id", pair.x_id), ("ra", pair.x_ra)):
            pooled = T.tmean(fm.values, axis=1)  # global average over positions
            w_p = self.params[f"head.{branch}.w"].value
            b_p = self.params[f"head.{branch}.b"].value
            embeds[branch] = T.add(T.matmul(pooled, w_p), b_p)
        return EmbeddingPair(embeds["id"], embeds["ra"]), records

    def embed(self, images):
        """Inference path: only the identity-branch embedding, as an array."""
        pair, _ = self.forward(images)
        return pair.id_embed.data

    def state_dict(self):
        return {name: p.value.data for name, p in self.params.items()}

    def load_state(self, tensors):
        missing = set(self.params) - set(tensors)
        extra = set(tensors) - set(self.params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in self.params.items():
            if tuple(tensors[name].shape) != p.shape:
                raise ConfigError(
                    f"checkpoint tensor {name} has shape {tensors[name].shape}, expected {p.shape}"
                )
            p.value.data = np.asarray(tensors[name], dtype=np.float64)
            p.momentum_buffer = np.zeros_like(p.value.data)

    def save(self, path, extra_tensors=None, meta=None):
        tensors = self.state_dict()
        if extra_tensors:
            tensors.update(extra_tensors)
        info = {"backbone": self.cfg.to_dict()}
        if meta:
            info.update(meta)
        save_checkpoint(path, tensors, info)


def model_from_checkpoint(path):
    """Rebuild a PctModel from a checkpoint; returns (model, extras, meta).

    Tensors outside the backbone's own parameter set (e.g. classifier heads)
    are returned in extras.
    """
    tensors, meta = load_checkpoint(path)
    cfg = BackboneConfig.from_dict(meta["backbone"])
    model = PctModel(cfg)
    own = {k: v for k, v in tensors.items() if k in model.params}
    extras = {k: v for k, v in tensors.items() if k not in model.params}
    model.load_state(own)
    return model, extras, meta
