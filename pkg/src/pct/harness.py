"""End-to-end workflows: train with the epoch schedule, evaluate both
fairness protocols, sweep ablation variants, export attention maps.

The identity-branch parameters (plus all cross-transformer weights and the
face classifier) train at the face learning rate; the group branch and its
classifier train at the group learning rate. Both share the momentum,
weight decay and decay-epoch schedule.
"""

import os
import time
from dataclasses import dataclass, asdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import report
from . import tensor as T
from .backbone import BackboneConfig, PctModel, model_from_checkpoint
from .ct import attention_heatmaps
from .errors import ConfigError, NumericError
from .fairness import GroupedPairs, evaluate_grouped
from .losses import (
    ClassifierHead,
    LossWeights,
    MarginConfig,
    RaceHead,
    face_loss,
    margin_logits,
    race_loss,
    total_loss,
)
from .synthdata import DatasetSpec, load_dataset
from .tensor import OptimizerConfig, Tensor, backward, sgd_step
from .tensorio import write_tensor

DEFAULT_FPR_GRID = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)


@dataclass
class RunConfig:
    """Every knob of one training run, parseable from a key=value file."""

    # backbone
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
    # losses
    margin_variant: str = "arc"
    margin_s: float = 64.0
    margin_m: float = 0.35
    alpha: float = 1.0
    # optimizer: schedule shape kept; rates and decay tuned for a net
    # without normalization layers (higher rates diverge, the margin loss
    # is embedding-scale-invariant so weights need a real decay pull)
    lr_face: float = 0.01
    lr_race: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 0.05
    decay_epochs: tuple = (16, 24, 28)
    decay_factor: float = 0.1
    epochs: int = 32
    batch_size: int = 32
    seed: int = 0
    fpr_grid: tuple = DEFAULT_FPR_GRID

    def backbone_config(self):
        return BackboneConfig(
            input_h=self.input_h,
            input_w=self.input_w,
            input_channels=self.input_channels,
            kernel=self.kernel,
            stem_width=self.stem_width,
            stem_stride=self.stem_stride,
            stage_widths=tuple(self.stage_widths),
            stage_strides=tuple(self.stage_strides),
            ct_enabled=tuple(self.ct_enabled),
            heads=self.heads,
            max_rel_offset=self.max_rel_offset,
            embed_dim=self.embed_dim,
        )

    def optimizer_config(self, base_lr):
        schedule = [(int(e), self.decay_factor) for e in self.decay_epochs]
        return OptimizerConfig(base_lr, self.momentum, self.weight_decay, schedule)

    def to_dict(self):
        return asdict(self)


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(raw, default, key, where):
    if isinstance(default, bool):
        if raw.lower() not in _BOOL_WORDS:
            raise ConfigError(f"{where}: cannot read {key}={raw!r} as a boolean")
        return _BOOL_WORDS[raw.lower()]
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        if raw.strip() == "":
            return ()
        element = default[0] if default else 0.0
        return tuple(_coerce(part.strip(), element, key, where) for part in raw.split(","))
    return raw


def parse_kv_config(path, cls):
    """Build a config dataclass from `key=value` lines.

    Blank lines and `#` comments are skipped. Unknown keys and unparseable
    values raise ConfigError naming the line number.
    """
    defaults = cls()
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key == "seed" and not hasattr(defaults, "seed"):
                continue  # dataset spec files may carry the generation seed
            if not hasattr(defaults, key):
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r} for {cls.__name__}")
            try:
                values[key] = _coerce(raw, getattr(defaults, key), key, f"{path}:{lineno}")
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return cls(**values)


def eval_workers():
    """Worker count for embedding extraction, capped by PCT_THREADS."""
    cap = os.environ.get("PCT_THREADS")
    workers = min(4, os.cpu_count() or 1)
    if cap is not None:
        workers = max(1, min(workers, int(cap)))
    return workers


@dataclass
class RunReport:
    config: dict
    seed: int
    epoch_losses: dict  # {"face": [...], "race": [...], "total": [...]}
    wall_time_s: float
    checkpoint: str
    num_classes: int
    metrics: dict | None = None
    stage_probe: list | None = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Trainer:
    """Owns the model, the two classifier heads and the SGD state."""

    def __init__(self, cfg, num_classes, num_groups):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.model = PctModel(cfg.backbone_config(), rng)
        self.margin = MarginConfig(cfg.margin_variant, cfg.margin_s, cfg.margin_m, num_classes)
        self.face_head = ClassifierHead(num_classes, cfg.embed_dim, rng)
        self.race_head = RaceHead(num_groups, cfg.embed_dim, rng)
        self.loss_weights = LossWeights(cfg.alpha)
        self.rng = rng
        self.fr_params = self.model.param_group("fr") + [self.face_head.weight]
        self.rc_params = self.model.param_group("rc") + [
            self.race_head.weight,
            self.race_head.bias,
        ]
        self.opt_face = cfg.optimizer_config(cfg.lr_face)
        self.opt_race = cfg.optimizer_config(cfg.lr_race)

    def step(self, images, id_labels, group_labels, epoch, step_idx):
        pair, _ = self.model.forward(images)
        logits = margin_logits(pair.id_embed, self.face_head, id_labels, self.margin)
        l_face = face_loss(logits, id_labels)
        l_race = race_loss(pair.ra_embed, group_labels, self.race_head)
        loss = total_loss(l_face, l_race, self.loss_weights)
        if not np.isfinite(loss.data):
            raise NumericError(
                f"loss diverged at epoch {epoch} step {step_idx}: "
                f"face={l_face.item():.6g} race={l_race.item():.6g} "
                f"lr_face={self.opt_face.lr_at(epoch):.6g} lr_race={self.opt_race.lr_at(epoch):.6g}"
            )
        backward(loss)
        sgd_step(self.fr_params, self.opt_face, epoch)
        sgd_step(self.rc_params, self.opt_race, epoch)
        return l_face.item(), l_race.item(), loss.item()

    def extra_tensors(self):
        return {
            "cls.face.w": self.face_head.weight.value.data,
            "cls.race.w": self.race_head.weight.value.data,
            "cls.race.b": self.race_head.bias.value.data,
        }


def train_model(cfg, dataset, out_dir, quiet=True):
    """SGD over shuffled batches; writes checkpoint + JSON report.

    The reported metrics are computed from the reloaded checkpoint so that
    save -> load -> eval reproduces them exactly.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, ids, groups = dataset.images("train")
    classes, class_idx = np.unique(ids, return_inverse=True)
    num_groups = dataset.spec.num_groups
    trainer = Trainer(cfg, num_classes=classes.size, num_groups=num_groups)

    t0 = time.perf_counter()
    losses = {"face": [], "race": [], "total": []}
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    n = images.shape[0]
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        sums = np.zeros(3)
        steps = 0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            f, r, tot = trainer.step(
                Tensor(images[batch]), class_idx[batch], groups[batch], epoch, steps
            )
            sums += (f, r, tot)
            steps += 1
        for key, val in zip(("face", "race", "total"), sums / steps):
            losses[key].append(float(val))
        if not quiet:
            print(f"epoch {epoch + 1}/{cfg.epochs}: total {losses['total'][-1]:.4f}")
    wall = time.perf_counter() - t0

    ckpt_path = out / "checkpoint.pct"
    trainer.model.save(
        ckpt_path,
        extra_tensors=trainer.extra_tensors(),
        meta={"run": cfg.to_dict(), "num_classes": int(classes.size), "num_groups": num_groups},
    )

    model, _, _ = model_from_checkpoint(ckpt_path)
    metrics = evaluate_model(model, dataset, cfg.fpr_grid)
    report.write_metrics(out, metrics)
    report.save_training_curve(out / "training_curve.png", losses)

    run_report = RunReport(
        config=cfg.to_dict(),
        seed=cfg.seed,
        epoch_losses=losses,
        wall_time_s=wall,
        checkpoint=str(ckpt_path),
        num_classes=int(classes.size),
        metrics=metrics.to_dict(),
    )
    report.write_json(out / "run_report.json", run_report.to_dict())
    return run_report, ckpt_path


def _embed_paths(model, dataset, paths, batch=64):
    """Embed the unique referenced images via the identity branch."""
    by_path = dataset.by_path()
    missing = [p for p in paths if p not in by_path]
    if missing:
        raise ConfigError(f"pair list references missing images: {missing[:3]}")
    paths = list(paths)
    chunks = [paths[i : i + batch] for i in range(0, len(paths), batch)]

    def run(chunk):
        stack = np.stack([by_path[p].image for p in chunk])
        return model.embed(stack)

    workers = eval_workers()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    out = {}
    for chunk, emb in zip(chunks, results):
        for p, e in zip(chunk, emb):
            out[p] = e
    return out


def evaluate_model(model, dataset, fpr_grid=DEFAULT_FPR_GRID):
    unique_paths = sorted({p for row in dataset.pair_rows for p in (row[1], row[2])})
    embeddings = _embed_paths(model, dataset, unique_paths)
    pairs = GroupedPairs.from_embeddings(dataset.pair_rows, embeddings)
    return evaluate_grouped(pairs, fpr_grid)


def evaluate_checkpoint(ckpt_path, dataset, out_dir, fpr_grid=DEFAULT_FPR_GRID):
    model, _, _ = model_from_checkpoint(ckpt_path)
    metrics = evaluate_model(model, dataset, fpr_grid)
    report.write_metrics(out_dir, metrics)
    return metrics


# ---------------------------------------------------------------------------
# stage-wise group-separability probe


def linear_probe_accuracy(features, labels, ridge=1e-3):
    """Ridge-regression one-vs-all probe, fit on even rows, scored on odd."""
    x = np.asarray(features, dtype=np.float64)
    x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    y = np.asarray(labels)
    onehot = np.eye(y.max() + 1)[y]
    fit, score = slice(0, None, 2), slice(1, None, 2)
    gram = x[fit].T @ x[fit] + ridge * np.eye(x.shape[1])
    w = np.linalg.solve(gram, x[fit].T @ onehot[fit])
    pred = np.argmax(x[score] @ w, axis=1)
    return float(np.mean(pred == y[score]))


def stage_group_probe(model, images, group_labels, chunk=128):
    """Group-probe accuracy on pooled identity features after each stage."""
    feats = None
    for start in range(0, images.shape[0], chunk):
        _, recs = model.forward(Tensor(images[start : start + chunk]), want_stage_features=True)
        pooled = [rec["x_id_next"].mean(axis=1) for rec in recs]
        if feats is None:
            feats = [[p] for p in pooled]
        else:
            for lst, p in zip(feats, pooled):
                lst.append(p)
    return [
        linear_probe_accuracy(np.concatenate(lst), group_labels) for lst in feats
    ]


# ---------------------------------------------------------------------------
# ablation sweep


ABLATION_VARIANTS = ("no-ct", "stage1", "stage2", "stage3", "stage4", "h1", "h2", "h4", "pct")


def variant_config(base, name):
    """Derive one ablation variant from the base run config."""
    cfg = RunConfig(**base.to_dict())
    t = len(cfg.stage_widths)
    if name == "pct":
        cfg.ct_enabled = (True,) * t
    elif name == "no-ct":
        cfg.ct_enabled = (False,) * t
    elif name.startswith("stage"):
        k = int(name[len("stage") :])
        if not 1 <= k <= t:
            raise ConfigError(f"variant {name!r}: stage index out of range 1..{t}")
        cfg.ct_enabled = tuple(i == k - 1 for i in range(t))
    elif name.startswith("h"):
        cfg.ct_enabled = (True,) * t
        cfg.heads = int(name[1:])
    else:
        raise ConfigError(f"unknown ablation variant {name!r}")
    return cfg


def run_ablation(base_cfg, dataset, out_dir, variants=ABLATION_VARIANTS, seeds=(0, 1, 2, 3, 4),
                 probe_stages=True, quiet=True):
    """Train every (variant, seed), evaluate, and emit the comparison table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in variants:
        for seed in seeds:
            cfg = variant_config(base_cfg, name)
            cfg.seed = int(seed)
            run_dir = out / f"{name}_seed{seed}"
            run_report, ckpt = train_model(cfg, dataset, run_dir, quiet=quiet)
            row = {
                "variant": name,
                "seed": int(seed),
                "ave": run_report.metrics["ave"],
                "std": run_report.metrics["std"],
                "accuracy": run_report.metrics["accuracy"],
                "bias_degree": {
                    f"{e['target_fpr']:.0e}": e["bias_degree"]
                    for e in run_report.metrics["fpr_protocol"]
                },
                "checkpoint": str(ckpt),
            }
            if probe_stages and any(cfg.ct_enabled):
                model, _, _ = model_from_checkpoint(ckpt)
                x_test, _, g_test = dataset.images("test")
                row["stage_probe"] = stage_group_probe(model, x_test, g_test)
            rows.append(row)
            if not quiet:
                print(f"{name} seed {seed}: ave {row['ave']:.4f} std {row['std']:.4f}")

    aggregates = []
    for name in variants:
        vrows = [r for r in rows if r["variant"] == name]
        aggregates.append(
            {
                "variant": name,
                "seeds": [r["seed"] for r in vrows],
                "mean_ave": float(np.mean([r["ave"] for r in vrows])),
                "mean_std": float(np.mean([r["std"] for r in vrows])),
                "per_seed_std": [r["std"] for r in vrows],
                "per_seed_ave": [r["ave"] for r in vrows],
            }
        )
    table = {"base_config": base_cfg.to_dict(), "rows": rows, "aggregates": aggregates}
    report.write_json(out / "ablation.json", table)
    csv_rows = [
        ("per-seed", r["variant"], r["seed"], r["ave"], r["std"]) for r in rows
    ] + [
        ("aggregate", a["variant"], len(a["seeds"]), a["mean_ave"], a["mean_std"])
        for a in aggregates
    ]
    report.write_csv(out / "ablation.csv", ("kind", "variant", "seed_or_n", "ave", "std"), csv_rows)
    report.save_ablation_figure(out / "ablation_std.png", rows)
    return table


# ---------------------------------------------------------------------------
# attention export


def export_attention(ckpt_path, dataset, out_dir, image_path=None):
    """Forward one image and dump each stage's attention in PCT1 + PGM + PNG."""
    model, _, _ = model_from_checkpoint(ckpt_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if image_path is None:
        test = [s for s in dataset.samples if s.split == "test"]
        sample = test[0] if test else dataset.samples[0]
        image, label = sample.image, sample.path
    else:
        from .tensorio import read_tensor

        image, label = read_tensor(image_path), str(image_path)
    _, records = model.forward(Tensor(image[None]))
    stage_maps = []
    for rec in records:
        if rec is None:
            continue
        t = rec["stage"]
        attn = rec["attn_id_to_ra"][0]  # (heads, n, n)
        maps = attention_heatmaps(attn, rec["h"], rec["w"])
        write_tensor(out / f"attn_stage{t}.pct", attn)
        write_tensor(out / f"heatmap_stage{t}.pct", maps)
        for head in range(maps.shape[0]):
            report.write_pgm(out / f"heatmap_stage{t}_head{head}.pgm", maps[head])
        stage_maps.append((t, maps))
    if stage_maps:
        report.save_attention_figure(out / "attention.png", stage_maps)
    report.write_json(out / "attention_manifest.json",
                      {"input": label, "stages": [t for t, _ in stage_maps]})
    return stage_maps
