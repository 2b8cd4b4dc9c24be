"""Synthetic grouped image data: identity pattern + group texture + noise.

Each image is clip(template(id) + gain_g * texture(g) + N(0, sigma_g^2)).
Identities live on a shared smooth basis: the template is an i.i.d. uniform
coefficient pattern over low-order cosine fields, so unseen identities share
the subspace that training identities span (verification transfers). Group
textures are random mixtures of the four smoothest modes, a subspace
disjoint from the identity basis, scaled by a per-group gain. The planted
inter-group difficulty bias is a doubled noise sigma on group 0, with the
graded gains as a second, group-predictable bias source. Verification pairs
are drawn within-group from held-out test identities only, with equal
genuine and impostor counts.
"""

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, ProtocolError
from .tensorio import read_tensor, write_tensor

TEXTURE_ORDERS = ((0, 0), (0, 1), (1, 0), (1, 1))
IDENTITY_ORDERS = tuple(
    (p, q) for p in range(5) for q in range(5) if (p, q) not in TEXTURE_ORDERS
)


@dataclass
class DatasetSpec:
    num_groups: int = 4
    ids_per_group: int = 50
    images_per_id: int = 8
    height: int = 16
    width: int = 16
    texture_gains: tuple = (4.0, 4.6, 5.2, 5.8)
    noise_sigmas: tuple = (0.5, 0.25, 0.25, 0.25)  # group 0 carries 2x noise
    test_ids_per_group: int = 12
    pairs_per_group: int = 300  # genuine count; impostor count matches
    clip_lo: float = -12.0
    clip_hi: float = 12.0

    def __post_init__(self):
        if self.num_groups < 2:
            raise ConfigError(f"need at least 2 groups, got {self.num_groups}")
        if self.ids_per_group < 2:
            raise ConfigError("ids_per_group must be >= 2: impostor pairs are impossible otherwise")
        if self.images_per_id < 1 or self.height < 1 or self.width < 1:
            raise ConfigError("images_per_id and image extents must be positive")
        self.texture_gains = _per_group(self.texture_gains, self.num_groups, "texture_gains")
        self.noise_sigmas = _per_group(self.noise_sigmas, self.num_groups, "noise_sigmas")
        if any(s < 0 for s in self.noise_sigmas):
            raise ConfigError(f"noise sigmas must be nonnegative, got {self.noise_sigmas}")
        if not 2 <= self.test_ids_per_group < self.ids_per_group:
            raise ConfigError(
                f"test_ids_per_group must be in [2, ids_per_group), got {self.test_ids_per_group}"
            )
        if self.clip_lo >= self.clip_hi:
            raise ConfigError("clip_lo must be below clip_hi")

    def to_dict(self):
        return asdict(self)


def _per_group(values, num_groups, name):
    if np.isscalar(values):
        return (float(values),) * num_groups
    values = tuple(float(v) for v in values)
    if len(values) != num_groups:
        raise ConfigError(f"{name} needs one value per group ({num_groups}), got {len(values)}")
    return values


def cosine_field(h, w, p, q):
    """Unit-RMS separable cosine mode on the half-shifted pixel grid."""
    y = (np.arange(h) + 0.5) / h
    x = (np.arange(w) + 0.5) / w
    f = np.outer(np.cos(np.pi * p * y), np.cos(np.pi * q * x))
    return f / np.sqrt(np.mean(f**2))


def identity_basis(h, w):
    """The shared identity system: unit-RMS fields of orders 2..4 mixes."""
    return np.stack([cosine_field(h, w, p, q) for p, q in IDENTITY_ORDERS])


def group_texture(rng, h, w):
    """A smooth random field from the four lowest modes, unit RMS."""
    coeffs = rng.normal(size=len(TEXTURE_ORDERS))
    fieldmap = sum(
        c * cosine_field(h, w, p, q) for c, (p, q) in zip(coeffs, TEXTURE_ORDERS)
    )
    return fieldmap / np.sqrt(np.mean(fieldmap**2))


@dataclass
class Sample:
    image: np.ndarray  # (1, h, w)
    id_label: int
    group_label: int
    split: str  # "train" or "test"
    path: str  # relative location inside a dataset directory


@dataclass
class SynthDataset:
    spec: DatasetSpec
    seed: int
    samples: list
    pair_rows: list = field(default_factory=list)  # (group_id, path_a, path_b, same)
    textures: np.ndarray = None  # (num_groups, h, w), before gain

    def images(self, split=None):
        keep = [s for s in self.samples if split is None or s.split == split]
        x = np.stack([s.image for s in keep])
        ids = np.array([s.id_label for s in keep])
        groups = np.array([s.group_label for s in keep])
        return x, ids, groups

    def by_path(self):
        return {s.path: s for s in self.samples}


def generate(spec, seed):
    """Build the full dataset and its verification pair lists in memory."""
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    basis = identity_basis(h, w)
    theta_scale = np.sqrt(3.0 / basis.shape[0])  # template RMS ~ 1
    textures = np.stack([group_texture(rng, h, w) for _ in range(spec.num_groups)])

    genuine_budget = spec.test_ids_per_group * (spec.images_per_id * (spec.images_per_id - 1)) // 2
    if spec.pairs_per_group > genuine_budget:
        raise ProtocolError(
            f"pairs_per_group={spec.pairs_per_group} exceeds the {genuine_budget} distinct "
            f"genuine pairs available from {spec.test_ids_per_group} test ids"
        )

    samples = []
    test_start = spec.ids_per_group - spec.test_ids_per_group
    for g in range(spec.num_groups):
        for i in range(spec.ids_per_group):
            theta = rng.uniform(-1.0, 1.0, size=basis.shape[0])
            template = theta_scale * np.tensordot(theta, basis, axes=1)
            split = "test" if i >= test_start else "train"
            for k in range(spec.images_per_id):
                noise = rng.normal(0.0, spec.noise_sigmas[g], size=(h, w))
                img = template + spec.texture_gains[g] * textures[g] + noise
                img = np.clip(img, spec.clip_lo, spec.clip_hi)
                samples.append(
                    Sample(
                        image=img[None],
                        id_label=g * spec.ids_per_group + i,
                        group_label=g,
                        split=split,
                        path=f"group_{g}/id_{i}/img_{k}.pct",
                    )
                )

    pair_rows = _draw_pairs(spec, samples, rng)
    return SynthDataset(spec, seed, samples, pair_rows, textures)


def _draw_pairs(spec, samples, rng):
    by_group = {}
    for s in samples:
        if s.split == "test":
            by_group.setdefault(s.group_label, {}).setdefault(s.id_label, []).append(s.path)
    rows = []
    for g in sorted(by_group):
        ids = sorted(by_group[g])
        genuine = []
        for i in ids:
            paths = by_group[g][i]
            genuine += [
                (paths[a], paths[b]) for a in range(len(paths)) for b in range(a + 1, len(paths))
            ]
        pick = rng.choice(len(genuine), size=spec.pairs_per_group, replace=False)
        for j in sorted(pick):
            rows.append((str(g), genuine[j][0], genuine[j][1], True))
        for _ in range(spec.pairs_per_group):
            ia, ib = rng.choice(len(ids), size=2, replace=False)
            rows.append(
                (
                    str(g),
                    str(rng.choice(by_group[g][ids[ia]])),
                    str(rng.choice(by_group[g][ids[ib]])),
                    False,
                )
            )
    return rows


def write_dataset(dataset, out_dir):
    """Materialize images as PCT1 files plus pair list, spec echo, manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digests = {}
    for s in dataset.samples:
        path = out / s.path
        path.parent.mkdir(parents=True, exist_ok=True)
        write_tensor(path, s.image)
        digests[s.path] = hashlib.sha256(path.read_bytes()).hexdigest()

    from .fairness import write_pair_list

    write_pair_list(out / "pairs_test.txt", dataset.pair_rows)
    digests["pairs_test.txt"] = hashlib.sha256((out / "pairs_test.txt").read_bytes()).hexdigest()

    labels = {
        s.path: {"id": s.id_label, "group": s.group_label, "split": s.split}
        for s in dataset.samples
    }
    spec_lines = [f"{k}={_flat(v)}" for k, v in dataset.spec.to_dict().items()]
    (out / "spec.cfg").write_text("\n".join(spec_lines + [f"seed={dataset.seed}"]) + "\n")
    manifest = {
        "seed": dataset.seed,
        "spec": dataset.spec.to_dict(),
        "labels": labels,
        "files": digests,
    }
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    manifest["dataset_sha256"] = hashlib.sha256(body.encode()).hexdigest()
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def _flat(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def load_dataset(data_dir):
    """Read a generated dataset directory back into a SynthDataset."""
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = DatasetSpec(
        **{k: tuple(v) if isinstance(v, list) else v for k, v in manifest["spec"].items()}
    )
    samples = []
    for rel, info in sorted(manifest["labels"].items()):
        samples.append(
            Sample(
                image=read_tensor(root / rel),
                id_label=info["id"],
                group_label=info["group"],
                split=info["split"],
                path=rel,
            )
        )
    from .fairness import read_pair_list

    pair_rows = read_pair_list(root / "pairs_test.txt")
    return SynthDataset(spec, manifest["seed"], samples, pair_rows)
