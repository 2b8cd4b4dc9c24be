"""Verification-protocol metrics over demographic groups.

Two protocols are implemented. The accuracy protocol scores each group's
pairs at that group's best similarity threshold and summarizes the per-group
accuracies by their mean (AVE) and sample standard deviation (STD, divisor
K-1). The false-positive protocol fixes one global threshold from the pooled
impostor similarities at a target FPR, measures each group's FPR there, and
summarizes the spread by the normalized bias degree
(1/K) * sqrt(sum_k (F_k - mu)^2) / target_fpr.

Ties at a threshold always count as accepted (>= comparison).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ProtocolError


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine similarity of a zero vector is undefined")
    return float(a @ b / (na * nb))


def batch_cosine(a, b):
    """Row-wise cosine similarity of two (N, D) arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise NumericError("cosine similarity of a zero vector is undefined")
    return np.einsum("nd,nd->n", a, b) / (na * nb)


def ave_std(values):
    """Mean and sample standard deviation (divisor K-1) of per-group values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ContractError(f"ave_std needs at least 2 groups, got {values.size}")
    return float(values.mean()), float(values.std(ddof=1))


def global_threshold(impostor_similarities, target_fpr):
    """Smallest threshold whose accepted-impostor fraction is <= target_fpr.

    Candidate thresholds are the observed similarity values; acceptance is
    similarity >= threshold. target >= 1 accepts everything (threshold -1);
    a target below 1/N yields a threshold above the largest similarity.
    """
    sims = np.sort(np.asarray(impostor_similarities, dtype=np.float64))[::-1]
    n = sims.size
    if target_fpr <= 0:
        raise ContractError(f"target_fpr must be positive, got {target_fpr}")
    if n < math.ceil(1.0 / target_fpr):
        raise ProtocolError(
            f"need at least {math.ceil(1.0 / target_fpr)} impostor pairs for "
            f"target FPR {target_fpr:g}, have {n}"
        )
    budget = int(math.floor(target_fpr * n))  # impostors we may accept
    if budget >= n:
        return -1.0
    values, first = np.unique(sims[::-1], return_index=True)
    counts_ge = n - first  # impostors >= each distinct value (ascending order)
    ok = counts_ge <= budget
    if not ok.any():
        return float(np.nextafter(sims[0], np.inf))
    return float(values[ok][0])


def group_fpr(grouped_impostors, threshold):
    """Per-group fraction of impostor similarities accepted at the threshold."""
    return {
        g: float(np.mean(np.asarray(s, dtype=np.float64) >= threshold))
        for g, s in grouped_impostors.items()
    }


def bias_degree(group_fprs, target_fpr):
    """(1/K) sqrt(sum (F_k - mu)^2), normalized by the target FPR.

    The 1/K prefactor sits outside the square root, so this is deliberately
    not a standard deviation.
    """
    f = np.asarray(list(group_fprs.values()) if isinstance(group_fprs, dict) else group_fprs,
                   dtype=np.float64)
    if f.size < 2:
        raise ContractError(f"bias_degree needs at least 2 groups, got {f.size}")
    if target_fpr <= 0:
        raise ContractError(f"target_fpr must be positive, got {target_fpr}")
    return float(np.sqrt(np.sum((f - f.mean()) ** 2)) / f.size / target_fpr)


def _threshold_candidates(similarities):
    u = np.unique(similarities)
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[u[0] - 1.0], mids, [u[-1] + 1.0]])


def verification_accuracy(similarities, same):
    """Best accuracy over midpoint thresholds; smallest threshold on ties."""
    sims = np.asarray(similarities, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if sims.shape != same.shape or sims.ndim != 1:
        raise ContractError(f"similarities/labels shapes disagree: {sims.shape} vs {same.shape}")
    if same.all() or (~same).all():
        raise ProtocolError("need both genuine and impostor pairs to sweep a threshold")
    candidates = _threshold_candidates(sims)
    accepted = sims[None, :] >= candidates[:, None]
    correct = (accepted == same[None, :]).mean(axis=1)
    best = int(np.argmax(correct))  # argmax returns the first (= smallest) on ties
    return float(correct[best]), float(candidates[best])


def roc_points(similarities, same):
    """Monotone (fpr, tpr) staircase over all distinct thresholds.

    Starts at (0, 0) (threshold above every similarity) and ends at (1, 1).
    """
    sims = np.asarray(similarities, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    n_pos = int(same.sum())
    n_neg = int((~same).sum())
    if n_pos == 0 or n_neg == 0:
        raise ProtocolError("need both genuine and impostor pairs for a ROC curve")
    order = np.argsort(sims)[::-1]
    sorted_sims = sims[order]
    sorted_same = same[order]
    tp = np.cumsum(sorted_same)
    fp = np.cumsum(~sorted_same)
    # keep only the last index of each tie block (threshold = that value)
    boundary = np.nonzero(np.diff(sorted_sims))[0]
    keep = np.concatenate([boundary, [sims.size - 1]])
    points = [(0.0, 0.0)]
    points += [(fp[i] / n_neg, tp[i] / n_pos) for i in keep]
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return points


def roc_auc(points):
    """Trapezoidal area under a (fpr, tpr) staircase."""
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.trapezoid(tpr, fpr))


@dataclass
class GroupedPairs:
    """Labeled verification pairs partitioned by demographic group.

    similarities[g] and same[g] are aligned 1-D arrays for group g.
    """

    similarities: dict
    same: dict
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.similarities:
            raise ContractError("GroupedPairs needs at least one group")
        for g, sims in self.similarities.items():
            self.similarities[g] = np.asarray(sims, dtype=np.float64)
            self.same[g] = np.asarray(self.same[g], dtype=bool)
            if self.similarities[g].size == 0:
                raise ContractError(f"group {g} has no pairs")
            if self.similarities[g].shape != self.same[g].shape:
                raise ContractError(f"group {g}: similarity/label lengths differ")

    @classmethod
    def from_embeddings(cls, pair_rows, embeddings, names=None):
        """pair_rows: (group, key_a, key_b, same); embeddings: key -> vector."""
        sims, same = {}, {}
        for g, a, b, is_same in pair_rows:
            sims.setdefault(g, []).append(
                cosine_similarity(embeddings[a], embeddings[b])
            )
            same.setdefault(g, []).append(bool(is_same))
        return cls(sims, same, names or {})

    def impostors(self):
        return {g: self.similarities[g][~self.same[g]] for g in self.similarities}


@dataclass
class GroupMetrics:
    """Everything both protocols produce for one embedding model."""

    accuracy: dict  # group -> best-threshold accuracy
    accuracy_threshold: dict
    ave: float
    std: float
    fpr_protocol: list  # one entry per target FPR
    roc: dict  # group -> list of (fpr, tpr)

    def to_dict(self):
        return {
            "accuracy": {str(g): v for g, v in self.accuracy.items()},
            "accuracy_threshold": {str(g): v for g, v in self.accuracy_threshold.items()},
            "ave": self.ave,
            "std": self.std,
            "fpr_protocol": self.fpr_protocol,
            "roc": {str(g): [[float(x), float(y)] for x, y in pts] for g, pts in self.roc.items()},
        }


def feasible_fpr_grid(grid, n_impostors, min_events=10):
    """Drop targets whose accepted-impostor count would fall below min_events."""
    return [t for t in grid if t * n_impostors >= min_events]


def evaluate_grouped(pairs, fpr_grid=(1e-1, 1e-2, 1e-3, 1e-4, 1e-5)):
    """Run both protocols on grouped pairs; the grid is feasibility-truncated."""
    accuracy, acc_thr, roc = {}, {}, {}
    for g in sorted(pairs.similarities):
        accuracy[g], acc_thr[g] = verification_accuracy(pairs.similarities[g], pairs.same[g])
        roc[g] = roc_points(pairs.similarities[g], pairs.same[g])
    ave, std = ave_std(list(accuracy.values()))

    impostors = pairs.impostors()
    pooled = np.concatenate([impostors[g] for g in sorted(impostors)])
    protocol = []
    for target in feasible_fpr_grid(fpr_grid, pooled.size):
        thr = global_threshold(pooled, target)
        fprs = group_fpr(impostors, thr)
        protocol.append(
            {
                "target_fpr": float(target),
                "threshold": float(thr),
                "group_fprs": {str(g): v for g, v in fprs.items()},
                "pooled_fpr": float(np.mean(pooled >= thr)),
                "bias_degree": bias_degree(fprs, target),
            }
        )
    return GroupMetrics(accuracy, acc_thr, ave, std, protocol, roc)


def read_pair_list(path):
    """Parse `group_id,path_a,path_b,same(0|1)` lines."""
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4 or parts[3] not in ("0", "1"):
                raise ProtocolError(f"{path}:{lineno}: malformed pair line {line!r}")
            rows.append((parts[0], parts[1], parts[2], parts[3] == "1"))
    return rows


def write_pair_list(path, rows):
    with open(path, "w") as f:
        for g, a, b, same in rows:
            f.write(f"{g},{a},{b},{1 if same else 0}\n")
