"""Report writers: delimited metric output plus rendered figures.

Every evaluation or ablation emits machine-readable JSON and CSV (numeric
fields at 4 decimals) and, alongside them, matplotlib renderings of the same
numbers: per-group ROC curves, per-group accuracy bars, ablation spread
plots, and attention heat maps. Attention maps are additionally exported as
8-bit binary PGM for tool-free inspection.
"""

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

GROUP_COLORS = ("tab:blue", "tab:orange", "tab:green", "tab:red",
                "tab:purple", "tab:brown", "tab:pink", "tab:gray")


def write_json(path, payload):
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def metrics_csv_rows(metrics):
    """Flatten GroupMetrics into (section, group, field, value) rows."""
    rows = []
    for g in sorted(metrics.accuracy):
        rows.append(("accuracy", str(g), "accuracy", metrics.accuracy[g]))
        rows.append(("accuracy", str(g), "threshold", metrics.accuracy_threshold[g]))
    rows.append(("accuracy", "all", "ave", metrics.ave))
    rows.append(("accuracy", "all", "std", metrics.std))
    for entry in metrics.fpr_protocol:
        tag = f"{entry['target_fpr']:.0e}"
        for g in sorted(entry["group_fprs"]):
            rows.append((f"fpr@{tag}", g, "fpr", entry["group_fprs"][g]))
        rows.append((f"fpr@{tag}", "all", "threshold", entry["threshold"]))
        rows.append((f"fpr@{tag}", "all", "pooled_fpr", entry["pooled_fpr"]))
        rows.append((f"fpr@{tag}", "all", "bias_degree", entry["bias_degree"]))
    return rows


def write_metrics(out_dir, metrics, group_names=None, stem="metrics"):
    """JSON + CSV + the two standard figures for one GroupMetrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / f"{stem}.json", metrics.to_dict())
    write_csv(out / f"{stem}.csv", ("section", "group", "field", "value"),
              metrics_csv_rows(metrics))
    save_roc_figure(out / f"{stem}_roc.png", metrics.roc, group_names)
    save_accuracy_figure(out / f"{stem}_accuracy.png", metrics, group_names)
    return out / f"{stem}.json"


def _label(g, group_names):
    return (group_names or {}).get(g, f"group {g}")


def save_roc_figure(path, roc, group_names=None):
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, g in enumerate(sorted(roc)):
        pts = np.asarray(roc[g])
        ax.plot(pts[:, 0], pts[:, 1], color=GROUP_COLORS[i % len(GROUP_COLORS)],
                label=_label(g, group_names))
    ax.plot([0, 1], [0, 1], ls=":", c="gray", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("per-group ROC")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_accuracy_figure(path, metrics, group_names=None):
    groups = sorted(metrics.accuracy)
    values = [metrics.accuracy[g] for g in groups]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(range(len(groups)), values,
           color=[GROUP_COLORS[i % len(GROUP_COLORS)] for i in range(len(groups))])
    ax.axhline(metrics.ave, c="k", lw=0.8, ls="--",
               label=f"ave {metrics.ave:.4f} / std {metrics.std:.4f}")
    ax.set_xticks(range(len(groups)), [_label(g, group_names) for g in groups], fontsize=8)
    ax.set_ylim(min(0.45, min(values) - 0.05), 1.0)
    ax.set_ylabel("verification accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_figure(path, table_rows):
    """Per-variant accuracy STD scatter with mean bars.

    table_rows: dicts with keys variant, seed, std (per-seed rows only).
    """
    variants = []
    for r in table_rows:
        if r["variant"] not in variants:
            variants.append(r["variant"])
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for i, v in enumerate(variants):
        stds = [r["std"] for r in table_rows if r["variant"] == v]
        ax.scatter([i] * len(stds), stds, s=18, c="tab:blue", alpha=0.7)
        ax.hlines(np.mean(stds), i - 0.25, i + 0.25, color="tab:red")
    ax.set_xticks(range(len(variants)), variants, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("group accuracy STD")
    ax.set_title("per-seed group spread by variant (red = mean)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curve(path, epoch_losses):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    epochs = range(1, len(epoch_losses["total"]) + 1)
    for key in ("total", "face", "race"):
        ax.plot(epochs, epoch_losses[key], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_pgm(path, values):
    """8-bit binary PGM of a 2-D array, min-max normalized."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pixels = np.round((values - lo) * scale).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(pixels.tobytes())


def save_attention_figure(path, stage_maps):
    """Grid of per-stage, per-head key-marginal heat maps.

    stage_maps: list of (stage_index, array (heads, h, w)).
    """
    heads = max(m.shape[0] for _, m in stage_maps)
    fig, axes = plt.subplots(heads, len(stage_maps),
                             figsize=(2.2 * len(stage_maps), 2.2 * heads), squeeze=False)
    for col, (stage, maps) in enumerate(stage_maps):
        for row in range(heads):
            ax = axes[row][col]
            if row < maps.shape[0]:
                ax.imshow(maps[row], cmap="viridis")
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(f"stage {stage}", fontsize=9)
            if col == 0:
                ax.set_ylabel(f"head {row}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
