"""Command-line entry point.

Subcommands: generate, train, eval, ablate, export-attn. Exit codes:
0 on success, 1 on usage errors, 2 on runtime failures.
"""

import argparse
import sys
from pathlib import Path

from .errors import PctError
from .harness import (
    ABLATION_VARIANTS,
    RunConfig,
    evaluate_checkpoint,
    export_attention,
    parse_kv_config,
    run_ablation,
    train_model,
)
from .synthdata import DatasetSpec, generate, load_dataset, write_dataset


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser():
    parser = _Parser(prog="pct", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic grouped dataset")
    p.add_argument("--config", help="dataset spec file (key=value); defaults used if omitted")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one model on a generated dataset")
    p.add_argument("--config", help="run config file (key=value); defaults used if omitted")
    p.add_argument("--data", required=True, help="dataset directory from `pct generate`")
    p.add_argument("--out", required=True, help="output directory for checkpoint and report")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the dataset pair lists")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fpr-grid", help="comma-separated target FPRs (default 1e-1..1e-5)")

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    p.add_argument("--config", help="base run config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="first seed of the sweep")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds per variant")
    p.add_argument("--variants", help=f"comma list among {','.join(ABLATION_VARIANTS)}")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("export-attn", help="export per-stage attention maps for one input")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="dataset directory supplying the input image")
    p.add_argument("--out", required=True)
    p.add_argument("--image", help="explicit PCT1 image file instead of the first test image")

    return parser


def _run_config(args):
    cfg = parse_kv_config(args.config, RunConfig) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _dispatch(args):
    if args.command == "generate":
        spec = parse_kv_config(args.config, DatasetSpec) if args.config else DatasetSpec()
        manifest = write_dataset(generate(spec, args.seed), args.out)
        print(f"wrote {len(manifest['files'])} files to {args.out} "
              f"(dataset_sha256 {manifest['dataset_sha256'][:12]})")
        return

    if args.command == "train":
        cfg = _run_config(args)
        dataset = load_dataset(args.data)
        run_report, ckpt = train_model(cfg, dataset, args.out, quiet=not args.verbose)
        print(f"checkpoint {ckpt}; ave {run_report.metrics['ave']:.4f} "
              f"std {run_report.metrics['std']:.4f}")
        return

    if args.command == "eval":
        dataset = load_dataset(args.data)
        grid = (
            tuple(float(v) for v in args.fpr_grid.split(","))
            if args.fpr_grid
            else RunConfig().fpr_grid
        )
        metrics = evaluate_checkpoint(args.checkpoint, dataset, args.out, grid)
        print(f"ave {metrics.ave:.4f} std {metrics.std:.4f}; reports in {args.out}")
        return

    if args.command == "ablate":
        cfg = _run_config(args)
        dataset = load_dataset(args.data)
        variants = tuple(args.variants.split(",")) if args.variants else ABLATION_VARIANTS
        seeds = tuple(range(args.seed, args.seed + args.seeds))
        table = run_ablation(cfg, dataset, args.out, variants, seeds, quiet=not args.verbose)
        for agg in table["aggregates"]:
            print(f"{agg['variant']}: mean ave {agg['mean_ave']:.4f} "
                  f"mean std {agg['mean_std']:.4f}")
        return

    if args.command == "export-attn":
        dataset = load_dataset(args.data)
        stage_maps = export_attention(args.checkpoint, dataset, args.out, args.image)
        print(f"exported attention for stages {[t for t, _ in stage_maps]} to {args.out}")
        return

    raise PctError(f"unhandled command {args.command!r}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except (PctError, OSError) as exc:
        print(f"pct {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
