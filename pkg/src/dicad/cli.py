"""Command-line entry point.

Commands share three global options: ``--config`` for a YAML config
file, ``--set section.key=value`` overrides applied on top, and
``--run-dir`` for the artifact directory. The run directory defaults
to ``$DICAD_RUN_ROOT/<category>`` when that variable is set, else
``./runs/<category>``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import workflow
from .config import (
    RunConfig,
    apply_overrides,
    default_config,
    load_config,
    validate_config,
)
from .data import SyntheticSpec, convert_visa_csv, generate_synthetic, write_dataset
from .errors import DicadError


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="YAML config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        metavar="KEY=VALUE",
        action="append",
        default=[],
        help="override a config field, e.g. --set sampling.eta=4",
    )
    parser.add_argument("--run-dir", metavar="PATH", help="artifact directory")
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log progress to stderr"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dicad",
        description="anomaly detection via depth-conditioned latent denoising",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the latent denoiser")
    _add_common(p)

    p = sub.add_parser("train-codec", help="train the learned latent codec")
    _add_common(p)

    p = sub.add_parser("build-index", help="index nominal features, derive depth bins")
    _add_common(p)

    p = sub.add_parser("finetune", help="adapt the feature extractor to the domain")
    _add_common(p)

    p = sub.add_parser("infer", help="score image files")
    _add_common(p)
    p.add_argument("inputs", nargs="+", metavar="IMAGE", help="image files to score")
    p.add_argument("--workers", type=int, default=1, help="parallel scoring threads")

    p = sub.add_parser("evaluate", help="score the test split and report metrics")
    _add_common(p)
    p.add_argument("--workers", type=int, default=1, help="parallel scoring threads")

    p = sub.add_parser("ablate", help="paired comparisons on the test split")
    _add_common(p)
    p.add_argument(
        "--mode",
        required=True,
        choices=workflow.ABLATION_MODES,
        help="which comparison to run",
    )
    p.add_argument(
        "--values",
        type=float,
        nargs="+",
        metavar="X",
        help="noise scales for --mode omega (default: 0 0.5 1)",
    )
    p.add_argument("--workers", type=int, default=1, help="parallel scoring threads")

    p = sub.add_parser("bench", help="time per-image scoring")
    _add_common(p)
    p.add_argument("--batch", type=int, default=30, help="images to time")

    p = sub.add_parser("gen-synthetic", help="write the synthetic dataset to disk")
    _add_common(p)
    p.add_argument("--out", required=True, metavar="DIR", help="dataset root to write")

    p = sub.add_parser("convert-visa", help="convert a VisA split CSV to the tree layout")
    p.add_argument("--csv", required=True, metavar="PATH", help="split csv file")
    p.add_argument("--images-root", required=True, metavar="DIR", help="paths in the csv are relative to this")
    p.add_argument("--out", required=True, metavar="DIR", help="dataset root to write")
    p.add_argument("--categories", nargs="+", metavar="NAME", help="subset of categories to convert")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    validate_config(cfg)
    return cfg


def _resolve_run_dir(args: argparse.Namespace, cfg: RunConfig) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    root = os.environ.get("DICAD_RUN_ROOT", "runs")
    return Path(root) / cfg.data.category


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "convert-visa":
            written = convert_visa_csv(
                args.csv, args.images_root, args.out, categories=args.categories
            )
            print(f"converted {len(written)} categories: {', '.join(written)}")
            return 0

        cfg = _resolve_config(args)

        if args.command == "gen-synthetic":
            spec = SyntheticSpec(
                image_size=cfg.data.resolution,
                seed=cfg.seed,
                num_train=cfg.data.num_train,
                num_test_nominal=cfg.data.num_test_nominal,
                num_test_per_kind=cfg.data.num_test_per_kind,
            )
            cat_dir = write_dataset(generate_synthetic(spec), args.out)
            print(f"synthetic dataset written to {cat_dir}")
            return 0

        run_dir = workflow.prepare_run_dir(_resolve_run_dir(args, cfg), cfg)

        if args.command == "train":
            path = workflow.run_train(cfg, run_dir)
            print(f"denoiser saved to {path}")
        elif args.command == "train-codec":
            path = workflow.run_train_codec(cfg, run_dir)
            print(f"codec saved to {path}")
        elif args.command == "build-index":
            path = workflow.run_build_index(cfg, run_dir)
            print(f"index saved to {path}")
        elif args.command == "finetune":
            path = workflow.run_finetune(cfg, run_dir)
            print(f"adapted extractor saved to {path}")
        elif args.command == "infer":
            rows = workflow.run_infer(cfg, run_dir, args.inputs, workers=args.workers)
            for row in rows:
                verdict = "ANOMALOUS" if row["anomalous"] else "nominal"
                print(f"{row['name']}: score={row['score']:.6f} depth={row['depth']} {verdict}")
            print(f"maps written under {run_dir / workflow.HEATMAP_DIR}")
        elif args.command == "evaluate":
            report = workflow.run_evaluate(cfg, run_dir, workers=args.workers)
            print(report.to_table())
        elif args.command == "ablate":
            values = tuple(args.values) if args.values else None
            print(workflow.run_ablate(cfg, run_dir, args.mode, values=values,
                                      workers=args.workers), end="")
        elif args.command == "bench":
            print(workflow.run_bench(cfg, run_dir, batch=args.batch), end="")
    except (DicadError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
