"""Command-line front end: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .config import load_config, parse_overrides
from .errors import SemadcError
from .pipeline import STAGES, open_run

RUN_ROOT_ENV = "SEMADC_RUN_ROOT"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _csv(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None
    return parse


# flag dest -> dotted config key
FLAG_KEYS = {
    "classes": "synth.num_classes",
    "per_class": "synth.images_per_class",
    "separation": "synth.separation",
    "wafers": "synth.wafers_per_class",
    "manifest": "data.manifest",
    "ratios": "data.split_ratios",
    "backend": "embed.backend",
    "model": "embed.model_path",
    "k": "knn.k_values",
    "metric": "knn.metric",
    "normalize": "knn.normalize",
    "knn_shots": "knn.shots",
    "train_shots": "train.shots",
    "head": "train.head",
    "lr": "train.lr_values",
    "epochs": "train.epochs",
    "pseudo_shots": "pseudo.shots",
    "threshold": "pseudo.threshold",
    "alpha": "pseudo.alpha",
    "rounds": "pseudo.rounds",
    "ramp": "pseudo.ramp",
    "tsne_split": "tsne.split",
    "representation": "tsne.representation",
    "max_points": "tsne.max_points",
    "perplexity": "tsne.perplexity",
    "sweep_shots": "sweep.shots",
    "methods": "sweep.methods",
    "per_layer": "sweep.per_layer",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="TOML run configuration")
    common.add_argument("-r", "--run-dir", help=f"run directory (default: ${RUN_ROOT_ENV}/<timestamp>-seed<seed>)")
    common.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value by dotted key, e.g. knn.k=5")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap on worker threads")
    mode = common.add_mutually_exclusive_group()
    mode.add_argument("--resume", action="store_true", help="reuse outputs that already exist")
    mode.add_argument("--force", action="store_true", help="overwrite outputs that already exist")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="semadc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic defect-image set")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--separation", choices=["low", "medium", "high"])
    p.add_argument("--wafers", type=int)

    p = sub.add_parser("ingest", parents=[common], help="validate a manifest and its images")
    p.add_argument("--manifest")

    p = sub.add_parser("split", parents=[common], help="wafer-aware train/val/test split")
    p.add_argument("--ratios", type=_csv(float))

    p = sub.add_parser("embed", parents=[common], help="embed every split")
    p.add_argument("--backend", choices=["reference", "onnx"])
    p.add_argument("--model", help="ONNX model file for the onnx backend")

    p = sub.add_parser("knn", parents=[common], help="Gaussian-weighted k-NN evaluation")
    p.add_argument("--k", type=_csv(int), help="one k or a comma-separated sweep")
    p.add_argument("--metric", choices=["euclidean", "cosine"])
    p.add_argument("--normalize", action="store_const", const=True, help="L2-normalize embeddings first")
    p.add_argument("--shots", dest="knn_shots", type=int)

    p = sub.add_parser("train", parents=[common], help="train a classification head on few shots")
    p.add_argument("--shots", dest="train_shots", type=int)
    p.add_argument("--head", choices=["linear", "mlp"])
    p.add_argument("--lr", type=_csv(float), help="one peak learning rate or a comma-separated sweep")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("pseudo", parents=[common], help="pseudo-label semi-supervised training")
    p.add_argument("--shots", dest="pseudo_shots", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--ramp", action="store_const", const=True)

    p = sub.add_parser("tsne", parents=[common], help="2-D t-SNE layout of a split")
    p.add_argument("--split", dest="tsne_split", choices=["train", "val", "test"])
    p.add_argument("--representation", choices=["raw", "head"])
    p.add_argument("--max-points", type=int)
    p.add_argument("--perplexity", type=float)

    p = sub.add_parser("sweep", parents=[common], help="accuracy vs. shots for each method")
    p.add_argument("--shots", dest="sweep_shots", type=_csv(int))
    p.add_argument("--methods", type=_csv(str))
    p.add_argument("--per-layer", action="store_const", const=True)

    sub.add_parser("report", parents=[common], help="verify outputs and rewrite the run report")
    return parser


def _overrides(args) -> dict:
    out = parse_overrides(args.set)
    if args.seed is not None:
        out["seed"] = args.seed
    if args.threads is not None:
        out["threads"] = args.threads
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[key] = value
    return out


def _run_dir(args, seed: int) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, _overrides(args))
        run = open_run(_run_dir(args, cfg.seed), cfg, resume=args.resume, force=args.force)
        result = STAGES[args.command](run)
    except SemadcError as exc:
        print(f"semadc {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        # module-level validation errors are data problems at this point
        print(f"semadc {args.command}: {exc}", file=sys.stderr)
        return 2
    summary = result.get("stages", result) if args.command == "report" else result
    print(f"run directory: {run.root}")
    print(json.dumps(_brief(args.command, summary), indent=2, sort_keys=True))
    return 0


def _brief(command: str, section: dict) -> dict:
    """Console summary: drop bulky fields from a stage section."""
    if command == "report":
        return {name: sorted(sec.get("outputs", [])) for name, sec in section.items()}
    skip = {"trace", "history_tail", "report", "outputs", "distribution"}
    out = {k: v for k, v in section.items() if k not in skip}
    rep = section.get("report")
    if rep:
        out["accuracy"] = rep.get("accuracy")
        out["macro_f1"] = rep.get("macro_f1")
    return out


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
