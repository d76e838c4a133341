"""
Command line entry point: `python run_gapa.py <command> [options]`.

Commands: gen-toy, cache, induce, attach, infer, eval, sweep.
Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from .core import pipeline
from .core.config import DEFAULT_LOG_LEVEL, configure_logging
from .core.errors import ConfigError, GapaNumericalError, GapaValidationError
from .core.predictive_heads import HIDDEN_WIDTH
from .core.toy_data import ToyKind, gen_toy, load_dataset

logger = logging.getLogger("gapa.cli")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON pipeline configuration")
    p.add_argument("--network", dest="network_path", type=Path)
    p.add_argument("--train", dest="train_path", type=Path)
    p.add_argument("--test", dest="test_path", type=Path)
    p.add_argument("--ood", dest="ood_path", type=Path)
    p.add_argument("--layers", dest="gapa_layers", type=_int_list, help="comma-separated activation indices")
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--jitter", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--variant", choices=["a", "b"])
    p.add_argument("--method", choices=["kmeans++", "fps", "random"])
    p.add_argument("--index", dest="index_kind", choices=["exact", "ivf"])
    p.add_argument("--head", choices=["laplace", "mc", "noise"])
    p.add_argument("--noise-hidden", dest="noise_head_hidden", action="store_const", const=HIDDEN_WIDTH,
                   help="give the regression noise head a tanh hidden layer")
    p.add_argument("--progress", action="store_true", help="show progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gapa", description="Post-hoc GP-activation uncertainty for frozen networks")
    parser.add_argument("--log-level", default=DEFAULT_LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)

    toy = sub.add_parser("gen-toy", help="write a toy dataset, a trained backbone and a pipeline config")
    toy.add_argument("--kind", choices=[k.value for k in ToyKind], default=ToyKind.TWO_MOONS.value)
    toy.add_argument("--out-dir", type=Path, default=Path("toy"))
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("--no-backbone", action="store_true")

    for name, text in [("cache", "log pre-activations of the training set"),
                       ("induce", "build inducing sets and neighbour indexes"),
                       ("attach", "attach GAPA layers (and fit the noise head)"),
                       ("infer", "write per-sample predictions"),
                       ("eval", "score the predictions")]:
        _add_run_options(sub.add_parser(name, help=text))
    sub.choices["infer"].add_argument("--input", type=Path, help="CSV of inputs instead of the test/ood sets")

    sweep = sub.add_parser("sweep", help="rerun the pipeline over M, K or GAPA placement")
    _add_run_options(sweep)
    sweep.add_argument("--axis", choices=["M", "K", "layer_placement"], required=True)
    sweep.add_argument("--values", type=_int_list, required=True)
    sweep.add_argument("--seeds", type=_int_list)
    sweep.add_argument("--workers", type=int, default=1)
    return parser


_CONFIG_KEYS = ("network_path", "train_path", "test_path", "ood_path", "gapa_layers", "out_dir", "seed",
                "jitter", "k", "m", "variant", "method", "index_kind", "head", "noise_head_hidden")


def config_from_args(args: argparse.Namespace) -> pipeline.PipelineConfig:
    overrides: Dict[str, Any] = {key: getattr(args, key) for key in _CONFIG_KEYS
                                 if getattr(args, key, None) is not None}
    if args.config is not None:
        return pipeline.load_config(args.config, **overrides)
    if "network_path" not in overrides:
        raise ConfigError("pass --config or --network")
    return pipeline.make_config(**overrides)


def _gen_toy(args: argparse.Namespace) -> None:
    paths = gen_toy(args.kind, args.out_dir, seed=args.seed, backbone=not args.no_backbone)
    print(f"✅ Wrote {args.kind} toy data to {args.out_dir}")
    if "backbone" in paths:
        config = {"network_path": "backbone.gapanet", "train_path": "train.csv", "test_path": "test.csv",
                  "out_dir": "run", "dataset_id": f"{args.kind}-seed{args.seed}", "seed": args.seed}
        if "ood" in paths:
            config["ood_path"] = "ood.csv"
        shifted = {name: f"{name}.csv" for name in paths if name.startswith("rotated_")}
        if shifted:
            config["shift_paths"] = shifted
        if args.kind == ToyKind.GAP_REGRESSION_1D.value:
            config["head"] = "noise"
        config_path = Path(args.out_dir) / "pipeline.json"
        config_path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
        print(f"   - Pipeline config: {config_path}")


def run(args: argparse.Namespace) -> None:
    if args.command == "gen-toy":
        _gen_toy(args)
        return
    config = config_from_args(args)
    if args.command == "cache":
        caches = pipeline.cmd_cache(config, progress=args.progress)
        for layer, cache in caches.items():
            print(f"   - layer {layer}: {cache.rows} rows x {cache.width} -> {cache.path}")
    elif args.command == "induce":
        for layer, (ind, index) in pipeline.cmd_induce(config).items():
            print(f"   - layer {layer}: M={ind.M}, lengthscale={ind.params.lengthscale:.4g}, index={index.kind.value}")
    elif args.command == "attach":
        gnet = pipeline.cmd_attach(config)
        print(f"   - attached GAPA at layers {sorted(gnet.layers)}")
    elif args.command == "infer":
        inputs = load_dataset(args.input)[0] if args.input is not None else None
        records = pipeline.cmd_infer(config, inputs, progress=args.progress)
        print(f"   - {len(records)} predictions -> {Path(config.out_dir) / pipeline.PREDICTIONS}")
    elif args.command == "eval":
        report = pipeline.cmd_eval(config)
        print(json.dumps({k: v for k, v in report.items() if k != "seeds"}, indent=2, sort_keys=True))
    elif args.command == "sweep":
        out = pipeline.cmd_sweep(config, args.axis, args.values, seeds=args.seeds,
                                 workers=args.workers, progress=args.progress)
        print(f"   - sweep results -> {out}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        run(args)
    except GapaValidationError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except GapaNumericalError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        print(f"❌ numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
