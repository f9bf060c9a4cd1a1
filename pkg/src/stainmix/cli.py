"""Command-line entry point: ``stainmix {make-toy,train,translate,evaluate}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .dataset import DatasetError, make_toy_dataset
from .metrics import ExtractorUnavailable, MetricConfig, PairMismatch
from .networks import CheckpointFormatError
from .objectives import NonFiniteLoss
from .trainer import (
    ConfigError,
    TrainConfig,
    checkpoint_train_config,
    describe_objective,
    evaluate,
    read_config_file,
    train,
    translate,
)

log = logging.getLogger("stainmix")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    seed: int | None
    config: dict[str, Any] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    objective: dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))


def cmd_make_toy(args) -> int:
    make_toy_dataset(args.out, args.n, args.size, args.seed)
    RunManifest(
        "make-toy", args.seed, {"n": args.n, "size": args.size},
        {"dataset": str(Path(args.out).resolve())},
    ).write(Path(args.out) / "manifest.json")
    print(f"wrote {args.n} toy pairs to {args.out}")
    return 0


def resolve_train_config(args) -> TrainConfig:
    cfg = TrainConfig.desk() if args.preset == "desk" else TrainConfig()
    values: dict[str, Any] = {}
    if args.config:
        values.update(read_config_file(args.config))
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value.strip()
    # explicit flags take precedence over the config file and --set
    if args.loss_variant:
        values["loss_variant"] = {"mix": "MIX_DOMAIN", "nce": "PATCH_NCE"}[args.loss_variant]
    if args.no_gt_branch:
        values["use_gt_branch"] = "false"
    if args.epochs is not None:
        values["epochs"] = str(args.epochs)
        if "decay_start" not in values:
            # keep the published 30/40 proportion when only the length changes
            values["decay_start"] = str(max(1, round(args.epochs * 0.75)))
    if args.max_iterations is not None:
        values["max_iterations"] = str(args.max_iterations)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    try:
        return cfg.updated(values)
    except ConfigError as exc:
        if "unknown config key" in str(exc):
            raise UsageError(str(exc)) from exc
        raise


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    out = Path(args.out)
    result = train(cfg, args.data, out, resume=args.resume)
    manifest = RunManifest(
        "train", cfg.seed, cfg.to_dict(),
        {
            "data": str(Path(args.data).resolve()),
            "trace": str(result.trace_path.resolve()),
            "checkpoints": ",".join(str(p.resolve()) for p in result.checkpoints),
            "final_checkpoint": str(result.checkpoint.resolve()) if result.checkpoint else "",
            "resumed_from": str(args.resume or ""),
        },
        describe_objective(cfg),
    )
    manifest.write(out / "manifest.json")
    print(f"trained {result.state.iteration} iterations; checkpoint {result.checkpoint}")
    return 0


def cmd_translate(args) -> int:
    n = translate(args.checkpoint, args.input, args.out, crop=args.crop)
    cfg = checkpoint_train_config(args.checkpoint)
    RunManifest(
        "translate", cfg.get("seed"), {"crop": args.crop, "train_config": cfg},
        {"checkpoint": str(Path(args.checkpoint).resolve()), "input": str(Path(args.input).resolve()),
         "output": str(Path(args.out).resolve())},
    ).write(Path(args.out).parent / f"{Path(args.out).name}.manifest.json")
    print(f"translated {n} images into {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    mcfg = MetricConfig(extractor_id=args.extractor, phv_threshold=args.threshold,
                        kid_n_subsets=args.kid_subsets, seed=args.seed)
    report = evaluate(args.generated, args.gt, mcfg)
    report_path = report.save(args.report)
    RunManifest(
        "evaluate", args.seed, asdict(mcfg),
        {"generated": str(Path(args.generated).resolve()), "gt": str(Path(args.gt).resolve()),
         "report": str(report_path.resolve())},
    ).write(report_path.with_name(report_path.name + ".manifest.json"))
    print(report.summary())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stainmix", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="write a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("train", help="train a translation model")
    p.add_argument("--data", required=True, help="dataset root containing train/HE and train/IHC")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", choices=("desk", "full"), default="desk")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--loss-variant", choices=("mix", "nce"))
    p.add_argument("--no-gt-branch", action="store_true", help="drop the ground-truth contrastive term")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate a directory of H&E images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop", type=int, help="tile size (default: training crop)")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="FID / KID / PHV between two image directories")
    p.add_argument("--generated", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--extractor", default="tiny-cnn")
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--kid-subsets", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 2 on bad usage, 0 for --help/--version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"stainmix: error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLoss as exc:
        print(f"stainmix: training diverged: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, DatasetError, CheckpointFormatError, PairMismatch,
            ExtractorUnavailable, ConfigError) as exc:
        print(f"stainmix: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
