"""
PSMT — Command-line interface

Subcommands:

    generate   write the synthetic shapes dataset (splits/full.json, splits/val.json)
    split      seeded labelled/unlabelled partition of a fully labelled manifest
    train      train student + teachers (optionally --resume <checkpoint>)
    eval       teacher-ensemble mIoU of a checkpoint on a split (optional sliding window)
    ablate     arm × seed (× labelled ratio) matrix → ablation.csv
    plot       static charts from run dirs, metrics files, grad probes, ablation tables

Examples:
    python psmt.py generate --n-train 256 --n-val 64
    python psmt.py split --ratio 1/8
    python psmt.py train --config data/psmt_config.json --set optim.epochs=10
    python psmt.py eval --ckpt runs/train_<ts>/checkpoints/last.pt --sliding 32x32:16x16
    python psmt.py ablate --arms mt_mse,conf_ce,conf_ce_tvat,full --seeds 0,1,2
    python psmt.py plot runs/train_<ts> runs/ablate_<ts>/ablation.csv

Every invocation writes <out>/<command>_<timestamp>/run.json.  Failures print
one stderr line `psmt-error <kind> <message>`; exit code 2 for configuration
and usage errors, 1 for runtime errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from data_loader.dataset import DatasetIndex, file_sha256
from data_loader.partition import split_partition
from data_loader.synthetic import SyntheticSpec, generate_dataset
from src.config import DEFAULT_CONFIG_PATH, SYNTH_TRAIN_SIZE, SYNTH_VAL_SIZE
from src.errors import ConfigError, DataError, NonFiniteError, TrainingAborted
from src.evaluation import evaluate_split, parse_sliding
from src.run_config import RunConfig, load_run_config, save_run_config
from trainer.ablation import TABLE_ARMS, AblationRunner, format_table, resolve_arms
from trainer.plots import plot_inputs
from trainer.results import timestamped_run_dir, write_run_record

log = logging.getLogger("psmt")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors also emit the machine-parsable error line."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        sys.stderr.write(f"psmt-error usage {message}\n")
        raise SystemExit(EXIT_USAGE)


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None,
                        help=f"Run-config JSON (e.g. {DEFAULT_CONFIG_PATH}); defaults when omitted")
    common.add_argument("--seed", type=int, default=None, help="Override the run seed")
    common.add_argument("--out", type=str, default=None, help="Output root (default: run.out_dir)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Dotted config override, repeatable (e.g. --set tvat.epsilon=1.0)")
    common.add_argument("-v", "--verbose", action="store_true", help="DEBUG logging")

    parser = _Parser(prog="psmt", description="PSMT semi-supervised segmentation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="Write the synthetic dataset")
    p.add_argument("--root", type=str, default=None, help="Dataset root (default: data.root)")
    p.add_argument("--n-train", type=int, default=SYNTH_TRAIN_SIZE)
    p.add_argument("--n-val", type=int, default=SYNTH_VAL_SIZE)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)

    p = sub.add_parser("split", parents=[common], help="Labelled/unlabelled partition")
    p.add_argument("--ratio", type=str, required=True, help="Labelled fraction, e.g. 1/8 or 0.25")
    p.add_argument("--full", type=str, default=None, help="Fully labelled manifest (default: data.split)")
    p.add_argument("--name", type=str, default=None, help="Split name (default: ratio_<r>_seed<s>)")

    p = sub.add_parser("train", parents=[common], help="Train student and teachers")
    p.add_argument("--resume", type=str, default=None, help="Checkpoint to resume from")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--split", type=str, default=None, help="Manifest to score (default: the run's val split)")
    p.add_argument("--sliding", type=str, default=None, help="Sliding window HxW:SHxSW")
    p.add_argument("--batch-size", type=int, default=16)

    p = sub.add_parser("ablate", parents=[common], help="Ablation matrix")
    p.add_argument("--arms", type=_csv, default=list(TABLE_ARMS), help="Comma-separated arm names")
    p.add_argument("--seeds", type=_csv, default=["0", "1", "2"], help="Comma-separated seeds")
    p.add_argument("--ratios", type=_csv, default=None, help="Comma-separated labelled ratios")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("plot", parents=[common], help="Static charts")
    p.add_argument("inputs", nargs="+", help="Run dirs, metrics.jsonl, grad_probe.json or ablation.csv")

    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config, overrides=args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _manifest_sha(path: Path | None) -> str | None:
    return file_sha256(path) if path is not None and path.exists() else None


def cmd_generate(args, cfg: RunConfig, run_dir: Path) -> dict:
    spec = SyntheticSpec(seed=cfg.seed)
    if args.height is not None:
        spec.height = args.height
    if args.width is not None:
        spec.width = args.width
    if args.noise is not None:
        spec.noise = args.noise
    root = Path(args.root or cfg.data.root)
    train, val = generate_dataset(spec, root, n_train=args.n_train, n_val=args.n_val)
    print(f"generated {len(train)} train / {0 if val is None else len(val)} val images in {root}")
    return {"manifest_sha256": _manifest_sha(train.manifest_path()), "synthetic": spec.to_dict(), "root": str(root)}


def cmd_split(args, cfg: RunConfig, run_dir: Path) -> dict:
    full_path = Path(args.full) if args.full else cfg.data.split_path()
    full = DatasetIndex.load(full_path)
    split = split_partition(full, args.ratio, cfg.seed, name=args.name)
    path = split.manifest_path()
    print(f"split {split.name}: {len(split.labelled)} labelled / {len(split.unlabelled)} unlabelled → {path}")
    return {"manifest_sha256": _manifest_sha(full_path), "split": str(path)}


def cmd_train(args, cfg: RunConfig, run_dir: Path) -> dict:
    from trainer.engine import run_training
    from trainer.state import read_checkpoint

    train_dir = run_dir
    if args.resume:
        ckpt = read_checkpoint(args.resume)
        cfg = RunConfig.from_dict(ckpt["config"]).with_overrides(args.overrides)
        if args.seed is not None:
            cfg.seed = args.seed
        train_dir = Path(args.resume).resolve().parent.parent
    save_run_config(cfg, run_dir / "config.json")
    _, result = run_training(cfg, train_dir, resume=args.resume)
    print("\n" + result.report())
    return {
        "manifest_sha256": _manifest_sha(cfg.data.split_path()),
        "train_dir": str(train_dir),
        "resumed_from": args.resume,
        "result": result.to_dict(),
        "config": cfg.to_dict(),
    }


def cmd_eval(args, cfg: RunConfig, run_dir: Path) -> dict:
    from trainer.state import teachers_from_checkpoint

    pair, ckpt_cfg = teachers_from_checkpoint(args.ckpt)
    split_path = Path(args.split) if args.split else ckpt_cfg.data.val_split_path()
    if split_path is None:
        raise ConfigError("no split given and the checkpoint's run has no validation split")
    index = DatasetIndex.load(split_path)
    sliding = parse_sliding(args.sliding) if args.sliding else None
    crop = ckpt_cfg.perturb.weak_aug.crop
    input_size = (crop, crop) if crop is not None else None
    result = evaluate_split(pair, index, batch_size=args.batch_size, sliding=sliding, input_size=input_size)
    csv = result.to_csv(run_dir / "per_class_iou.csv")
    print(f"eval {index.name}: {result.summary()} → {csv}")
    return {"manifest_sha256": _manifest_sha(split_path), "checkpoint": args.ckpt, "result": result.to_dict()}


def cmd_ablate(args, cfg: RunConfig, run_dir: Path) -> dict:
    try:
        seeds = [int(s) for s in args.seeds]
    except ValueError as exc:
        raise ConfigError(f"seeds must be integers, got {args.seeds}") from exc
    runner = AblationRunner(cfg, resolve_arms(args.arms), seeds, run_dir, ratios=args.ratios, workers=args.workers)
    table = runner.run()
    print("\n" + format_table(table))
    return {"manifest_sha256": _manifest_sha(cfg.data.split_path()), "arms": list(args.arms), "seeds": seeds}


def cmd_plot(args, cfg: RunConfig, run_dir: Path) -> dict:
    written = plot_inputs(args.inputs, run_dir)
    for path in written:
        print(path)
    return {"inputs": list(args.inputs), "outputs": [str(p) for p in written]}


COMMANDS = {
    "generate": cmd_generate,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _error_line(kind: str, exc: BaseException) -> str:
    message = " ".join(str(exc).split())
    return f"psmt-error {kind} {message}"


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)-8s %(name)s — %(message)s",
        datefmt="%H:%M:%S",
    )

    try:
        cfg = _config(args)
        run_dir = timestamped_run_dir(args.out or cfg.run.out_dir, args.command)
        log.info("%s → %s", args.command, run_dir)
        extra = COMMANDS[args.command](args, cfg, run_dir)
        resolved = extra.pop("config", cfg.to_dict())
        write_run_record(
            run_dir,
            command=args.command,
            argv=argv,
            config=resolved,
            seed=resolved["seed"],
            manifest_sha256=extra.pop("manifest_sha256", None),
            extra=extra,
        )
    except ConfigError as exc:
        sys.stderr.write(_error_line("config", exc) + "\n")
        return EXIT_USAGE
    except DataError as exc:
        sys.stderr.write(_error_line("data", exc) + "\n")
        return EXIT_RUNTIME
    except TrainingAborted as exc:
        sys.stderr.write(_error_line("aborted", exc) + "\n")
        return EXIT_RUNTIME
    except NonFiniteError as exc:
        sys.stderr.write(_error_line("nonfinite", exc) + "\n")
        return EXIT_RUNTIME
    except (OSError, RuntimeError) as exc:
        sys.stderr.write(_error_line("runtime", exc) + "\n")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
