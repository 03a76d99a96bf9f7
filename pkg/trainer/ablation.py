"""
PSMT — Ablation matrix (arm × seed × labelled ratio)

Each arm is one dotted-override delta on the base RunConfig.  The built-in
arms cover the loss / T-VAT / auxiliary-teacher ablation, the supervised-only
baseline, the feature-perturbation study and the CutMix placement study:

    mt_mse          classic single-teacher mean teacher with MSE consistency
    conf_ce         + confidence-weighted CE
    conf_ce_tvat    + teacher-guided feature perturbation
    full            + auxiliary teacher (the complete method)
    supervised_only β_max = 0
    feat_original / feat_uniform / feat_vat / feat_tvat
    cutmix_before / cutmix_after

A failing run is recorded (status "failed" plus the error) and the matrix
carries on.  Results:

    runs.csv      one row per (arm, ratio, seed)
    ablation.csv  arm, ratio, n_ok, n_failed, miou_mean, miou_std, error
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from data_loader.dataset import DatasetIndex
from data_loader.partition import parse_ratio, split_partition
from src.errors import ConfigError
from src.run_config import RunConfig

log = logging.getLogger(__name__)

RUNS_FILE = "runs.csv"
ABLATION_FILE = "ablation.csv"
ABLATION_COLUMNS = ["arm", "ratio", "n_ok", "n_failed", "miou_mean", "miou_std", "error"]
RUN_COLUMNS = ["arm", "ratio", "seed", "status", "miou", "pixel_accuracy", "error", "run_dir"]
FULL_SPLIT = "full"


@dataclass(frozen=True)
class AblationArm:
    name: str
    overrides: dict = field(default_factory=dict)

    def apply(self, config: RunConfig) -> RunConfig:
        return config.with_overrides(self.overrides)


BUILTIN_ARMS: dict[str, AblationArm] = {
    arm.name: arm
    for arm in (
        AblationArm("mt_mse", {"loss.mode": "mse", "tvat.mode": "off", "teachers.aux_teacher": False}),
        AblationArm("conf_ce", {"loss.mode": "conf_ce", "tvat.mode": "off", "teachers.aux_teacher": False}),
        AblationArm("conf_ce_tvat", {"loss.mode": "conf_ce", "tvat.mode": "tvat", "teachers.aux_teacher": False}),
        AblationArm("full", {"loss.mode": "conf_ce", "tvat.mode": "tvat", "teachers.aux_teacher": True}),
        AblationArm("supervised_only", {"ramp.beta_max": 0.0}),
        AblationArm("feat_original", {"tvat.mode": "off"}),
        AblationArm("feat_uniform", {"tvat.mode": "uniform"}),
        AblationArm("feat_vat", {"tvat.mode": "vat"}),
        AblationArm("feat_tvat", {"tvat.mode": "tvat"}),
        AblationArm("cutmix_before", {"cutmix.mode": "before", "branch": "cutmix"}),
        AblationArm("cutmix_after", {"cutmix.mode": "after", "branch": "cutmix"}),
    )
}
TABLE_ARMS = ("mt_mse", "conf_ce", "conf_ce_tvat", "full")


def resolve_arms(names: Iterable[str]) -> list[AblationArm]:
    arms = []
    for name in names:
        if name not in BUILTIN_ARMS:
            raise ConfigError(f"unknown ablation arm {name!r} (known: {', '.join(BUILTIN_ARMS)})")
        arms.append(BUILTIN_ARMS[name])
    return arms


# ---------------------------------------------------------------------------
# One run (top-level so worker processes can import it)
# ---------------------------------------------------------------------------

def _run_job(job: dict) -> dict:
    from trainer.engine import run_training

    row = {
        "arm": job["arm"],
        "ratio": job["ratio"],
        "seed": job["seed"],
        "status": "ok",
        "miou": None,
        "pixel_accuracy": None,
        "error": "",
        "run_dir": job["run_dir"],
    }
    try:
        config = RunConfig.from_dict(job["config"]).validate()
        _, result = run_training(config, job["run_dir"])
        if result.final_miou is None:
            raise ConfigError("no validation split configured; cannot score the run")
        row["miou"] = result.final_miou
        row["pixel_accuracy"] = result.final_pixel_accuracy
    except Exception as exc:
        log.error("Ablation run %s ratio=%s seed=%s failed: %s", job["arm"], job["ratio"], job["seed"], exc)
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


# ---------------------------------------------------------------------------
# AblationRunner
# ---------------------------------------------------------------------------

class AblationRunner:
    """
    Runs every arm × seed (× labelled ratio) and aggregates mean ± std mIoU.

    Parameters
    ----------
    base_config : RunConfig every arm's overrides apply to
    arms        : arms in report order
    seeds       : run seeds
    out_dir     : directory receiving per-run subdirectories and the CSV files
    ratios      : labelled ratios to sweep; None trains on the configured split
    workers     : worker processes (1 = sequential in this process)
    """

    def __init__(
        self,
        base_config: RunConfig,
        arms: Sequence[AblationArm],
        seeds: Sequence[int],
        out_dir: str | Path,
        ratios: Sequence[str] | None = None,
        workers: int = 1,
    ) -> None:
        if not arms:
            raise ConfigError("ablation needs at least one arm")
        if not seeds:
            raise ConfigError("ablation needs at least one seed")
        if workers < 1:
            raise ConfigError(f"workers must be >= 1, got {workers}")
        self.base_config = base_config.validate()
        self.arms = list(arms)
        self.seeds = [int(s) for s in seeds]
        self.out_dir = Path(out_dir)
        self.ratios = [str(parse_ratio(r)) for r in ratios] if ratios else None
        self.workers = workers

    def _split_for(self, ratio: str, seed: int, full: DatasetIndex) -> str:
        split = split_partition(full, ratio, seed)
        return str(split.manifest_path())

    def jobs(self) -> list[dict]:
        full = DatasetIndex.load(self.base_config.data.split_path()) if self.ratios else None
        jobs = []
        for ratio in self.ratios or [FULL_SPLIT]:
            for seed in self.seeds:
                split = None if full is None else self._split_for(ratio, seed, full)
                for arm in self.arms:
                    config = arm.apply(self.base_config)
                    config.seed = seed
                    if split is not None:
                        config.data.split = split
                    tag = ratio.replace("/", "-")
                    jobs.append({
                        "arm": arm.name,
                        "ratio": ratio,
                        "seed": seed,
                        "config": config.validate().to_dict(),
                        "run_dir": str(self.out_dir / arm.name / f"ratio_{tag}" / f"seed_{seed}"),
                    })
        return jobs

    def run(self) -> pd.DataFrame:
        jobs = self.jobs()
        log.info(
            "Ablation: %d arms × %d seeds × %d ratios = %d runs (%d workers)",
            len(self.arms), len(self.seeds), len(self.ratios or [FULL_SPLIT]), len(jobs), self.workers,
        )
        if self.workers == 1:
            rows = [_run_job(job) for job in jobs]
        else:
            with Pool(self.workers) as pool:
                rows = pool.map(_run_job, jobs)

        runs = pd.DataFrame(rows, columns=RUN_COLUMNS)
        table = aggregate_runs(runs, [arm.name for arm in self.arms])
        self.out_dir.mkdir(parents=True, exist_ok=True)
        runs.to_csv(self.out_dir / RUNS_FILE, index=False)
        table.to_csv(self.out_dir / ABLATION_FILE, index=False)
        log.info("Ablation table → %s", self.out_dir / ABLATION_FILE)
        return table


def aggregate_runs(runs: pd.DataFrame, arm_order: Sequence[str]) -> pd.DataFrame:
    """Collapse per-run rows into one row per (arm, ratio), arms in `arm_order`."""
    rows = []
    ratios = list(dict.fromkeys(runs["ratio"])) if not runs.empty else []
    for ratio in ratios:
        for arm in arm_order:
            sub = runs[(runs["arm"] == arm) & (runs["ratio"] == ratio)]
            if sub.empty:
                continue
            ok = sub[sub["status"] == "ok"]
            scores = ok["miou"].astype(float).to_numpy()
            errors = [e for e in sub["error"] if e]
            rows.append({
                "arm": arm,
                "ratio": ratio,
                "n_ok": int(len(ok)),
                "n_failed": int(len(sub) - len(ok)),
                "miou_mean": float(np.mean(scores)) if len(scores) else float("nan"),
                "miou_std": float(np.std(scores)) if len(scores) else float("nan"),
                "error": errors[0] if errors else "",
            })
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)


def format_table(table: pd.DataFrame) -> str:
    lines = ["=" * 60, "PSMT Ablation", "=" * 60]
    for row in table.itertuples(index=False):
        score = "failed" if row.n_ok == 0 else f"{row.miou_mean:.4f} ± {row.miou_std:.4f}"
        lines.append(f"  {row.arm:<16} ratio={row.ratio:<6} mIoU={score}  (ok={row.n_ok}, failed={row.n_failed})")
    lines.append("=" * 60)
    return "\n".join(lines)
