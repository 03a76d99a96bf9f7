"""
PSMT — Training results: metrics log, run record and summary report

metrics.jsonl holds one JSON record per line:

    {"kind": "train", "epoch": 0, "iter": 12, "sup": .., "con": .., "cam": null,
     "beta": .., "lr": .., "total": ..}
    {"kind": "val", "epoch": 0, "iter": 32, "miou": .., "pixel_accuracy": ..}

run.json records everything needed to reconstruct an invocation: the
resolved run config, the seed, the command line and the SHA-256 of the
dataset manifest the run consumed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import pandas as pd

from src.config import METRICS_FILE

log = logging.getLogger(__name__)

RUN_RECORD_FILE = "run.json"
SUMMARY_FILE = "summary.json"


# ---------------------------------------------------------------------------
# MetricsLog: append-only JSON-lines file
# ---------------------------------------------------------------------------

class MetricsLog:
    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)

    def append(self, record: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def truncate_after(self, iteration: int) -> int:
        """Drop records past `iteration` (resume point); returns how many were dropped."""
        records = self.records()
        kept = [r for r in records if int(r.get("iter", 0)) <= iteration]
        with open(self.path, "w", encoding="utf-8") as f:
            for r in kept:
                f.write(json.dumps(r, sort_keys=True) + "\n")
        return len(records) - len(kept)

    def to_frame(self, kind: str | None = None) -> pd.DataFrame:
        df = pd.DataFrame(self.records())
        if kind is not None and not df.empty:
            df = df[df["kind"] == kind].reset_index(drop=True)
        return df

    def sha256(self) -> str:
        return hashlib.sha256(self.path.read_bytes()).hexdigest() if self.path.exists() else ""


def read_metrics(path: str | Path) -> pd.DataFrame:
    """Load a metrics file (or a run directory holding one) into a DataFrame."""
    path = Path(path)
    if path.is_dir():
        path = path / METRICS_FILE
    if not path.exists() or path.stat().st_size == 0:
        return pd.DataFrame()
    return pd.read_json(path, lines=True)


# ---------------------------------------------------------------------------
# run.json
# ---------------------------------------------------------------------------

def timestamped_run_dir(out_dir: str | Path, command: str) -> Path:
    tag = datetime.now(timezone.utc).strftime("%Y%m%d_%H%M%S_%f")
    run_dir = Path(out_dir) / f"{command}_{tag}"
    run_dir.mkdir(parents=True, exist_ok=False)
    return run_dir


def write_run_record(
    run_dir: str | Path,
    command: str,
    argv: list[str],
    config: dict | None = None,
    seed: int | None = None,
    manifest_sha256: str | None = None,
    extra: dict | None = None,
) -> Path:
    record = {
        "command": command,
        "argv": list(argv),
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "seed": seed,
        "manifest_sha256": manifest_sha256,
        "config": config,
    }
    if extra:
        record.update(extra)
    path = Path(run_dir) / RUN_RECORD_FILE
    path.write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# TrainResult: one finished training run
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    run_dir: str
    epochs: int
    iterations: int
    final_loss: dict | None = None
    val_miou: list[float] = field(default_factory=list)
    final_miou: float | None = None
    final_pixel_accuracy: float | None = None
    checkpoint: str | None = None
    metrics_sha256: str = ""

    @property
    def best_miou(self) -> float | None:
        return max(self.val_miou) if self.val_miou else None

    def summary(self) -> str:
        miou = "n/a" if self.final_miou is None else f"{self.final_miou:.4f}"
        total = "n/a"
        if self.final_loss is not None and math.isfinite(self.final_loss.get("total", math.nan)):
            total = f"{self.final_loss['total']:.4f}"
        return f"epochs={self.epochs} iterations={self.iterations} final_total={total} val_mIoU={miou}"

    def report(self) -> str:
        lines = ["=" * 60, "PSMT Training Report", "=" * 60]
        lines.append(f"  Run dir      : {self.run_dir}")
        lines.append(f"  Epochs       : {self.epochs}")
        lines.append(f"  Iterations   : {self.iterations}")
        if self.final_loss:
            lines.append(
                "  Final losses : "
                + " ".join(f"{k}={v:.4f}" for k, v in self.final_loss.items() if isinstance(v, float))
            )
        if self.val_miou:
            lines.append(f"  Val mIoU     : last={self.val_miou[-1]:.4f} best={self.best_miou:.4f}")
        if self.final_pixel_accuracy is not None:
            lines.append(f"  Pixel acc    : {self.final_pixel_accuracy:.4f}")
        lines.append(f"  Checkpoint   : {self.checkpoint}")
        lines.append(f"  Metrics hash : {self.metrics_sha256[:16]}")
        lines.append("=" * 60)
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path is not None else Path(self.run_dir) / SUMMARY_FILE
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TrainResult":
        path = Path(path)
        if path.is_dir():
            path = path / SUMMARY_FILE
        return cls(**json.loads(path.read_text(encoding="utf-8")))
