"""
PSMT — Trainer package

Training loop, checkpoints, gradient probe, ablation matrix, charts and CLI.

Usage:
    from src.run_config import load_run_config
    from trainer.engine import run_training

    cfg = load_run_config("data/psmt_config.json")
    state, result = run_training(cfg, "runs/example")
    print(result.report())
"""

from trainer.engine import TrainEngine, run_training, train_step
from trainer.results import MetricsLog, TrainResult
from trainer.state import TrainState

__all__ = [
    "MetricsLog",
    "TrainEngine",
    "TrainResult",
    "TrainState",
    "run_training",
    "train_step",
]
