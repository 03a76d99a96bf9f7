"""
PSMT — Training objectives and the β ramp-up

  total   = ℓ_sup + β(t)·ℓ_con  (+ w_cam·ℓ_cam when enabled)
  ℓ_sup   = mean over non-IGNORE labelled pixels of CE(y, p)
  ℓ_con   = Conf-CE: mean over ALL pixels of c·CE(ỹ, p)        (default)
            or MSE between student and teacher soft maps       (MT baseline)
  ℓ_cam   = mean over all pixels of (1 − c)·CE(ȳ, p)          (ȳ external)
  β(t)    = β_max · exp(−5 (1 − t/T)²) for t < T, else β_max

Every consistency target is detached: no gradient reaches the teachers.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from src.config import BETA_MAX, CAM_WEIGHT, RAMP_EPOCHS, RAMP_UNIT
from src.errors import ConfigError
from src.teachers import EnsemblePrediction

log = logging.getLogger(__name__)

# Degenerate-but-legal evaluations, by kind (e.g. "all_ignore")
warning_counts: Counter[str] = Counter()

LOSS_MODES = ("conf_ce", "mse")
RAMP_UNITS = ("epoch", "iter")
_PROB_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Ramp-up schedule
# ---------------------------------------------------------------------------

@dataclass
class RampSchedule:
    beta_max: float = BETA_MAX
    ramp_epochs: int = RAMP_EPOCHS
    unit: str = RAMP_UNIT      # what t counts: epochs or iterations

    def validate(self) -> None:
        if self.beta_max < 0 or not math.isfinite(self.beta_max):
            raise ConfigError(f"ramp.beta_max must be finite and >= 0, got {self.beta_max}")
        if int(self.ramp_epochs) < 0:
            raise ConfigError(f"ramp.ramp_epochs must be >= 0, got {self.ramp_epochs}")
        if self.unit not in RAMP_UNITS:
            raise ConfigError(f"ramp.unit must be one of {RAMP_UNITS}, got {self.unit!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def beta_at(schedule: RampSchedule, epoch: float) -> float:
    if epoch < 0:
        raise ConfigError(f"ramp position must be >= 0, got {epoch}")
    if schedule.ramp_epochs <= 0 or epoch >= schedule.ramp_epochs:
        return float(schedule.beta_max)
    phase = 1.0 - epoch / schedule.ramp_epochs
    return float(schedule.beta_max * math.exp(-5.0 * phase * phase))


# ---------------------------------------------------------------------------
# Loss report
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    sup: float
    con: float
    beta_t: float
    cam: float | None = None
    cam_weight: float = CAM_WEIGHT

    @property
    def total(self) -> float:
        total = self.sup + self.beta_t * self.con
        if self.cam is not None:
            total += self.cam_weight * self.cam
        return total

    def is_finite(self) -> bool:
        values = [self.sup, self.con, self.beta_t] + ([self.cam] if self.cam is not None else [])
        return all(math.isfinite(v) for v in values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


# ---------------------------------------------------------------------------
# Pixel CE helpers
# ---------------------------------------------------------------------------

def _log_probs(probs: torch.Tensor) -> torch.Tensor:
    return torch.log(probs.clamp_min(_PROB_FLOOR))


def pixel_ce(probs: torch.Tensor, labels: torch.Tensor, ignore_index: int | None = None) -> torch.Tensor:
    """Per-pixel CE (N×H×W) of class-index `labels` under `probs`; IGNORE pixels give 0."""
    if probs.dim() != 4 or labels.shape != probs.shape[:1] + probs.shape[2:]:
        raise ConfigError(
            f"label shape {tuple(labels.shape)} does not match probability shape {tuple(probs.shape)}"
        )
    ignore = probs.shape[1] if ignore_index is None else ignore_index
    valid = labels != ignore
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    nll = -_log_probs(probs).gather(1, safe.unsqueeze(1)).squeeze(1)
    return nll * valid.to(nll.dtype)


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

def supervised_loss(pred: torch.Tensor, y: torch.Tensor, ignore_index: int | None = None) -> torch.Tensor:
    """Mean pixel CE over non-IGNORE pixels (0 with a warning when all are IGNORE)."""
    ignore = pred.shape[1] if ignore_index is None else ignore_index
    valid = y != ignore
    n_valid = int(valid.sum())
    ce = pixel_ce(pred, y, ignore)
    if n_valid == 0:
        warning_counts["all_ignore"] += 1
        log.warning("Labelled batch is entirely IGNORE — supervised loss defined as 0")
        return ce.sum() * 0.0
    return ce.sum() / n_valid


def conf_ce_loss(student_pred: torch.Tensor, target: EnsemblePrediction) -> torch.Tensor:
    """Mean over all pixels of c(ω)·CE(ỹ(ω), p(ω))."""
    if student_pred.shape != target.hard.shape:
        raise ConfigError(
            f"student prediction shape {tuple(student_pred.shape)} does not match "
            f"teacher target shape {tuple(target.hard.shape)}"
        )
    ce = -(target.hard.detach() * _log_probs(student_pred)).sum(dim=1)
    return (target.confidence.detach() * ce).mean()


def mse_consistency_loss(student_pred: torch.Tensor, target_soft: torch.Tensor) -> torch.Tensor:
    if student_pred.shape != target_soft.shape:
        raise ConfigError(
            f"student prediction shape {tuple(student_pred.shape)} does not match "
            f"teacher target shape {tuple(target_soft.shape)}"
        )
    return F.mse_loss(student_pred, target_soft.detach())


def consistency_loss(mode: str, student_pred: torch.Tensor, target: EnsemblePrediction) -> torch.Tensor:
    if mode == "conf_ce":
        return conf_ce_loss(student_pred, target)
    if mode == "mse":
        return mse_consistency_loss(student_pred, target.soft)
    raise ConfigError(f"loss.mode must be one of {LOSS_MODES}, got {mode!r}")


def cam_loss(
    student_pred: torch.Tensor,
    pseudo: torch.Tensor,
    conf: torch.Tensor,
    ignore_index: int | None = None,
) -> torch.Tensor:
    """Mean over all pixels of (1 − c(ω))·CE(ȳ(ω), p(ω)) for external pseudo-labels ȳ."""
    if conf.shape != pseudo.shape:
        raise ConfigError(f"confidence shape {tuple(conf.shape)} does not match pseudo-label shape {tuple(pseudo.shape)}")
    ce = pixel_ce(student_pred, pseudo, ignore_index)
    return ((1.0 - conf.detach()) * ce).mean()
