"""
PSMT — Mean-teacher pair (auxiliary-teacher ensemble)

Two EMA snapshots of the student predict jointly by averaging logits:

    ŷ = softmax( mean_k f_{θ^{tk}}(x) )
    ỹ = one-hot argmax ŷ            (lowest class index wins ties)
    c = ỹᵀŷ · 𝟙[ỹᵀŷ > τ]

Only the teacher under the cursor receives EMA updates; the cursor flips once
per epoch boundary, after the epoch's last EMA.  With the auxiliary teacher
disabled the pair collapses to classic single-teacher MT (t1 only).

Teachers run in eval mode and never require gradients.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from src.config import AUX_TEACHER, EMA_GAMMA, GAMMA_RAMP
from src.errors import ConfigError
from src.model import SegModel

log = logging.getLogger(__name__)

CURSORS = ("t1", "t2")


# ---------------------------------------------------------------------------
# Ensemble prediction
# ---------------------------------------------------------------------------

@dataclass
class EnsemblePrediction:
    """Everything the consistency loss consumes from the teachers (NCHW)."""

    soft: torch.Tensor         # N×Y×H×W, rows sum to 1
    hard: torch.Tensor         # N×Y×H×W one-hot (same dtype as soft)
    confidence: torch.Tensor   # N×H×W, values in {0} ∪ (τ, 1]

    @property
    def labels(self) -> torch.Tensor:
        """Hard labels as class indices (N×H×W int64)."""
        return self.hard.argmax(dim=1)

    @property
    def spatial_size(self) -> tuple[int, int]:
        return int(self.soft.shape[-2]), int(self.soft.shape[-1])

    def detach(self) -> "EnsemblePrediction":
        return EnsemblePrediction(self.soft.detach(), self.hard.detach(), self.confidence.detach())

    def roll(self, shifts: int = 1) -> "EnsemblePrediction":
        """Batch-rolled copy (partner predictions for in-batch mixing)."""
        return EnsemblePrediction(
            self.soft.roll(shifts, dims=0),
            self.hard.roll(shifts, dims=0),
            self.confidence.roll(shifts, dims=0),
        )


def prediction_from_soft(soft: torch.Tensor, tau: float) -> EnsemblePrediction:
    """Derive hard labels and the gated confidence map from a soft map."""
    if not 0.0 <= tau < 1.0:
        raise ConfigError(f"teachers.tau must lie in [0, 1), got {tau}")
    num_classes = soft.shape[1]
    # torch.argmax returns the first maximal index
    labels = soft.argmax(dim=1)
    hard = F.one_hot(labels, num_classes).permute(0, 3, 1, 2).to(soft.dtype)
    top = (hard * soft).sum(dim=1)
    confidence = torch.where(top > tau, top, torch.zeros_like(top))
    return EnsemblePrediction(soft=soft, hard=hard, confidence=confidence)


def ensemble_from_logits(logits: list[torch.Tensor] | tuple[torch.Tensor, ...], tau: float) -> EnsemblePrediction:
    mean = torch.stack(tuple(logits)).mean(dim=0)
    return prediction_from_soft(torch.softmax(mean, dim=1), tau)


# ---------------------------------------------------------------------------
# TeacherPair
# ---------------------------------------------------------------------------

def _freeze(model: SegModel) -> SegModel:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


class TeacherPair:
    """
    Two EMA teachers with an alternating update cursor.

    Mutating methods (`ema_update`, `advance_epoch`) update in place and
    return `self` so call sites can chain them.
    """

    def __init__(
        self,
        t1: SegModel,
        t2: SegModel,
        gamma: float = EMA_GAMMA,
        cursor: str = "t1",
        aux_teacher: bool = AUX_TEACHER,
        gamma_ramp: bool = GAMMA_RAMP,
    ) -> None:
        if t1.arch != t2.arch:
            raise ConfigError(f"teacher architectures differ: {t1.arch} vs {t2.arch}")
        if cursor not in CURSORS:
            raise ConfigError(f"ema cursor must be one of {CURSORS}, got {cursor!r}")
        _check_gamma(gamma)
        self.t1 = _freeze(t1)
        self.t2 = _freeze(t2)
        self.gamma = float(gamma)
        self.cursor = cursor
        self.aux_teacher = bool(aux_teacher)
        self.gamma_ramp = bool(gamma_ramp)
        self.ema_steps = 0

    @classmethod
    def from_student(
        cls,
        student: SegModel,
        gamma: float = EMA_GAMMA,
        aux_teacher: bool = AUX_TEACHER,
        gamma_ramp: bool = GAMMA_RAMP,
    ) -> "TeacherPair":
        """Both teachers cloned from the student (epoch-0 initialisation)."""
        return cls(
            copy.deepcopy(student),
            copy.deepcopy(student),
            gamma=gamma,
            aux_teacher=aux_teacher,
            gamma_ramp=gamma_ramp,
        )

    # ------------------------------------------------------------------
    # Accessors
    # ------------------------------------------------------------------

    @property
    def arch(self):
        return self.t1.arch

    @property
    def members(self) -> tuple[SegModel, ...]:
        """Teachers that take part in the ensemble."""
        return (self.t1, self.t2) if self.aux_teacher else (self.t1,)

    @property
    def active(self) -> SegModel:
        """Teacher that the next EMA update will modify."""
        if not self.aux_teacher:
            return self.t1
        return self.t1 if self.cursor == "t1" else self.t2

    def effective_gamma(self) -> float:
        if not self.gamma_ramp:
            return self.gamma
        return min(self.gamma, 1.0 - 1.0 / (self.ema_steps + 1))

    def parameters(self):
        for teacher in (self.t1, self.t2):
            yield from teacher.parameters()

    # ------------------------------------------------------------------
    # Prediction
    # ------------------------------------------------------------------

    def logits(self, x: torch.Tensor) -> list[torch.Tensor]:
        with torch.no_grad():
            return [t(x) for t in self.members]

    def predict(self, x: torch.Tensor, tau: float) -> EnsemblePrediction:
        return ensemble_from_logits(self.logits(x), tau)

    def decode_mean(self, z: torch.Tensor) -> torch.Tensor:
        """Mean teacher-decoded logits of features `z`; differentiable w.r.t. `z`."""
        return torch.stack([t.decode(z) for t in self.members]).mean(dim=0)

    # ------------------------------------------------------------------
    # Mutation
    # ------------------------------------------------------------------

    def ema_update(self, student: SegModel) -> "TeacherPair":
        _check_gamma(self.gamma)
        if student.arch != self.arch:
            raise ConfigError(f"student architecture {student.arch} does not match teachers {self.arch}")
        gamma = self.effective_gamma()
        target = self.active
        with torch.no_grad():
            for pt, ps in zip(target.parameters(), student.parameters()):
                pt.mul_(gamma).add_(ps.detach(), alpha=1.0 - gamma)
            for bt, bs in zip(target.buffers(), student.buffers()):
                if bt.dtype.is_floating_point:
                    bt.mul_(gamma).add_(bs, alpha=1.0 - gamma)
                else:
                    bt.copy_(bs)
        self.ema_steps += 1
        return self

    def advance_epoch(self) -> "TeacherPair":
        self.cursor = "t2" if self.cursor == "t1" else "t1"
        log.debug("EMA cursor → %s", self.cursor)
        return self

    # ------------------------------------------------------------------
    # Serialisation
    # ------------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "teacher1": self.t1.state_dict(),
            "teacher2": self.t2.state_dict(),
            "ema_cursor": self.cursor,
            "ema_steps": self.ema_steps,
        }

    def load_state_dict(self, state: dict) -> None:
        self.t1.load_state_dict(state["teacher1"])
        self.t2.load_state_dict(state["teacher2"])
        self.cursor = state["ema_cursor"]
        self.ema_steps = int(state.get("ema_steps", 0))


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"teachers.gamma must lie in (0, 1), got {gamma}")


# ---------------------------------------------------------------------------
# Functional surface
# ---------------------------------------------------------------------------

def ensemble_predict(pair: TeacherPair, x: torch.Tensor, tau: float) -> EnsemblePrediction:
    return pair.predict(x, tau)


def ema_update(pair: TeacherPair, student: SegModel) -> TeacherPair:
    return pair.ema_update(student)


def advance_epoch(pair: TeacherPair) -> TeacherPair:
    return pair.advance_epoch()
