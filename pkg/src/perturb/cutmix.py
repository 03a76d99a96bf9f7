"""
PSMT — CutMix input perturbation

    μ(x_i, x_j, m) = (1 − m) ⊙ x_i + m ⊙ x_j

"After prediction": teachers predict on the clean weak views x_i and x_j,
and the hard labels / confidences are composited with the SAME mask used on
the images, so the consistency target of the mixed image contains no
cross-image seam artifacts.  "Before prediction" (kept for comparison)
lets the teachers predict directly on μ(x_i, x_j, m).

Box sampling: area fraction U[area_min, area_max], aspect ratio (h / w)
U[aspect_min, aspect_max], clamped to the canvas with the area kept in range.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from src.config import CUTMIX_AREA, CUTMIX_ASPECT, CUTMIX_MODE
from src.errors import ConfigError
from src.teachers import EnsemblePrediction

log = logging.getLogger(__name__)

CUTMIX_MODES = ("after", "before", "off")


@dataclass
class CutMixSpec:
    mode: str = CUTMIX_MODE
    area_min: float = CUTMIX_AREA[0]
    area_max: float = CUTMIX_AREA[1]
    aspect_min: float = CUTMIX_ASPECT[0]
    aspect_max: float = CUTMIX_ASPECT[1]

    def validate(self) -> None:
        if self.mode not in CUTMIX_MODES:
            raise ConfigError(f"cutmix.mode must be one of {CUTMIX_MODES}, got {self.mode!r}")
        if not 0.0 < self.area_min <= self.area_max <= 1.0:
            raise ConfigError(
                f"cutmix area range must satisfy 0 < area_min <= area_max <= 1, "
                f"got [{self.area_min}, {self.area_max}]"
            )
        if not 0.0 < self.aspect_min <= self.aspect_max:
            raise ConfigError(
                f"cutmix aspect range must satisfy 0 < aspect_min <= aspect_max, "
                f"got [{self.aspect_min}, {self.aspect_max}]"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CutMixMask:
    """Binary H×W mask, 1 exactly inside `box` = (top, left, height, width)."""

    m: torch.Tensor
    box: tuple[int, int, int, int]

    @classmethod
    def from_box(cls, height: int, width: int, box: tuple[int, int, int, int]) -> "CutMixMask":
        top, left, bh, bw = box
        if top < 0 or left < 0 or top + bh > height or left + bw > width:
            raise ConfigError(f"cutmix box {box} does not fit a {height}×{width} canvas")
        m = torch.zeros(height, width)
        m[top:top + bh, left:left + bw] = 1.0
        return cls(m=m, box=(int(top), int(left), int(bh), int(bw)))

    @classmethod
    def empty(cls, height: int, width: int) -> "CutMixMask":
        return cls.from_box(height, width, (0, 0, 0, 0))

    @classmethod
    def full(cls, height: int, width: int) -> "CutMixMask":
        return cls.from_box(height, width, (0, 0, height, width))

    @property
    def area_fraction(self) -> float:
        _, _, bh, bw = self.box
        return bh * bw / float(self.m.shape[0] * self.m.shape[1])


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_cutmix_mask(height: int, width: int, spec: CutMixSpec, rng: np.random.Generator) -> CutMixMask:
    spec.validate()
    total = height * width
    lo_area = math.ceil(spec.area_min * total)
    hi_area = math.floor(spec.area_max * total)
    if hi_area < lo_area:
        raise ConfigError(f"cutmix area range [{spec.area_min}, {spec.area_max}] is empty on a {height}×{width} canvas")

    area = rng.uniform(spec.area_min, spec.area_max) * total
    aspect = rng.uniform(spec.aspect_min, spec.aspect_max)

    bh = int(np.clip(round(math.sqrt(area * aspect)), 1, height))
    bw = int(np.clip(round(area / bh), max(1, math.ceil(lo_area / bh)), min(width, hi_area // bh)))
    if not lo_area <= bh * bw <= hi_area:
        # width clamp broke the range: solve for the height instead
        bh = int(np.clip(math.ceil(lo_area / bw), 1, height))
    if not lo_area <= bh * bw <= hi_area:
        raise ConfigError(f"cannot fit a cutmix box with area in [{spec.area_min}, {spec.area_max}] on {height}×{width}")

    top = int(rng.integers(0, height - bh + 1))
    left = int(rng.integers(0, width - bw + 1))
    return CutMixMask.from_box(height, width, (top, left, bh, bw))


def sample_batch_masks(n: int, height: int, width: int, spec: CutMixSpec, rng: np.random.Generator) -> list[CutMixMask]:
    return [sample_cutmix_mask(height, width, spec, rng) for _ in range(n)]


def stack_masks(masks: list[CutMixMask]) -> torch.Tensor:
    return torch.stack([mask.m for mask in masks])


# ---------------------------------------------------------------------------
# Compositing
# ---------------------------------------------------------------------------

def _mask_tensor(mask: CutMixMask | torch.Tensor) -> torch.Tensor:
    return mask.m if isinstance(mask, CutMixMask) else mask


def _broadcast(m: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Reshape an H×W or N×H×W mask so it broadcasts over x's channel axis."""
    if m.shape[-2:] != x.shape[-2:]:
        raise ConfigError(f"cutmix mask shape {tuple(m.shape)} does not match input shape {tuple(x.shape)}")
    if m.dim() == 3:
        if x.shape[0] != m.shape[0]:
            raise ConfigError(f"batched cutmix mask {tuple(m.shape)} does not match input shape {tuple(x.shape)}")
        # N×H×W label maps take the mask as is; N×C×H×W tensors broadcast over C
        return m.bool() if x.dim() == 3 else m[:, None].bool()
    return m.bool()


def cutmix_combine(xi: torch.Tensor, xj: torch.Tensor, mask: CutMixMask | torch.Tensor) -> torch.Tensor:
    """Pixelwise select: x_j inside the mask, x_i elsewhere."""
    if xi.shape != xj.shape:
        raise ConfigError(f"cutmix inputs differ in shape: {tuple(xi.shape)} vs {tuple(xj.shape)}")
    return torch.where(_broadcast(_mask_tensor(mask), xi), xj, xi)


def cutmix_after_prediction(
    pred_i: EnsemblePrediction,
    pred_j: EnsemblePrediction,
    mask: CutMixMask | torch.Tensor,
) -> EnsemblePrediction:
    """Composite teacher predictions with the image mask (hard, confidence and soft)."""
    m = _mask_tensor(mask)
    if pred_i.soft.shape != pred_j.soft.shape:
        raise ConfigError(
            f"cutmix predictions differ in shape: {tuple(pred_i.soft.shape)} vs {tuple(pred_j.soft.shape)}"
        )
    conf_mask = m.bool()
    if conf_mask.shape[-2:] != pred_i.confidence.shape[-2:]:
        raise ConfigError(
            f"cutmix mask shape {tuple(m.shape)} does not match prediction shape {tuple(pred_i.soft.shape)}"
        )
    return EnsemblePrediction(
        soft=cutmix_combine(pred_i.soft, pred_j.soft, m),
        hard=cutmix_combine(pred_i.hard, pred_j.hard, m),
        confidence=torch.where(conf_mask, pred_j.confidence, pred_i.confidence),
    )
