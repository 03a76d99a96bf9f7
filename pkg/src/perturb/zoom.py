"""
PSMT — Zoom In/Out consistency

    ℓ( ζ(ỹ, s), p_θs(ζ(x, s)) )

Images are resampled bilinearly; hard labels and confidences are resampled
with nearest-neighbour so each confidence stays paired with its label and
the {0} ∪ (τ, 1] confidence invariant survives resampling.  The soft map is
resampled nearest-neighbour too so its argmax stays the hard label.

Output sizes round s·H and s·W to a multiple of the model downsample factor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from src.config import MIN_IMAGE_SIDE, ZOOM_SCALES
from src.errors import ConfigError
from src.teachers import EnsemblePrediction

log = logging.getLogger(__name__)


@dataclass
class ZoomConfig:
    """Run-config section: the scale set zoom draws from."""

    scales: tuple[float, ...] = ZOOM_SCALES

    def validate(self) -> None:
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError(f"zoom.scales must be a non-empty set of positive scales, got {self.scales}")

    def draw(self, rng: np.random.Generator, multiple: int = 1) -> "ZoomSpec":
        self.validate()
        return ZoomSpec(scale=float(rng.choice(np.asarray(self.scales, dtype=float))), multiple=multiple)

    def to_dict(self) -> dict:
        return {"scales": list(self.scales)}


@dataclass(frozen=True)
class ZoomSpec:
    scale: float
    multiple: int = field(default=1)

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        if self.scale <= 0:
            raise ConfigError(f"zoom scale must be positive, got {self.scale}")
        m = max(1, int(self.multiple))
        out_h = int(round(self.scale * height / m)) * m
        out_w = int(round(self.scale * width / m)) * m
        if out_h < MIN_IMAGE_SIDE or out_w < MIN_IMAGE_SIDE:
            raise ConfigError(
                f"zoom scale {self.scale} maps {height}×{width} to a degenerate {out_h}×{out_w} "
                f"(minimum side {MIN_IMAGE_SIDE})"
            )
        return out_h, out_w

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0


def zoom_images(x: torch.Tensor, spec: ZoomSpec) -> torch.Tensor:
    """Bilinear zoom of an N×C×H×W batch."""
    size = spec.output_size(x.shape[-2], x.shape[-1])
    if size == tuple(x.shape[-2:]):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def zoom_nearest(t: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour resample of N×H×W or N×C×H×W tensors (any dtype)."""
    if tuple(t.shape[-2:]) == tuple(size):
        return t
    squeeze = t.dim() == 3
    src = t[:, None] if squeeze else t
    out = F.interpolate(src.to(torch.float64), size=size, mode="nearest").to(t.dtype)
    return out[:, 0] if squeeze else out


def zoom_labels(y: torch.Tensor, spec: ZoomSpec) -> torch.Tensor:
    return zoom_nearest(y, spec.output_size(y.shape[-2], y.shape[-1]))


def zoom_consistency_targets(pred: EnsemblePrediction, spec: ZoomSpec) -> EnsemblePrediction:
    """ζ(ỹ, s) and the paired confidence map (s = 1 returns `pred` unchanged)."""
    if spec.is_identity:
        return pred
    h, w = pred.spatial_size
    size = spec.output_size(h, w)
    return EnsemblePrediction(
        soft=zoom_nearest(pred.soft, size),
        hard=zoom_nearest(pred.hard, size),
        confidence=zoom_nearest(pred.confidence, size),
    )
