"""
PSMT — Weak / strong augmentation pairs

Weak (geometric, teacher inputs):   horizontal flip, random rescale, crop
                                    (padding with IGNORE on the mask when the
                                    rescaled image is smaller than the crop).
Strong (photometric, student only): colour jitter, random grayscale, blur,
                                    applied on top of the weak view, so teacher
                                    targets stay pixel-aligned.

Both draw from an explicit numpy Generator and return the drawn parameters,
so a draw can be replayed bit-identically with `apply_weak` / `apply_strong`.
Images are single-sample C×H×W float tensors in [0, 1]; masks are H×W int64.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from src.config import (
    NUM_CLASSES,
    STRONG_BLUR_KERNEL,
    STRONG_BLUR_PROB,
    STRONG_BLUR_SIGMA,
    STRONG_GRAYSCALE_PROB,
    STRONG_JITTER_PROB,
    STRONG_JITTER_STRENGTH,
    WEAK_FLIP_PROB,
    WEAK_SCALES,
)
from src.errors import ConfigError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Weak augmentation
# ---------------------------------------------------------------------------

@dataclass
class WeakAugSpec:
    flip_prob: float = WEAK_FLIP_PROB
    scales: tuple[float, ...] = WEAK_SCALES
    crop: int | None = None     # square crop side; None keeps the input size

    def validate(self) -> None:
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"weak_aug.flip_prob must lie in [0, 1], got {self.flip_prob}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError(f"weak_aug.scales must be positive, got {self.scales}")
        if self.crop is not None and self.crop < 1:
            raise ConfigError(f"weak_aug.crop must be positive, got {self.crop}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d


@dataclass(frozen=True)
class WeakAugParams:
    flip: bool
    scale: float
    top: int
    left: int
    crop_h: int
    crop_w: int

    @classmethod
    def identity(cls, height: int, width: int) -> "WeakAugParams":
        return cls(flip=False, scale=1.0, top=0, left=0, crop_h=height, crop_w=width)


def draw_weak_params(height: int, width: int, spec: WeakAugSpec, rng: np.random.Generator) -> WeakAugParams:
    spec.validate()
    crop_h, crop_w = (spec.crop, spec.crop) if spec.crop is not None else (height, width)
    if crop_h > height or crop_w > width:
        raise ConfigError(f"crop {crop_h}×{crop_w} is larger than the {height}×{width} image")

    flip = bool(rng.random() < spec.flip_prob)
    scale = float(rng.choice(np.asarray(spec.scales, dtype=float)))
    scaled_h, scaled_w = int(round(height * scale)), int(round(width * scale))
    top = int(rng.integers(0, max(scaled_h - crop_h, 0) + 1))
    left = int(rng.integers(0, max(scaled_w - crop_w, 0) + 1))
    return WeakAugParams(flip=flip, scale=scale, top=top, left=left, crop_h=crop_h, crop_w=crop_w)


def apply_weak(
    x: torch.Tensor,
    y: torch.Tensor | None,
    params: WeakAugParams,
    ignore_index: int,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Replay a weak draw on an image (and its mask, when given)."""
    if y is not None and tuple(y.shape) != tuple(x.shape[-2:]):
        raise ConfigError(f"mask shape {tuple(y.shape)} does not match image shape {tuple(x.shape)}")

    if params.flip:
        x = x.flip(-1)
        y = y.flip(-1) if y is not None else None

    if params.scale != 1.0:
        size = (int(round(x.shape[-2] * params.scale)), int(round(x.shape[-1] * params.scale)))
        x = F.interpolate(x[None], size=size, mode="bilinear", align_corners=False)[0]
        if y is not None:
            y = F.interpolate(y[None, None].to(torch.float64), size=size, mode="nearest")[0, 0].to(y.dtype)

    pad_h = max(params.crop_h - x.shape[-2], 0)
    pad_w = max(params.crop_w - x.shape[-1], 0)
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), value=0.0)
        if y is not None:
            y = F.pad(y, (0, pad_w, 0, pad_h), value=ignore_index)

    sl = (slice(params.top, params.top + params.crop_h), slice(params.left, params.left + params.crop_w))
    x = x[..., sl[0], sl[1]]
    y = y[sl[0], sl[1]] if y is not None else None
    return x, y


def weak_augment(
    x: torch.Tensor,
    y: torch.Tensor | None,
    rng: np.random.Generator,
    spec: WeakAugSpec | None = None,
    ignore_index: int = NUM_CLASSES,
) -> tuple[torch.Tensor, torch.Tensor | None, WeakAugParams]:
    spec = spec or WeakAugSpec()
    params = draw_weak_params(x.shape[-2], x.shape[-1], spec, rng)
    x_aug, y_aug = apply_weak(x, y, params, ignore_index)
    return x_aug, y_aug, params


# ---------------------------------------------------------------------------
# Strong augmentation
# ---------------------------------------------------------------------------

@dataclass
class StrongAugSpec:
    jitter_prob: float = STRONG_JITTER_PROB
    jitter_strength: float = STRONG_JITTER_STRENGTH
    grayscale_prob: float = STRONG_GRAYSCALE_PROB
    blur_prob: float = STRONG_BLUR_PROB
    blur_sigma_min: float = STRONG_BLUR_SIGMA[0]
    blur_sigma_max: float = STRONG_BLUR_SIGMA[1]
    blur_kernel: int = STRONG_BLUR_KERNEL

    def validate(self) -> None:
        for name in ("jitter_prob", "grayscale_prob", "blur_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"strong_aug.{name} must lie in [0, 1], got {value}")
        if not 0.0 <= self.jitter_strength < 1.0:
            raise ConfigError(f"strong_aug.jitter_strength must lie in [0, 1), got {self.jitter_strength}")
        if not 0.0 < self.blur_sigma_min <= self.blur_sigma_max:
            raise ConfigError("strong_aug blur sigma range must satisfy 0 < min <= max")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigError(f"strong_aug.blur_kernel must be a positive odd integer, got {self.blur_kernel}")

    @classmethod
    def disabled(cls) -> "StrongAugSpec":
        return cls(jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StrongAugParams:
    brightness: float | None = None
    contrast: float | None = None
    saturation: float | None = None
    grayscale: bool = False
    blur_sigma: float | None = None


def draw_strong_params(spec: StrongAugSpec, rng: np.random.Generator) -> StrongAugParams:
    spec.validate()
    s = spec.jitter_strength
    brightness = contrast = saturation = None
    if rng.random() < spec.jitter_prob:
        brightness, contrast, saturation = (float(v) for v in rng.uniform(1.0 - s, 1.0 + s, size=3))
    grayscale = bool(rng.random() < spec.grayscale_prob)
    blur_sigma = None
    if rng.random() < spec.blur_prob:
        blur_sigma = float(rng.uniform(spec.blur_sigma_min, spec.blur_sigma_max))
    return StrongAugParams(brightness, contrast, saturation, grayscale, blur_sigma)


def apply_strong(x: torch.Tensor, params: StrongAugParams, blur_kernel: int = STRONG_BLUR_KERNEL) -> torch.Tensor:
    rgb = x.shape[-3] == 3
    if params.brightness is not None:
        x = TF.adjust_brightness(x, params.brightness)
        x = TF.adjust_contrast(x, params.contrast) if rgb else x
        x = TF.adjust_saturation(x, params.saturation) if rgb else x
    if params.grayscale and rgb:
        x = TF.rgb_to_grayscale(x, num_output_channels=3)
    if params.blur_sigma is not None:
        x = TF.gaussian_blur(x, kernel_size=[blur_kernel, blur_kernel], sigma=[params.blur_sigma, params.blur_sigma])
    return x


def strong_augment(
    x: torch.Tensor,
    rng: np.random.Generator,
    spec: StrongAugSpec | None = None,
) -> tuple[torch.Tensor, StrongAugParams]:
    spec = spec or StrongAugSpec()
    params = draw_strong_params(spec, rng)
    return apply_strong(x, params, spec.blur_kernel), params


# ---------------------------------------------------------------------------
# Batch helpers (one draw per sample)
# ---------------------------------------------------------------------------

def weak_augment_batch(
    images: torch.Tensor,
    masks: torch.Tensor | None,
    rng: np.random.Generator,
    spec: WeakAugSpec,
    ignore_index: int,
) -> tuple[torch.Tensor, torch.Tensor | None, list[WeakAugParams]]:
    xs, ys, drawn = [], [], []
    for i in range(images.shape[0]):
        x, y, params = weak_augment(images[i], None if masks is None else masks[i], rng, spec, ignore_index)
        xs.append(x)
        ys.append(y)
        drawn.append(params)
    return torch.stack(xs), (torch.stack(ys) if masks is not None else None), drawn


def strong_augment_batch(images: torch.Tensor, rng: np.random.Generator, spec: StrongAugSpec) -> torch.Tensor:
    return torch.stack([strong_augment(images[i], rng, spec)[0] for i in range(images.shape[0])])
