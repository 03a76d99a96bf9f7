"""
PSMT — Segmentation network f = g ∘ h (toy encoder–decoder)

The student and both teachers share one architecture:

  encoder h : N×C×H×W  →  N×Z×H'×W'     (strided 3×3 conv stages + ReLU,
                                          H' = H / downsample_factor)
  decoder g : N×Z×H'×W' → N×Y×H×W       (1×1 projection, bilinear upsample)

Pixel-wise probabilities are softmax(g(h(x))) over the class axis.

Shape rules are enforced on every call so that a bad crop or a mismatched
checkpoint fails loudly with both shapes in the message (ConfigError).
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from src.config import (
    BATCH_NORM,
    ENCODER_STRIDES,
    ENCODER_WIDTHS,
    IN_CHANNELS,
    INIT_SEED,
    MIN_IMAGE_SIDE,
    NUM_CLASSES,
)
from src.errors import ConfigError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Architecture descriptor
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchDescriptor:
    """Structural description shared by student and teachers."""

    in_channels: int = IN_CHANNELS
    num_classes: int = NUM_CLASSES
    widths: tuple[int, ...] = ENCODER_WIDTHS
    strides: tuple[int, ...] = ENCODER_STRIDES
    batch_norm: bool = BATCH_NORM
    init_seed: int = INIT_SEED

    def __post_init__(self) -> None:
        if len(self.widths) == 0 or len(self.widths) != len(self.strides):
            raise ConfigError(
                f"model.widths {self.widths} and model.strides {self.strides} "
                "must be non-empty and of equal length"
            )
        if any(w < 1 for w in self.widths) or any(s < 1 for s in self.strides):
            raise ConfigError("model.widths and model.strides must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"model.num_classes must be >= 2, got {self.num_classes}")

    @property
    def downsample_factor(self) -> int:
        return math.prod(self.strides)

    @property
    def feature_depth(self) -> int:
        return self.widths[-1]

    @property
    def ignore_index(self) -> int:
        """In-memory IGNORE label: one past the last class."""
        return self.num_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ArchDescriptor":
        data = dict(data)
        for key in ("widths", "strides"):
            if key in data:
                data[key] = tuple(int(v) for v in data[key])
        return cls(**data)

    def check_image_shape(self, shape: tuple[int, ...]) -> None:
        """Raise ConfigError unless `shape` (N×C×H×W) is a valid encoder input."""
        if len(shape) != 4:
            raise ConfigError(f"expected a 4-D N×C×H×W image batch, got shape {tuple(shape)}")
        _, c, h, w = shape
        f = self.downsample_factor
        if c != self.in_channels or h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE or h % f or w % f:
            raise ConfigError(
                f"image shape {tuple(shape)} does not match architecture: expected "
                f"(N, {self.in_channels}, H, W) with H, W >= {MIN_IMAGE_SIDE} "
                f"and divisible by {f}"
            )


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class SegModel(nn.Module):
    """
    Toy encoder–decoder segmentation network.

    Parameters are He-initialised (fan-in) from `arch.init_seed`, so two
    models built from equal descriptors are bit-identical until trained.
    """

    def __init__(self, arch: ArchDescriptor | None = None) -> None:
        super().__init__()
        self.arch = arch or ArchDescriptor()

        stages: OrderedDict[str, nn.Module] = OrderedDict()
        in_ch = self.arch.in_channels
        for i, (width, stride) in enumerate(zip(self.arch.widths, self.arch.strides), start=1):
            layers: list[nn.Module] = [
                nn.Conv2d(in_ch, width, 3, stride=stride, padding=1, bias=not self.arch.batch_norm)
            ]
            if self.arch.batch_norm:
                layers.append(nn.BatchNorm2d(width))
            layers.append(nn.ReLU())
            stages[f"stage{i}"] = nn.Sequential(*layers)
            in_ch = width
        self.encoder = nn.Sequential(stages)
        self.classifier = nn.Conv2d(self.arch.feature_depth, self.arch.num_classes, 1)

        self.reset_parameters()

    # ------------------------------------------------------------------
    # Initialisation
    # ------------------------------------------------------------------

    def reset_parameters(self, seed: int | None = None) -> None:
        g = torch.Generator().manual_seed(self.arch.init_seed if seed is None else seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Conv2d):
                    fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                    # ReLU gain for hidden convs, unit gain for the projection
                    gain = 1.0 if module is self.classifier else 2.0
                    std = math.sqrt(gain / fan_in)
                    module.weight.copy_(torch.randn(module.weight.shape, generator=g) * std)
                    if module.bias is not None:
                        module.bias.zero_()
                elif isinstance(module, nn.BatchNorm2d):
                    module.reset_parameters()
                    module.reset_running_stats()

    # ------------------------------------------------------------------
    # h, g, f
    # ------------------------------------------------------------------

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self.arch.check_image_shape(tuple(x.shape))
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.arch.feature_depth:
            raise ConfigError(
                f"feature shape {tuple(z.shape)} does not match architecture: expected "
                f"(N, {self.arch.feature_depth}, H', W')"
            )
        f = self.arch.downsample_factor
        logits = self.classifier(z)
        return F.interpolate(
            logits, size=(z.shape[2] * f, z.shape[3] * f), mode="bilinear", align_corners=False
        )

    def forward(self, x: torch.Tensor, feature_noise: torch.Tensor | None = None) -> torch.Tensor:
        z = self.encode(x)
        if feature_noise is not None:
            z = z + feature_noise
        return self.decode(z)

    def predict_probs(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(x), dim=1)

    # ------------------------------------------------------------------
    # Flat parameter vector
    # ------------------------------------------------------------------

    def flatten_parameters(self) -> torch.Tensor:
        return parameters_to_vector(self.parameters()).detach().clone()

    def restore_parameters(self, vector: torch.Tensor) -> None:
        expected = sum(p.numel() for p in self.parameters())
        if vector.numel() != expected:
            raise ConfigError(
                f"parameter vector of length {vector.numel()} does not match "
                f"architecture ({expected} parameters)"
            )
        with torch.no_grad():
            vector_to_parameters(vector.to(next(self.parameters()).dtype), self.parameters())

    def layer_modules(self) -> dict[str, nn.Module]:
        """Named weight-bearing layers, in forward order (for per-layer diagnostics)."""
        layers: dict[str, nn.Module] = {}
        for name, module in self.named_modules():
            if isinstance(module, nn.Conv2d):
                layers[name.replace(".0", "")] = module
        return layers


# ---------------------------------------------------------------------------
# Functional surface
# ---------------------------------------------------------------------------

def encode(model: SegModel, x: torch.Tensor) -> torch.Tensor:
    return model.encode(x)


def decode(model: SegModel, z: torch.Tensor) -> torch.Tensor:
    return model.decode(z)


def predict_probs(model: SegModel, x: torch.Tensor) -> torch.Tensor:
    return model.predict_probs(x)


def build_model(arch: ArchDescriptor | None = None, dtype: torch.dtype = torch.float32) -> SegModel:
    model = SegModel(arch).to(dtype)
    log.debug("Built SegModel %s (%d parameters)", model.arch, sum(p.numel() for p in model.parameters()))
    return model
