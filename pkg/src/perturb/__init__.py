"""
PSMT — Perturbation package.

Public API:
    from src.perturb import PerturbationSpec, tvat_perturbation, cutmix_combine
    spec = PerturbationSpec()
    r_adv = tvat_perturbation(z_student, pair, spec.tvat)
"""

from __future__ import annotations

from dataclasses import dataclass, field

from src.config import INPUT_BRANCH
from src.errors import ConfigError
from src.perturb.augment import (
    StrongAugSpec,
    WeakAugSpec,
    strong_augment,
    weak_augment,
)
from src.perturb.cutmix import (
    CutMixMask,
    CutMixSpec,
    cutmix_after_prediction,
    cutmix_combine,
    sample_cutmix_mask,
)
from src.perturb.tvat import TVatSpec, feature_perturbation, tvat_perturbation
from src.perturb.zoom import ZoomConfig, ZoomSpec, zoom_consistency_targets

INPUT_BRANCHES = ("random", "cutmix", "zoom", "both", "none")


@dataclass
class PerturbationSpec:
    """Declarative description of the active perturbation stack."""

    tvat: TVatSpec = field(default_factory=TVatSpec)
    cutmix: CutMixSpec = field(default_factory=CutMixSpec)
    zoom: ZoomConfig = field(default_factory=ZoomConfig)
    weak_aug: WeakAugSpec = field(default_factory=WeakAugSpec)
    strong_aug: StrongAugSpec = field(default_factory=StrongAugSpec)
    branch: str = INPUT_BRANCH

    def validate(self) -> None:
        if self.branch not in INPUT_BRANCHES:
            raise ConfigError(f"perturb.branch must be one of {INPUT_BRANCHES}, got {self.branch!r}")
        self.tvat.validate()
        self.cutmix.validate()
        self.zoom.validate()
        self.weak_aug.validate()
        self.strong_aug.validate()


__all__ = [
    "INPUT_BRANCHES",
    "CutMixMask",
    "CutMixSpec",
    "PerturbationSpec",
    "StrongAugSpec",
    "TVatSpec",
    "WeakAugSpec",
    "ZoomConfig",
    "ZoomSpec",
    "cutmix_after_prediction",
    "cutmix_combine",
    "feature_perturbation",
    "sample_cutmix_mask",
    "strong_augment",
    "tvat_perturbation",
    "weak_augment",
    "zoom_consistency_targets",
]
