"""
PSMT — Feature-space adversarial perturbation (T-VAT and comparison modes)

The student's encoder features z are perturbed by r_adv with ||r_adv||₂ ≤ ε
(per sample).  The direction approximately maximises the pixel-summed

    KL( σ(ḡ(z)) ‖ σ(ḡ(z + r)) )

where ḡ is the mean teacher decoder.  Power iteration:

    d ← unit random probe
    repeat power_iters:  d ← normalise( ∇_d KL(clean ‖ ḡ(z + ξ·d)) )
    r_adv = ε · d

The clean side is a constant (no gradient through it).

Modes (perturbation study):
    tvat    — teacher-ensemble decoder (default)
    vat     — the student's own decoder, same power iteration
    uniform — uniform noise rescaled to radius ε
    off     — no feature perturbation
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from src.config import TVAT_EPSILON, TVAT_MODE, TVAT_ON_LABELLED, TVAT_POWER_ITERS, TVAT_XI
from src.errors import ConfigError, NonFiniteError

log = logging.getLogger(__name__)

TVAT_MODES = ("tvat", "vat", "uniform", "off")


@dataclass
class TVatSpec:
    mode: str = TVAT_MODE
    epsilon: float = TVAT_EPSILON
    xi: float = TVAT_XI
    power_iters: int = TVAT_POWER_ITERS
    on_labelled: bool = TVAT_ON_LABELLED

    def validate(self) -> None:
        if self.mode not in TVAT_MODES:
            raise ConfigError(f"tvat.mode must be one of {TVAT_MODES}, got {self.mode!r}")
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ConfigError(f"tvat.epsilon must be finite and > 0, got {self.epsilon}")
        if not (math.isfinite(self.xi) and self.xi > 0):
            raise ConfigError(f"tvat.xi must be finite and > 0, got {self.xi}")
        if int(self.power_iters) < 1:
            raise ConfigError(f"tvat.power_iters must be >= 1, got {self.power_iters}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def l2_normalize(d: torch.Tensor) -> torch.Tensor:
    """Scale every sample of `d` to unit L2 norm (zero samples stay zero)."""
    return F.normalize(d.flatten(1), p=2, dim=1, eps=1e-12).view_as(d)


def sample_norms(r: torch.Tensor) -> torch.Tensor:
    return r.flatten(1).norm(p=2, dim=1)


def pixel_kl(clean_logits: torch.Tensor, perturbed_logits: torch.Tensor) -> torch.Tensor:
    """Sum over all pixels (and the batch) of KL(σ(clean) ‖ σ(perturbed))."""
    return F.kl_div(
        F.log_softmax(perturbed_logits, dim=1),
        F.log_softmax(clean_logits, dim=1),
        reduction="sum",
        log_target=True,
    )


def adversarial_direction(
    decode_fn: Callable[[torch.Tensor], torch.Tensor],
    z: torch.Tensor,
    spec: TVatSpec,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Power-iteration estimate of the KL-maximising perturbation of `z`, scaled to ε."""
    spec.validate()
    z = z.detach()
    with torch.no_grad():
        clean = decode_fn(z)

    d = l2_normalize(torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device))
    for it in range(int(spec.power_iters)):
        with torch.enable_grad():
            d = d.detach().requires_grad_(True)
            divergence = pixel_kl(clean, decode_fn(z + spec.xi * d))
            (grad,) = torch.autograd.grad(divergence, d)
        if not torch.isfinite(grad).all():
            raise NonFiniteError("non-finite KL gradient in adversarial power iteration", iteration=it)
        if float(grad.abs().max()) == 0.0:
            log.warning("Zero KL gradient in adversarial power iteration %d — perturbation is zero", it)
        d = l2_normalize(grad.detach())
    return spec.epsilon * d


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------

def tvat_perturbation(student_feat: torch.Tensor, pair, spec: TVatSpec, generator: torch.Generator | None = None) -> torch.Tensor:
    """r_adv guided by the teacher ensemble's decoders."""
    return adversarial_direction(pair.decode_mean, student_feat, spec, generator)


def vat_perturbation(student_feat: torch.Tensor, student, spec: TVatSpec, generator: torch.Generator | None = None) -> torch.Tensor:
    """r_adv guided by the student's own decoder."""
    return adversarial_direction(student.decode, student_feat, spec, generator)


def uniform_perturbation(student_feat: torch.Tensor, spec: TVatSpec, generator: torch.Generator | None = None) -> torch.Tensor:
    spec.validate()
    u = torch.rand(student_feat.shape, generator=generator, dtype=student_feat.dtype, device=student_feat.device)
    return spec.epsilon * l2_normalize(2.0 * u - 1.0)


def feature_perturbation(
    student_feat: torch.Tensor,
    spec: TVatSpec,
    pair=None,
    student=None,
    generator: torch.Generator | None = None,
) -> torch.Tensor | None:
    """Dispatch on `spec.mode`; returns None for mode "off"."""
    if spec.mode == "off":
        return None
    if spec.mode == "tvat":
        return tvat_perturbation(student_feat, pair, spec, generator)
    if spec.mode == "vat":
        return vat_perturbation(student_feat, student, spec, generator)
    if spec.mode == "uniform":
        return uniform_perturbation(student_feat, spec, generator)
    raise ConfigError(f"tvat.mode must be one of {TVAT_MODES}, got {spec.mode!r}")
