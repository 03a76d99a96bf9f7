"""
PSMT — Gradient-magnitude probe

Mean absolute gradient of the consistency loss with respect to the weights
of every named student layer, evaluated on one fixed batch.  Running the
probe for "conf_ce" and "mse" on the same frozen state gives the per-layer
comparison charted by `trainer.plots.grad_probe_figure`.

The probe is side-effect free: gradients come from `torch.autograd.grad`
(no `.grad` accumulation, no optimiser step), the student is evaluated in
eval mode (BatchNorm statistics untouched) and no RNG stream is consumed.
"""

from __future__ import annotations

import logging

import torch

from src.errors import ConfigError, NonFiniteError
from src.losses import LOSS_MODES, consistency_loss
from src.model import SegModel
from src.teachers import TeacherPair

log = logging.getLogger(__name__)


def gradient_magnitude_probe(
    student: SegModel,
    pair: TeacherPair,
    images: torch.Tensor,
    mode: str,
    tau: float,
) -> dict[str, float]:
    """
    Per-layer mean |∂ℓ_con/∂θ| for loss `mode` on `images`.

    Returns
    -------
    dict layer name → mean absolute gradient over that layer's weight and bias.
    """
    if mode not in LOSS_MODES:
        raise ConfigError(f"loss.mode must be one of {LOSS_MODES}, got {mode!r}")
    layers = student.layer_modules()
    params = [p for module in layers.values() for p in module.parameters()]

    was_training = student.training
    student.eval()
    try:
        target = pair.predict(images, tau)
        with torch.enable_grad():
            probs = torch.softmax(student(images), dim=1)
            loss = consistency_loss(mode, probs, target)
            grads = torch.autograd.grad(loss, params, allow_unused=True)
    finally:
        student.train(was_training)

    out: dict[str, float] = {}
    i = 0
    for name, module in layers.items():
        chunks = []
        for p in module.parameters():
            g = grads[i]
            chunks.append(torch.zeros_like(p).flatten() if g is None else g.detach().abs().flatten())
            i += 1
        value = float(torch.cat(chunks).mean())
        if value != value:
            raise NonFiniteError(f"non-finite gradient magnitude in layer {name!r}")
        out[name] = value
    log.debug("Gradient probe (%s): %s", mode, out)
    return out


def probe_state(state, images: torch.Tensor, mode: str | None = None) -> dict[str, float]:
    """Probe a TrainState with its configured (or an explicit) loss mode."""
    cfg = state.config
    return gradient_magnitude_probe(
        state.student, state.teachers, images, mode or cfg.loss.mode, cfg.teachers.tau
    )


def probe_both_modes(state, images: torch.Tensor) -> dict:
    """{"layers": [...], "conf_ce": {...}, "mse": {...}} on the same frozen state."""
    result: dict = {"layers": list(state.student.layer_modules())}
    for mode in LOSS_MODES:
        result[mode] = probe_state(state, images, mode)
    return result
