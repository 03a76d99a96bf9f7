"""
PSMT — Teacher-ensemble inference and mIoU evaluation

Inference is the argmax of the ensemble soft map.  Inputs larger than the
training crop go through sliding-window inference: soft probabilities are
summed over overlapping windows (last window clamped to the border) and
argmaxed once, lowest class index winning ties.

mIoU: IoU_c = TP_c / (TP_c + FP_c + FN_c) from a bincount confusion matrix;
classes absent from both prediction and ground truth are excluded from the
mean.  IGNORE ground-truth pixels are never scored.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import pandas as pd
import torch

from data_loader.dataset import DatasetIndex, load_batch
from src.errors import ConfigError
from src.teachers import TeacherPair, ensemble_from_logits

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Confusion matrix
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """Y×Y counts, rows = ground truth, columns = prediction."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def add(self, pred, gt) -> "ConfusionMatrix":
        pred = _as_numpy(pred).astype(np.int64).ravel()
        gt = _as_numpy(gt).astype(np.int64).ravel()
        if pred.shape != gt.shape:
            raise ConfigError(f"prediction shape {pred.shape} does not match ground-truth shape {gt.shape}")
        scored = (gt >= 0) & (gt < self.num_classes)
        if np.any((pred[scored] < 0) | (pred[scored] >= self.num_classes)):
            raise ConfigError(f"prediction contains class indices outside 0..{self.num_classes - 1}")
        flat = self.num_classes * gt[scored] + pred[scored]
        self.counts += np.bincount(flat, minlength=self.num_classes ** 2).reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ConfigError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN where the class is absent from both pred and gt."""
        tp = np.diag(self.counts).astype(float)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - np.diag(self.counts)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(union > 0, tp / np.maximum(union, 1), np.nan)

    def miou(self) -> float:
        iou = self.per_class_iou()
        present = ~np.isnan(iou)
        return float(iou[present].mean()) if present.any() else 0.0

    def pixel_accuracy(self) -> float:
        return float(np.diag(self.counts).sum() / self.total) if self.total else 0.0


def _as_numpy(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        return a.detach().cpu().numpy()
    return np.asarray(a)


def miou(preds: Sequence, gts: Sequence, num_classes: int) -> tuple[list[float], float]:
    """(per-class IoU with NaN for absent classes, mIoU)."""
    if len(preds) == 0 or len(preds) != len(gts):
        raise ConfigError(f"miou needs matched non-empty lists, got {len(preds)} predictions and {len(gts)} masks")
    cm = ConfusionMatrix(num_classes)
    for pred, gt in zip(preds, gts):
        cm.add(pred, gt)
    return [float(v) for v in cm.per_class_iou()], cm.miou()


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _as_batch(x: torch.Tensor) -> torch.Tensor:
    return x[None] if x.dim() == 3 else x


def ensemble_soft(pair: TeacherPair, x: torch.Tensor) -> torch.Tensor:
    return ensemble_from_logits(pair.logits(x), tau=0.0).soft


def infer(pair: TeacherPair, x: torch.Tensor, input_size: tuple[int, int] | None = None) -> torch.Tensor:
    """Argmax of the ensemble soft map (N×H×W)."""
    x = _as_batch(x)
    if input_size is not None and tuple(x.shape[-2:]) != tuple(input_size):
        raise ConfigError(
            f"image size {tuple(x.shape[-2:])} differs from model input size {tuple(input_size)}; "
            "enable sliding inference"
        )
    return ensemble_soft(pair, x).argmax(dim=1)


def window_starts(length: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] != length - window:
        starts.append(length - window)
    return starts


def accumulate_windows(
    prob_fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    window: tuple[int, int],
    stride: tuple[int, int],
) -> torch.Tensor:
    """Sum of `prob_fn` soft maps over all windows covering each pixel."""
    x = _as_batch(x)
    h, w = x.shape[-2:]
    wh, ww = window
    sh, sw = stride
    if wh > h or ww > w:
        raise ConfigError(f"window {wh}×{ww} is larger than the {h}×{w} image")
    if not (0 < sh <= wh and 0 < sw <= ww):
        raise ConfigError(f"stride {sh}×{sw} must be positive and no larger than window {wh}×{ww}")

    total: torch.Tensor | None = None
    for top in window_starts(h, wh, sh):
        for left in window_starts(w, ww, sw):
            probs = prob_fn(x[..., top:top + wh, left:left + ww])
            if total is None:
                total = torch.zeros(probs.shape[:2] + (h, w), dtype=probs.dtype, device=probs.device)
            total[..., top:top + wh, left:left + ww] += probs
    return total


def sliding_infer(
    pair: TeacherPair,
    x: torch.Tensor,
    window: tuple[int, int],
    stride: tuple[int, int],
) -> torch.Tensor:
    summed = accumulate_windows(lambda patch: ensemble_soft(pair, patch), x, window, stride)
    return summed.argmax(dim=1)


def parse_sliding(text: str) -> tuple[tuple[int, int], tuple[int, int]]:
    """Parse the CLI form "HxW:SHxSW", e.g. "32x32:16x16"."""
    try:
        win, step = text.lower().split(":")
        wh, ww = (int(v) for v in win.split("x"))
        sh, sw = (int(v) for v in step.split("x"))
    except ValueError as exc:
        raise ConfigError(f"sliding spec must look like HxW:SHxSW, got {text!r}") from exc
    return (wh, ww), (sh, sw)


# ---------------------------------------------------------------------------
# Split evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    per_class_iou: list[float]
    miou: float
    pixel_accuracy: float
    n_images: int
    confusion: ConfusionMatrix | None = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"class": list(range(len(self.per_class_iou))), "iou": self.per_class_iou},
            columns=["class", "iou"],
        )

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.6f")
        return path

    def summary(self) -> str:
        return f"mIoU={self.miou:.4f} pixel_acc={self.pixel_accuracy:.4f} images={self.n_images}"

    def to_dict(self) -> dict:
        return {
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "pixel_accuracy": self.pixel_accuracy,
            "n_images": self.n_images,
        }


def evaluate_batches(
    pair: TeacherPair,
    batches: Iterable[tuple[torch.Tensor, torch.Tensor]],
    num_classes: int,
    sliding: tuple[tuple[int, int], tuple[int, int]] | None = None,
    input_size: tuple[int, int] | None = None,
) -> EvalResult:
    cm = ConfusionMatrix(num_classes)
    n = 0
    for images, masks in batches:
        if sliding is not None:
            preds = sliding_infer(pair, images, *sliding)
        else:
            preds = infer(pair, images, input_size)
        cm.add(preds, masks)
        n += images.shape[0]
    if n == 0:
        raise ConfigError("evaluation set is empty")
    return EvalResult([float(v) for v in cm.per_class_iou()], cm.miou(), cm.pixel_accuracy(), n, cm)


def evaluate_split(
    pair: TeacherPair,
    index: DatasetIndex,
    batch_size: int = 16,
    sliding: tuple[tuple[int, int], tuple[int, int]] | None = None,
    input_size: tuple[int, int] | None = None,
) -> EvalResult:
    """Score the teachers on every labelled item of `index`."""
    ids = list(index.labelled)

    def _batches():
        for start in range(0, len(ids), batch_size):
            batch = load_batch(index, ids[start:start + batch_size], "labelled")
            yield batch.images, batch.masks

    result = evaluate_batches(pair, _batches(), index.num_classes, sliding, input_size)
    log.info("Evaluated %s: %s", index.name, result.summary())
    return result
