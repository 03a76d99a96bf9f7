"""
Unit Tests — mIoU, ensemble inference, sliding-window inference

Run:
    pytest tests/test_evaluation.py -v
"""

from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest
import torch

from data_loader.synthetic import SyntheticSpec, generate_synthetic
from src.errors import ConfigError
from src.evaluation import (
    ConfusionMatrix,
    EvalResult,
    accumulate_windows,
    evaluate_batches,
    evaluate_split,
    infer,
    miou,
    parse_sliding,
    sliding_infer,
    window_starts,
)
from src.model import build_model
from src.teachers import TeacherPair


def _pair(seed: int = 0) -> TeacherPair:
    student = build_model()
    student.reset_parameters(seed=seed)
    return TeacherPair.from_student(student)


def _images(n: int = 2, h: int = 32, w: int = 32) -> torch.Tensor:
    return torch.rand((n, 3, h, w), generator=torch.Generator().manual_seed(0))


# ---------------------------------------------------------------------------
# Confusion matrix / mIoU
# ---------------------------------------------------------------------------

class TestMiou:

    def test_hand_evaluated(self):
        pred = np.array([[0, 1], [1, 1]])
        gt = np.array([[0, 0], [1, 1]])
        per_class, m = miou([pred], [gt], num_classes=3)
        assert per_class[0] == pytest.approx(0.5)
        assert per_class[1] == pytest.approx(2 / 3)
        assert math.isnan(per_class[2])
        assert m == pytest.approx(7 / 12)

    def test_perfect_prediction(self):
        gt = np.array([[0, 1, 2, 3]])
        assert miou([gt.copy()], [gt], num_classes=4)[1] == 1.0

    def test_ignore_pixels_not_scored(self):
        cm = ConfusionMatrix(2).add(np.array([1, 0, 1]), np.array([2, 0, 1]))
        assert cm.total == 2
        assert cm.miou() == 1.0

    def test_class_absent_from_gt_but_predicted_counts(self):
        _, m = miou([np.array([0, 1])], [np.array([0, 0])], num_classes=2)
        assert m == pytest.approx((0.5 + 0.0) / 2)

    def test_pixel_accuracy(self):
        cm = ConfusionMatrix(2).add(torch.tensor([0, 1, 1, 0]), torch.tensor([0, 1, 0, 0]))
        assert cm.pixel_accuracy() == pytest.approx(0.75)

    def test_merge(self):
        a = ConfusionMatrix(2).add(np.array([0]), np.array([0]))
        b = ConfusionMatrix(2).add(np.array([1]), np.array([0]))
        assert a.merge(b).counts.tolist() == [[1, 1], [0, 0]]

    def test_out_of_range_prediction(self):
        with pytest.raises(ConfigError, match="outside"):
            ConfusionMatrix(2).add(np.array([5]), np.array([0]))

    def test_empty_lists(self):
        with pytest.raises(ConfigError):
            miou([], [], num_classes=2)


# ---------------------------------------------------------------------------
# Sliding-window inference
# ---------------------------------------------------------------------------

class TestSlidingWindow:

    def test_window_starts_clamp_last_window(self):
        assert window_starts(8, 4, 2) == [0, 2, 4]
        assert window_starts(10, 4, 4) == [0, 4, 6]
        assert window_starts(4, 4, 4) == [0]

    def test_coverage_counts_on_8x8(self):
        x = torch.zeros(1, 3, 8, 8)
        total = accumulate_windows(lambda p: torch.ones(p.shape[0], 2, *p.shape[-2:]), x, (4, 4), (2, 2))
        per_axis = torch.tensor([1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 1.0, 1.0])
        expected = per_axis[:, None] * per_axis[None, :]
        assert torch.equal(total[0, 0], expected)
        assert torch.equal(total[0, 1], expected)

    def test_full_window_equals_direct_inference(self):
        pair = _pair(1)
        x = _images()
        assert torch.equal(sliding_infer(pair, x, (32, 32), (32, 32)), infer(pair, x))

    def test_larger_image(self):
        pair = _pair()
        preds = sliding_infer(pair, _images(1, 48, 64), (32, 32), (16, 16))
        assert tuple(preds.shape) == (1, 48, 64)
        assert int(preds.max()) < 4

    def test_window_larger_than_image(self):
        with pytest.raises(ConfigError, match="larger"):
            sliding_infer(_pair(), _images(1), (64, 64), (32, 32))

    def test_bad_stride(self):
        with pytest.raises(ConfigError, match="stride"):
            sliding_infer(_pair(), _images(1), (16, 16), (32, 32))

    def test_parse_sliding(self):
        assert parse_sliding("32x48:16x24") == ((32, 48), (16, 24))
        with pytest.raises(ConfigError):
            parse_sliding("32:16")


class TestInfer:

    def test_labels_shape_and_range(self):
        preds = infer(_pair(), _images(3))
        assert tuple(preds.shape) == (3, 32, 32)
        assert preds.dtype == torch.int64

    def test_single_image_gets_batch_axis(self):
        assert tuple(infer(_pair(), _images(1)[0]).shape) == (1, 32, 32)

    def test_size_mismatch_asks_for_sliding(self):
        with pytest.raises(ConfigError, match="sliding"):
            infer(_pair(), _images(1, 48, 48), input_size=(32, 32))


# ---------------------------------------------------------------------------
# Split evaluation
# ---------------------------------------------------------------------------

class TestEvaluate:

    def test_evaluate_split(self, tmp_path):
        index = generate_synthetic(SyntheticSpec(height=32, width=32), 5, tmp_path)
        result = evaluate_split(_pair(), index, batch_size=2)
        assert result.n_images == 5
        assert 0.0 <= result.miou <= 1.0
        assert 0.0 <= result.pixel_accuracy <= 1.0
        assert result.confusion.total == 5 * 32 * 32
        assert len(result.per_class_iou) == 4

    def test_evaluate_split_sliding(self, tmp_path):
        index = generate_synthetic(SyntheticSpec(height=48, width=48), 2, tmp_path)
        result = evaluate_split(_pair(), index, sliding=((32, 32), (16, 16)))
        assert result.n_images == 2

    def test_evaluate_split_size_mismatch(self, tmp_path):
        index = generate_synthetic(SyntheticSpec(height=48, width=48), 1, tmp_path)
        with pytest.raises(ConfigError, match="sliding"):
            evaluate_split(_pair(), index, input_size=(32, 32))

    def test_empty_batches(self):
        with pytest.raises(ConfigError, match="empty"):
            evaluate_batches(_pair(), [], num_classes=4)

    def test_result_csv(self, tmp_path):
        result = EvalResult(per_class_iou=[0.5, float("nan"), 1.0], miou=0.75, pixel_accuracy=0.9, n_images=1)
        path = result.to_csv(tmp_path / "out" / "per_class_iou.csv")
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["class", "iou"]
        assert frame["iou"].iloc[0] == pytest.approx(0.5)
        assert math.isnan(frame["iou"].iloc[1])
        assert "mIoU=0.7500" in result.summary()
