"""
Unit Tests — Mean-teacher pair: ensemble prediction, EMA, cursor

Run:
    pytest tests/test_teachers.py -v
"""

from __future__ import annotations

import copy

import pytest
import torch

from src.errors import ConfigError
from src.model import ArchDescriptor, build_model
from src.teachers import (
    TeacherPair,
    advance_epoch,
    ema_update,
    ensemble_from_logits,
    ensemble_predict,
    prediction_from_soft,
)


def _soft(*pixels: tuple[float, ...]) -> torch.Tensor:
    """1×Y×1×P soft map from per-pixel class distributions."""
    return torch.tensor(pixels, dtype=torch.float64).T.reshape(1, len(pixels[0]), 1, len(pixels))


def _pair(**kwargs) -> TeacherPair:
    return TeacherPair.from_student(build_model(), **kwargs)


def _fill(model, value: float) -> None:
    with torch.no_grad():
        for p in model.parameters():
            p.fill_(value)


def _images(n: int = 2) -> torch.Tensor:
    return torch.rand((n, 3, 32, 32), generator=torch.Generator().manual_seed(0))


# ---------------------------------------------------------------------------
# Hard labels and confidence
# ---------------------------------------------------------------------------

class TestPredictionFromSoft:

    def test_confident_pixel(self):
        pred = prediction_from_soft(_soft((0.9, 0.1)), tau=0.5)
        assert pred.hard[0, :, 0, 0].tolist() == [1.0, 0.0]
        assert float(pred.confidence[0, 0, 0]) == pytest.approx(0.9)

    def test_pixel_below_tau_gated_to_zero(self):
        pred = prediction_from_soft(_soft((0.45, 0.55)), tau=0.6)
        assert float(pred.confidence[0, 0, 0]) == 0.0
        assert int(pred.labels[0, 0, 0]) == 1

    def test_tie_goes_to_lowest_class(self):
        pred = prediction_from_soft(_soft((0.5, 0.5)), tau=0.0)
        assert int(pred.labels[0, 0, 0]) == 0

    def test_one_hot_and_confidence_range(self):
        g = torch.Generator().manual_seed(2)
        soft = torch.softmax(torch.randn((2, 4, 8, 8), generator=g) * 3, dim=1)
        tau = 0.6
        pred = prediction_from_soft(soft, tau)
        assert torch.equal(pred.hard.sum(dim=1), torch.ones(2, 8, 8))
        nonzero = pred.confidence[pred.confidence > 0]
        assert (nonzero > tau).all() and (nonzero <= 1).all()

    def test_raising_tau_never_enables_pixels(self):
        g = torch.Generator().manual_seed(4)
        soft = torch.softmax(torch.randn((1, 3, 16, 16), generator=g) * 2, dim=1)
        low = prediction_from_soft(soft, 0.4).confidence
        high = prediction_from_soft(soft, 0.7).confidence
        assert not ((low == 0) & (high > 0)).any()

    @pytest.mark.parametrize("tau", [-0.1, 1.0, 1.5])
    def test_tau_out_of_range(self, tau):
        with pytest.raises(ConfigError, match="tau"):
            prediction_from_soft(_soft((0.9, 0.1)), tau)


class TestEnsembleFromLogits:

    def test_opposite_logits_average_to_uniform(self):
        a = torch.tensor([2.0, 0.0]).view(1, 2, 1, 1)
        b = torch.tensor([0.0, 2.0]).view(1, 2, 1, 1)
        pred = ensemble_from_logits([a, b], tau=0.0)
        assert pred.soft.flatten().tolist() == pytest.approx([0.5, 0.5])

    def test_argmax_invariant_to_shared_shift(self):
        g = torch.Generator().manual_seed(6)
        a, b = torch.randn((2, 1, 4, 6, 6), generator=g)
        shift = torch.randn((1, 1, 6, 6), generator=g) * 5
        plain = ensemble_from_logits([a, b], 0.0).labels
        shifted = ensemble_from_logits([a + shift, b + shift], 0.0).labels
        assert torch.equal(plain, shifted)


# ---------------------------------------------------------------------------
# TeacherPair
# ---------------------------------------------------------------------------

class TestEnsemblePredict:

    def test_equal_teachers_match_single_model(self):
        student = build_model()
        pair = TeacherPair.from_student(student)
        x = _images()
        pred = ensemble_predict(pair, x, tau=0.8)
        assert torch.allclose(pred.soft, student.predict_probs(x), atol=1e-6)

    def test_teachers_need_no_gradients(self):
        pair = _pair()
        assert not any(p.requires_grad for p in pair.parameters())
        assert not pair.t1.training and not pair.t2.training

    def test_arch_mismatch_rejected(self):
        with pytest.raises(ConfigError, match="differ"):
            TeacherPair(build_model(), build_model(ArchDescriptor(num_classes=3)))

    def test_single_teacher_mode(self):
        pair = _pair(aux_teacher=False)
        assert pair.members == (pair.t1,)
        assert pair.active is pair.t1


class TestEmaUpdate:

    def test_single_step_value(self):
        student = build_model()
        pair = TeacherPair.from_student(student, gamma=0.99)
        _fill(pair.t1, 1.0)
        _fill(student, 0.0)
        ema_update(pair, student)
        assert all(torch.allclose(p, torch.full_like(p, 0.99)) for p in pair.t1.parameters())

    def test_only_cursor_teacher_changes(self):
        student = build_model()
        pair = TeacherPair.from_student(student)
        t2_before = pair.t2.flatten_parameters()
        _fill(student, 0.5)
        pair.ema_update(student)
        assert torch.equal(pair.t2.flatten_parameters(), t2_before)
        assert not torch.equal(pair.t1.flatten_parameters(), t2_before)

    def test_student_equal_teacher_is_fixed_point(self):
        student = build_model()
        pair = TeacherPair.from_student(student)
        before = pair.t1.flatten_parameters()
        pair.ema_update(student)
        assert torch.allclose(pair.t1.flatten_parameters(), before, atol=1e-7)

    def test_geometric_convergence(self):
        student = build_model(dtype=torch.float64)
        pair = TeacherPair.from_student(student, gamma=0.9)
        _fill(pair.t1, 1.0)
        _fill(student, 0.0)
        for _ in range(100):
            pair.ema_update(student)
        gap = pair.t1.flatten_parameters().abs().max().item()
        assert gap == pytest.approx(0.9 ** 100, rel=1e-9)

    def test_staggered_updates_over_epochs(self):
        student = build_model(dtype=torch.float64)
        pair = TeacherPair.from_student(student, gamma=0.8)
        _fill(pair.t1, 1.0)
        _fill(pair.t2, 1.0)
        _fill(student, 0.0)
        k = 3
        for _ in range(2 * k):
            pair.ema_update(student)
            pair.advance_epoch()
        for teacher in (pair.t1, pair.t2):
            assert teacher.flatten_parameters().abs().max().item() <= 0.8 ** k + 1e-12

    @pytest.mark.parametrize("gamma", [0.0, 1.0, 1.2])
    def test_gamma_out_of_range(self, gamma):
        with pytest.raises(ConfigError, match="gamma"):
            _pair(gamma=gamma)

    def test_gamma_ramp(self):
        pair = _pair(gamma=0.99, gamma_ramp=True)
        assert pair.effective_gamma() == 0.0
        pair.ema_steps = 9
        assert pair.effective_gamma() == pytest.approx(0.9)
        pair.ema_steps = 10_000
        assert pair.effective_gamma() == pytest.approx(0.99)

    def test_arch_mismatch_rejected(self):
        pair = _pair()
        with pytest.raises(ConfigError, match="does not match"):
            pair.ema_update(build_model(ArchDescriptor(num_classes=3)))

    def test_batch_norm_running_stats_follow_ema(self):
        student = build_model(ArchDescriptor(batch_norm=True))
        pair = TeacherPair.from_student(student, gamma=0.5)
        student.train()
        student(_images(4))
        pair.ema_update(student)
        bn_t = pair.t1.encoder.stage1[1]
        bn_s = student.encoder.stage1[1]
        assert torch.allclose(bn_t.running_mean, 0.5 * bn_s.running_mean)
        assert int(bn_t.num_batches_tracked) == int(bn_s.num_batches_tracked)


class TestAdvanceEpoch:

    def test_flip_and_return(self):
        pair = _pair()
        assert pair.cursor == "t1"
        advance_epoch(pair)
        assert pair.cursor == "t2"
        advance_epoch(pair)
        assert pair.cursor == "t1"

    def test_parameters_untouched(self):
        pair = _pair()
        before = (pair.t1.flatten_parameters(), pair.t2.flatten_parameters())
        pair.advance_epoch()
        assert torch.equal(pair.t1.flatten_parameters(), before[0])
        assert torch.equal(pair.t2.flatten_parameters(), before[1])

    def test_state_dict_round_trip(self):
        pair = _pair()
        student = copy.deepcopy(pair.t1)
        _fill(student, 0.1)
        pair.ema_update(student).advance_epoch()
        other = _pair()
        other.load_state_dict(pair.state_dict())
        assert other.cursor == "t2" and other.ema_steps == 1
        assert torch.equal(other.t1.flatten_parameters(), pair.t1.flatten_parameters())
