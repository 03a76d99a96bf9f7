"""
Unit Tests — Training step, epoch loop, checkpoints, gradient probe, ablation

Run:
    pytest tests/test_trainer.py -v
"""

from __future__ import annotations

import copy
import json
import logging
import math

import numpy as np
import pandas as pd
import pytest
import torch

from data_loader.dataset import DatasetIndex, load_batch
from data_loader.partition import split_partition
from data_loader.synthetic import SyntheticSpec, generate_dataset
from src.errors import ConfigError, TrainingAborted
from src.evaluation import evaluate_split
from src.losses import supervised_loss
from src.run_config import RunConfig
from src.teachers import TeacherPair
from trainer import engine as engine_mod
from trainer.ablation import (
    ABLATION_COLUMNS,
    BUILTIN_ARMS,
    AblationArm,
    AblationRunner,
    aggregate_runs,
    format_table,
    resolve_arms,
)
from trainer.engine import (
    LAST_CHECKPOINT,
    NAN_DUMP_FILE,
    TrainEngine,
    choose_branch,
    lr_at,
    run_training,
    train_step,
)
from trainer.probe import gradient_magnitude_probe, probe_both_modes
from trainer.results import MetricsLog, TrainResult
from trainer.state import TrainState, read_checkpoint, teachers_from_checkpoint


@pytest.fixture
def dataset(tmp_path):
    root = tmp_path / "shapes"
    generate_dataset(SyntheticSpec(height=32, width=32), root, n_train=8, n_val=2)
    return root


def _config(root, **overrides) -> RunConfig:
    base = {
        "data.root": str(root),
        "optim.epochs": 2,
        "optim.batch_labelled": 2,
        "optim.batch_unlabelled": 2,
        "weak_aug.crop": 32,
        "run.checkpoint_every": 1,
    }
    base.update(overrides)
    return RunConfig().with_overrides(base).validate()


def _split(root, ratio: str = "1/2") -> DatasetIndex:
    full = DatasetIndex.load(root / "splits" / "full.json")
    return split_partition(full, ratio, seed=0, write=False)


def _assert_same_weights(a: TrainState, b: TrainState) -> None:
    for model_a, model_b in (
        (a.student, b.student),
        (a.teachers.t1, b.teachers.t1),
        (a.teachers.t2, b.teachers.t2),
    ):
        sd_a, sd_b = model_a.state_dict(), model_b.state_dict()
        assert list(sd_a) == list(sd_b)
        for name, tensor in sd_a.items():
            assert torch.equal(tensor, sd_b[name]), name


def _fit_until_accurate(state: TrainState, index: DatasetIndex, target: float = 0.9, max_steps: int = 600) -> float:
    """Supervised-only fit of the student on every labelled item; returns the teachers' pixel accuracy."""
    batch = load_batch(index, index.labelled, "labelled")
    opt = torch.optim.Adam(state.student.parameters(), lr=1e-2)
    state.student.train()
    accuracy = 0.0
    for step in range(1, max_steps + 1):
        opt.zero_grad(set_to_none=True)
        supervised_loss(torch.softmax(state.student(batch.images), dim=1), batch.masks).backward()
        opt.step()
        if step % 25 == 0:
            state.teachers = TeacherPair.from_student(state.student, gamma=state.config.teachers.gamma)
            accuracy = evaluate_split(state.teachers, index).pixel_accuracy
            if accuracy >= target:
                break
    return accuracy


# ---------------------------------------------------------------------------
# Schedules and branch choice
# ---------------------------------------------------------------------------

class TestLrAt:

    def test_poly_decay(self):
        cfg = RunConfig().with_overrides({"optim.lr0": 0.1, "optim.poly_power": 0.9})
        assert lr_at(cfg, 0, 10) == pytest.approx(0.1)
        assert lr_at(cfg, 5, 10) == pytest.approx(0.1 * 0.5 ** 0.9)
        assert lr_at(cfg, 10, 10) == 0.0

    def test_no_iterations(self):
        assert lr_at(RunConfig(), 0, 0) == RunConfig().optim.lr0

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            lr_at(RunConfig(), 11, 10)


class TestChooseBranch:

    def test_random_picks_exactly_one(self):
        rng = np.random.default_rng(0)
        draws = [choose_branch("random", "after", rng) for _ in range(50)]
        assert all(c != z for c, z in draws)
        assert {c for c, _ in draws} == {True, False}

    def test_fixed_policies(self):
        rng = np.random.default_rng(0)
        assert choose_branch("both", "after", rng) == (True, True)
        assert choose_branch("none", "after", rng) == (False, False)
        assert choose_branch("zoom", "after", rng) == (False, True)

    def test_cutmix_off_wins(self):
        assert choose_branch("cutmix", "off", np.random.default_rng(0)) == (False, False)


# ---------------------------------------------------------------------------
# train_step
# ---------------------------------------------------------------------------

class TestTrainStep:

    def _state(self, root, **overrides):
        cfg = _config(root, **overrides)
        index = _split(root)
        state = TrainState.initial(cfg, index.labelled, index.unlabelled, max_iter=10)
        labelled = load_batch(index, index.labelled[:2], "labelled")
        unlabelled = load_batch(index, index.unlabelled[:2], "unlabelled")
        return state, labelled, unlabelled

    @pytest.mark.parametrize("branch", ["cutmix", "zoom", "both", "none"])
    def test_step_updates_student_and_cursor_teacher(self, dataset, branch):
        state, labelled, unlabelled = self._state(dataset, **{"branch": branch})
        student_before = state.student.flatten_parameters()
        t2_before = state.teachers.t2.flatten_parameters()
        _, report = train_step(state, labelled, unlabelled)
        assert report.is_finite()
        assert state.iteration == 1
        assert len(state.history) == 1
        assert not torch.equal(state.student.flatten_parameters(), student_before)
        assert torch.equal(state.teachers.t2.flatten_parameters(), t2_before)

    @pytest.mark.parametrize("overrides", [
        {"loss.mode": "mse", "tvat.mode": "off"},
        {"tvat.mode": "vat", "tvat.on_labelled": False},
        {"tvat.mode": "uniform"},
        {"cutmix.mode": "before", "branch": "cutmix"},
        {"teachers.aux_teacher": False},
    ])
    def test_variants_run(self, dataset, overrides):
        state, labelled, unlabelled = self._state(dataset, **overrides)
        _, report = train_step(state, labelled, unlabelled)
        assert report.is_finite()

    def test_epoch_cadence_leaves_teachers_alone(self, dataset):
        state, labelled, unlabelled = self._state(dataset, **{"teachers.ema_cadence": "epoch"})
        t1_before = state.teachers.t1.flatten_parameters()
        train_step(state, labelled, unlabelled)
        assert torch.equal(state.teachers.t1.flatten_parameters(), t1_before)

    def test_optimizer_binds_only_student(self, dataset):
        state, _, _ = self._state(dataset)
        assert state.optimizer_binds_only_student()
        assert not any(p.requires_grad for p in state.teachers.parameters())

    def test_beta_zero_ignores_consistency(self, dataset):
        state, labelled, unlabelled = self._state(dataset, **{"ramp.beta_max": 0.0})
        _, report = train_step(state, labelled, unlabelled)
        assert report.beta_t == 0.0
        assert report.total == pytest.approx(report.sup)

    @pytest.mark.parametrize("branch", ["cutmix", "zoom"])
    def test_all_pixels_below_tau_leave_only_supervision(self, dataset, branch):
        state, labelled, unlabelled = self._state(dataset, **{"teachers.tau": 0.9999, "branch": branch})
        _, report = train_step(state, labelled, unlabelled)
        assert report.beta_t > 0.0
        assert report.con == 0.0
        assert math.isfinite(report.total)
        assert report.total == report.sup


# ---------------------------------------------------------------------------
# TrainEngine
# ---------------------------------------------------------------------------

class TestTrainEngine:

    def test_run_writes_metrics_checkpoints_and_probe(self, dataset, tmp_path):
        cfg = _config(dataset)
        state, result = run_training(cfg, tmp_path / "run", index=_split(dataset))
        run_dir = tmp_path / "run"
        assert result.epochs == 2
        assert result.iterations == state.iteration == 4
        assert len(result.val_miou) == 2
        assert (run_dir / "checkpoints" / "epoch_0001.pt").exists()
        assert (run_dir / "checkpoints" / LAST_CHECKPOINT).exists()
        probe = json.loads((run_dir / "grad_probe.json").read_text())
        assert set(probe) == {"layers", "conf_ce", "mse"}
        records = MetricsLog(run_dir / "metrics.jsonl").records()
        assert sum(r["kind"] == "train" for r in records) == 4
        assert sum(r["kind"] == "val" for r in records) == 2
        assert TrainResult.load(run_dir).iterations == 4

    def test_cursor_flips_every_epoch(self, dataset, tmp_path):
        engine = TrainEngine(_config(dataset, **{"optim.epochs": 3}), tmp_path / "run", index=_split(dataset))
        engine.run()
        assert engine.state.teachers.cursor == "t2"

    def test_zero_epochs_checkpoints_initial_state(self, dataset, tmp_path):
        state, result = run_training(_config(dataset, **{"optim.epochs": 0}), tmp_path / "run")
        assert result.iterations == 0
        assert result.final_miou is not None
        ckpt = read_checkpoint(tmp_path / "run" / "checkpoints" / LAST_CHECKPOINT)
        assert ckpt["epoch"] == 0 and ckpt["iteration"] == 0
        assert not (tmp_path / "run" / "grad_probe.json").exists()

    def test_resume_matches_uninterrupted_run(self, dataset, tmp_path):
        cfg = _config(dataset)
        index = _split(dataset)

        straight = TrainEngine(cfg, tmp_path / "a", index=index)
        straight.run()

        first = TrainEngine(cfg, tmp_path / "b", index=index)
        first.run(stop_epoch=1)
        resumed = TrainEngine(cfg, tmp_path / "b", index=index)
        resumed.resume(tmp_path / "b" / "checkpoints" / LAST_CHECKPOINT)
        resumed.run()

        assert resumed.state.iteration == straight.state.iteration
        _assert_same_weights(straight.state, resumed.state)
        log_a = MetricsLog(tmp_path / "a" / "metrics.jsonl")
        log_b = MetricsLog(tmp_path / "b" / "metrics.jsonl")
        train_a = [r for r in log_a.records() if r["kind"] == "train"]
        train_b = [r for r in log_b.records() if r["kind"] == "train"]
        assert len(train_a) == 4
        for rec_a, rec_b in zip(train_a, train_b, strict=True):
            assert rec_a == rec_b
        assert log_a.sha256() == log_b.sha256()

    def test_same_seed_runs_are_identical(self, dataset, tmp_path):
        cfg = _config(dataset)
        index = _split(dataset)
        first = TrainEngine(cfg, tmp_path / "a", index=index)
        first.run()
        second = TrainEngine(cfg, tmp_path / "b", index=index)
        second.run()
        _assert_same_weights(first.state, second.state)
        assert first.metrics.sha256() == second.metrics.sha256()

    def test_empty_unlabelled_pool_warns(self, dataset, tmp_path, caplog):
        with caplog.at_level(logging.WARNING, logger="trainer.engine"):
            engine = TrainEngine(_config(dataset), tmp_path / "run")
        assert engine.unlabelled_pool == engine.index.labelled
        assert any("no unlabelled items" in r.getMessage() for r in caplog.records)

    def test_partitioned_split_does_not_warn(self, dataset, tmp_path, caplog):
        with caplog.at_level(logging.WARNING, logger="trainer.engine"):
            TrainEngine(_config(dataset), tmp_path / "run", index=_split(dataset))
        assert not any("no unlabelled items" in r.getMessage() for r in caplog.records)

    def test_teachers_from_checkpoint(self, dataset, tmp_path):
        engine = TrainEngine(_config(dataset, **{"optim.epochs": 1}), tmp_path / "run", index=_split(dataset))
        engine.run()
        pair, cfg = teachers_from_checkpoint(tmp_path / "run" / "checkpoints" / LAST_CHECKPOINT)
        assert pair.cursor == engine.state.teachers.cursor
        assert torch.equal(pair.t1.flatten_parameters(), engine.state.teachers.t1.flatten_parameters())
        assert cfg.optim.epochs == 1

    def test_non_finite_loss_aborts_with_dump(self, dataset, tmp_path, monkeypatch):
        engine = TrainEngine(_config(dataset), tmp_path / "run", index=_split(dataset))
        monkeypatch.setattr(engine_mod, "supervised_loss", lambda *a, **k: torch.tensor(float("nan")))
        with pytest.raises(TrainingAborted) as info:
            engine.run()
        dump = json.loads((tmp_path / "run" / NAN_DUMP_FILE).read_text())
        assert info.value.dump_path.endswith(NAN_DUMP_FILE)
        assert dump["iteration"] == 0
        assert len(dump["labelled_ids"]) == 2

    def test_class_count_mismatch(self, dataset, tmp_path):
        cfg = _config(dataset, **{"model.num_classes": 3})
        with pytest.raises(ConfigError, match="classes"):
            TrainEngine(cfg, tmp_path / "run")

    def test_no_labelled_items(self, dataset, tmp_path):
        index = DatasetIndex(root=dataset, labelled=[], unlabelled=["train_0000"], num_classes=4)
        with pytest.raises(ConfigError, match="no labelled"):
            TrainEngine(_config(dataset), tmp_path / "run", index=index)


# ---------------------------------------------------------------------------
# Gradient probe
# ---------------------------------------------------------------------------

class TestGradientProbe:

    def test_mse_zero_when_teachers_equal_student(self, dataset):
        state = TrainState.initial(_config(dataset))
        images = torch.rand((2, 3, 32, 32), generator=torch.Generator().manual_seed(0))
        mse = gradient_magnitude_probe(state.student, state.teachers, images, "mse", tau=0.0)
        ce = gradient_magnitude_probe(state.student, state.teachers, images, "conf_ce", tau=0.0)
        assert list(mse) == list(state.student.layer_modules())
        for layer in mse:
            assert mse[layer] == 0.0
            assert ce[layer] > mse[layer]

    def test_zero_confidence_gives_zero_conf_ce_gradients(self, dataset):
        state = TrainState.initial(_config(dataset))
        images = torch.rand((2, 3, 32, 32), generator=torch.Generator().manual_seed(2))
        ce = gradient_magnitude_probe(state.student, state.teachers, images, "conf_ce", tau=0.9999)
        assert list(ce) == list(state.student.layer_modules())
        assert all(value == 0.0 for value in ce.values())

    def test_conf_ce_dominates_mse_on_trained_model(self, dataset):
        cfg = _config(dataset, **{"model.strides": [1, 1, 1]})
        index = DatasetIndex.load(dataset / "splits" / "full.json")
        state = TrainState.initial(cfg)
        assert _fit_until_accurate(state, index) >= 0.9

        # student drifts a few steps past the teachers, as under EMA
        batch = load_batch(index, index.labelled, "labelled")
        opt = torch.optim.Adam(state.student.parameters(), lr=1e-2)
        for _ in range(10):
            opt.zero_grad(set_to_none=True)
            supervised_loss(torch.softmax(state.student(batch.images), dim=1), batch.masks).backward()
            opt.step()
        assert evaluate_split(state.teachers, index).pixel_accuracy >= 0.9

        probe = probe_both_modes(state, batch.images)
        for layer in probe["layers"]:
            assert probe["mse"][layer] > 0.0
            assert probe["conf_ce"][layer] > probe["mse"][layer], layer

    def test_probe_has_no_side_effects(self, dataset):
        state = TrainState.initial(_config(dataset))
        state.student.train()
        images = torch.rand((2, 3, 32, 32), generator=torch.Generator().manual_seed(1))
        before = state.student.flatten_parameters()
        rng_before = copy.deepcopy(state.rngs.aug.bit_generator.state)
        probe = probe_both_modes(state, images)
        assert probe["layers"] == list(state.student.layer_modules())
        assert torch.equal(state.student.flatten_parameters(), before)
        assert all(p.grad is None for p in state.student.parameters())
        assert state.student.training
        assert state.rngs.aug.bit_generator.state == rng_before

    def test_unknown_mode(self, dataset):
        state = TrainState.initial(_config(dataset))
        with pytest.raises(ConfigError):
            gradient_magnitude_probe(state.student, state.teachers, torch.zeros(1, 3, 32, 32), "kl", 0.0)

    def test_pair_from_student_copy(self):
        state = TrainState.initial(RunConfig())
        pair = TeacherPair.from_student(state.student)
        assert torch.equal(pair.t1.flatten_parameters(), state.student.flatten_parameters())


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

def _runs(rows: list[tuple]) -> pd.DataFrame:
    return pd.DataFrame(
        [{"arm": a, "ratio": r, "seed": s, "status": st, "miou": m, "pixel_accuracy": None, "error": e, "run_dir": ""}
         for a, r, s, st, m, e in rows]
    )


class TestAblation:

    def test_arm_overrides(self):
        cfg = BUILTIN_ARMS["mt_mse"].apply(RunConfig())
        assert cfg.loss.mode == "mse"
        assert cfg.perturb.tvat.mode == "off"
        assert not cfg.teachers.aux_teacher
        full = BUILTIN_ARMS["full"].apply(RunConfig())
        assert full.teachers.aux_teacher and full.perturb.tvat.mode == "tvat"

    def test_unknown_arm(self):
        with pytest.raises(ConfigError, match="unknown ablation arm"):
            resolve_arms(["full", "magic"])

    def test_aggregate_mean_and_population_std(self):
        runs = _runs([
            ("full", "full", 0, "ok", 0.5, ""),
            ("full", "full", 1, "ok", 0.7, ""),
            ("mt_mse", "full", 0, "failed", None, "DataError: x"),
        ])
        table = aggregate_runs(runs, ["mt_mse", "full"])
        assert list(table.columns) == ABLATION_COLUMNS
        assert list(table["arm"]) == ["mt_mse", "full"]
        full = table[table["arm"] == "full"].iloc[0]
        assert full["miou_mean"] == pytest.approx(0.6)
        assert full["miou_std"] == pytest.approx(0.1)
        failed = table[table["arm"] == "mt_mse"].iloc[0]
        assert failed["n_failed"] == 1 and failed["error"] == "DataError: x"
        assert "failed" in format_table(table)

    def test_runner_collects_failures(self, dataset, tmp_path):
        cfg = _config(dataset, **{"optim.epochs": 1, "run.grad_probe": False})
        broken = AblationArm("broken", {"loss.cam": True, "data.pseudo_dir": str(tmp_path / "missing")})
        runner = AblationRunner(cfg, [BUILTIN_ARMS["full"], broken], seeds=[0], out_dir=tmp_path / "ablate")
        table = runner.run()
        assert (tmp_path / "ablate" / "ablation.csv").exists()
        runs = pd.read_csv(tmp_path / "ablate" / "runs.csv")
        assert list(runs["status"]) == ["ok", "failed"]
        row = table[table["arm"] == "broken"].iloc[0]
        assert row["n_ok"] == 0 and "pseudo-label" in row["error"]
        assert 0.0 <= table[table["arm"] == "full"].iloc[0]["miou_mean"] <= 1.0

    def test_ratio_sweep_writes_split_manifests(self, dataset, tmp_path):
        cfg = _config(dataset)
        runner = AblationRunner(cfg, [BUILTIN_ARMS["full"]], seeds=[0, 1], out_dir=tmp_path / "ablate", ratios=["1/2"])
        jobs = runner.jobs()
        assert len(jobs) == 2
        for job in jobs:
            split = DatasetIndex.load(job["config"]["data"]["split"])
            assert len(split.labelled) == 4
            assert job["config"]["seed"] == job["seed"]

    @pytest.mark.parametrize("kwargs", [{"arms": []}, {"seeds": []}, {"workers": 0}])
    def test_runner_argument_checks(self, tmp_path, kwargs):
        args = {"arms": [BUILTIN_ARMS["full"]], "seeds": [0], "workers": 1}
        args.update(kwargs)
        with pytest.raises(ConfigError):
            AblationRunner(RunConfig(), args["arms"], args["seeds"], tmp_path, workers=args["workers"])
