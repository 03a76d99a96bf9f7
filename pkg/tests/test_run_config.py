"""
Unit Tests — Run configuration tree (defaults, JSON layering, overrides, env seed)

Run:
    pytest tests/test_run_config.py -v
"""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from src.config import DEFAULT_CONFIG_PATH, LR0, TAU
from src.errors import ConfigError
from src.run_config import RunConfig, load_run_config, parse_override, save_run_config

REPO_ROOT = Path(__file__).resolve().parent.parent


def _write(tmp_path, tree: dict) -> Path:
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tree))
    return path


# ---------------------------------------------------------------------------
# Defaults and layering
# ---------------------------------------------------------------------------

class TestLoadRunConfig:

    def test_defaults(self):
        cfg = load_run_config(env={})
        assert cfg.teachers.tau == TAU
        assert cfg.optim.lr0 == LR0
        assert cfg.loss.mode == "conf_ce"
        assert cfg.perturb.tvat.mode == "tvat"

    def test_shipped_config_loads(self):
        cfg = load_run_config(REPO_ROOT / DEFAULT_CONFIG_PATH, env={})
        assert cfg.model.num_classes == 4
        assert cfg.perturb.cutmix.mode == "after"

    def test_file_overrides_defaults_and_keeps_the_rest(self, tmp_path):
        path = _write(tmp_path, {"optim": {"epochs": 3}, "teachers": {"tau": 0.5}})
        cfg = load_run_config(path, env={})
        assert cfg.optim.epochs == 3
        assert cfg.teachers.tau == 0.5
        assert cfg.optim.lr0 == LR0

    def test_top_level_perturb_sections_hoisted(self, tmp_path):
        path = _write(tmp_path, {"tvat": {"epsilon": 1.5}})
        assert load_run_config(path, env={}).perturb.tvat.epsilon == 1.5

    def test_overrides_beat_file(self, tmp_path):
        path = _write(tmp_path, {"optim": {"lr0": 0.5}})
        cfg = load_run_config(path, overrides=["optim.lr0=0.02", "tvat.mode=vat", "cutmix.mode=off"], env={})
        assert cfg.optim.lr0 == 0.02
        assert cfg.perturb.tvat.mode == "vat"
        assert cfg.perturb.cutmix.mode == "off"

    def test_env_seed_beats_everything(self, tmp_path):
        path = _write(tmp_path, {"seed": 3})
        cfg = load_run_config(path, overrides=["seed=4"], env={"PSMT_SEED": "11"})
        assert cfg.seed == 11

    def test_bad_env_seed(self):
        with pytest.raises(ConfigError, match="PSMT_SEED"):
            load_run_config(env={"PSMT_SEED": "abc"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(tmp_path / "nope.json", env={})

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="valid JSON"):
            load_run_config(path, env={})


# ---------------------------------------------------------------------------
# Overrides
# ---------------------------------------------------------------------------

class TestOverrides:

    def test_parse_values(self):
        assert parse_override("optim.epochs=4") == ("optim.epochs", 4)
        assert parse_override("loss.cam=true") == ("loss.cam", True)
        assert parse_override("data.split=splits/x.json") == ("data.split", "splits/x.json")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="key=value"):
            parse_override("optim.epochs")

    def test_mapping_overrides(self):
        cfg = RunConfig().with_overrides({"teachers.gamma": 0.9, "model.widths": [8, 8], "model.strides": [2, 2]})
        assert cfg.teachers.gamma == 0.9
        assert cfg.model.widths == (8, 8)

    @pytest.mark.parametrize("key", ["optim.lr", "nonsense.x", "perturb.tvat.eps"])
    def test_unknown_key_named(self, key):
        with pytest.raises(ConfigError, match="unknown config key"):
            RunConfig().with_overrides({key: 1})

    def test_unknown_key_in_file(self, tmp_path):
        path = _write(tmp_path, {"optim": {"learning_rate": 0.1}})
        with pytest.raises(ConfigError, match="optim.learning_rate"):
            load_run_config(path, env={})

    def test_type_mismatch(self):
        with pytest.raises(ConfigError, match="integer"):
            RunConfig().with_overrides({"optim.epochs": "ten"})


# ---------------------------------------------------------------------------
# Serialisation and validation
# ---------------------------------------------------------------------------

class TestRoundTrip:

    def test_dict_round_trip(self):
        cfg = RunConfig().with_overrides(["tvat.epsilon=0.5", "zoom.scales=[0.5,1.5]", "weak_aug.crop=32"])
        again = RunConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert again.perturb.zoom.scales == (0.5, 1.5)

    def test_save_and_reload(self, tmp_path):
        cfg = RunConfig().with_overrides({"seed": 9})
        path = save_run_config(cfg, tmp_path / "sub" / "config.json")
        assert load_run_config(path, env={}) == cfg

    def test_summary_mentions_key_choices(self):
        text = RunConfig().summary()
        assert "loss=conf_ce" in text and "tvat=tvat" in text


class TestValidate:

    @pytest.mark.parametrize("overrides, fragment", [
        ({"optim.epochs": -1}, "optim.epochs"),
        ({"teachers.gamma": 1.0}, "gamma"),
        ({"teachers.tau": 1.0}, "tau"),
        ({"teachers.ema_cadence": "batch"}, "ema_cadence"),
        ({"loss.mode": "kl"}, "loss.mode"),
        ({"loss.cam": True}, "pseudo_dir"),
        ({"weak_aug.crop": 30}, "crop"),
        ({"run.checkpoint_every": 0}, "checkpoint_every"),
        ({"ramp.beta_max": -1.0}, "beta_max"),
    ])
    def test_rejected(self, overrides, fragment):
        with pytest.raises(ConfigError, match=fragment):
            RunConfig().with_overrides(overrides).validate()

    def test_defaults_valid(self):
        assert RunConfig().validate() is not None

    def test_paths_resolve_against_root(self):
        cfg = RunConfig().with_overrides({"data.root": "/tmp/ds"})
        assert cfg.data.split_path() == Path("/tmp/ds/splits/full.json")
        assert RunConfig().with_overrides({"data.val_split": None}).data.val_split_path() is None
