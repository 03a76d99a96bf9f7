"""
PSMT — Run configuration tree

Resolved per run, in order (later layers win):

    defaults (src.config)  →  JSON file  →  dotted overrides  →  $PSMT_SEED

Usage
-----
    from src.run_config import load_run_config

    cfg = load_run_config("data/psmt_config.json", overrides=["optim.lr0=0.02", "tvat.epsilon=1.0"])
    cfg.teachers.tau          # 0.8
    cfg.to_dict()             # plain key-value tree, round-trips through RunConfig.from_dict

Config File
-----------
A plain JSON tree whose sections mirror the dataclasses below.  Any key the
tree does not know raises ConfigError naming the dotted key.  Perturbation
keys may be written with or without the "perturb." prefix
("tvat.epsilon" ≡ "perturb.tvat.epsilon").

Example psmt_config.json:
{
    "optim": {"epochs": 40, "lr0": 0.01},
    "teachers": {"tau": 0.8},
    "perturb": {"tvat": {"epsilon": 2.0}, "cutmix": {"mode": "after"}}
}
"""

from __future__ import annotations

import copy
import json
import logging
import os
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from src.config import (
    AUX_TEACHER,
    BATCH_LABELLED,
    BATCH_UNLABELLED,
    CAM_WEIGHT,
    CHECKPOINT_EVERY,
    DATASET_DIR,
    EMA_CADENCE,
    EMA_GAMMA,
    EPOCHS,
    GAMMA_RAMP,
    LR0,
    MIN_IMAGE_SIDE,
    MOMENTUM,
    POLY_POWER,
    RUNS_DIR,
    SEED,
    SEED_ENV_VAR,
    TAU,
    WEIGHT_DECAY,
)
from src.errors import ConfigError
from src.losses import LOSS_MODES, RampSchedule
from src.model import ArchDescriptor
from src.perturb import PerturbationSpec

log = logging.getLogger(__name__)

EMA_CADENCES = ("iter", "epoch")
_PERTURB_SECTIONS = ("tvat", "cutmix", "zoom", "weak_aug", "strong_aug", "branch")


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------

@dataclass
class DataConfig:
    root: str = DATASET_DIR
    split: str = "splits/full.json"      # relative to root unless absolute
    val_split: str | None = "splits/val.json"
    pseudo_dir: str | None = None        # CAM pseudo-labels <pseudo_dir>/<id>.png

    def _resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.root) / p

    def split_path(self) -> Path:
        return self._resolve(self.split)

    def val_split_path(self) -> Path | None:
        return self._resolve(self.val_split) if self.val_split else None


@dataclass
class OptimConfig:
    epochs: int = EPOCHS
    batch_labelled: int = BATCH_LABELLED
    batch_unlabelled: int = BATCH_UNLABELLED
    lr0: float = LR0
    poly_power: float = POLY_POWER
    momentum: float = MOMENTUM
    weight_decay: float = WEIGHT_DECAY


@dataclass
class TeacherConfig:
    gamma: float = EMA_GAMMA
    tau: float = TAU
    ema_cadence: str = EMA_CADENCE
    gamma_ramp: bool = GAMMA_RAMP
    aux_teacher: bool = AUX_TEACHER


@dataclass
class LossConfig:
    mode: str = "conf_ce"
    cam: bool = False
    cam_weight: float = CAM_WEIGHT


@dataclass
class RunPaths:
    out_dir: str = RUNS_DIR
    checkpoint_every: int = CHECKPOINT_EVERY
    grad_probe: bool = True
    deterministic: bool = True


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ArchDescriptor = field(default_factory=ArchDescriptor)
    optim: OptimConfig = field(default_factory=OptimConfig)
    teachers: TeacherConfig = field(default_factory=TeacherConfig)
    ramp: RampSchedule = field(default_factory=RampSchedule)
    perturb: PerturbationSpec = field(default_factory=PerturbationSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    run: RunPaths = field(default_factory=RunPaths)
    seed: int = SEED

    # ------------------------------------------------------------------
    # Serialisation
    # ------------------------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        return _build(cls, _hoist_perturb_keys(dict(data)), "")

    def with_overrides(self, overrides: Mapping[str, Any] | Iterable[str]) -> "RunConfig":
        """New config with dotted overrides applied ({"optim.lr0": 0.02} or ["optim.lr0=0.02"])."""
        tree = self.to_dict()
        items = overrides.items() if isinstance(overrides, Mapping) else (parse_override(o) for o in overrides)
        for key, value in items:
            _set_dotted(tree, key, value)
        return RunConfig.from_dict(tree)

    # ------------------------------------------------------------------
    # Validation
    # ------------------------------------------------------------------

    def validate(self) -> "RunConfig":
        o = self.optim
        if o.epochs < 0:
            raise ConfigError(f"optim.epochs must be >= 0, got {o.epochs}")
        if o.batch_labelled < 1 or o.batch_unlabelled < 1:
            raise ConfigError("optim.batch_labelled and optim.batch_unlabelled must be >= 1")
        if o.lr0 <= 0 or o.poly_power <= 0:
            raise ConfigError("optim.lr0 and optim.poly_power must be positive")
        if not 0.0 <= o.momentum < 1.0 or o.weight_decay < 0:
            raise ConfigError("optim.momentum must lie in [0, 1) and optim.weight_decay be >= 0")

        t = self.teachers
        if not 0.0 < t.gamma < 1.0:
            raise ConfigError(f"teachers.gamma must lie in (0, 1), got {t.gamma}")
        if not 0.0 <= t.tau < 1.0:
            raise ConfigError(f"teachers.tau must lie in [0, 1), got {t.tau}")
        if t.ema_cadence not in EMA_CADENCES:
            raise ConfigError(f"teachers.ema_cadence must be one of {EMA_CADENCES}, got {t.ema_cadence!r}")

        if self.loss.mode not in LOSS_MODES:
            raise ConfigError(f"loss.mode must be one of {LOSS_MODES}, got {self.loss.mode!r}")
        if self.loss.cam_weight < 0:
            raise ConfigError(f"loss.cam_weight must be >= 0, got {self.loss.cam_weight}")
        if self.loss.cam and not self.data.pseudo_dir:
            raise ConfigError("loss.cam requires data.pseudo_dir")

        crop = self.perturb.weak_aug.crop
        f = self.model.downsample_factor
        if crop is not None and (crop < MIN_IMAGE_SIDE or crop % f):
            raise ConfigError(f"weak_aug.crop must be >= {MIN_IMAGE_SIDE} and divisible by {f}, got {crop}")
        if self.run.checkpoint_every < 1:
            raise ConfigError(f"run.checkpoint_every must be >= 1, got {self.run.checkpoint_every}")

        self.ramp.validate()
        self.perturb.validate()
        return self

    def summary(self) -> str:
        p = self.perturb
        return (
            f"loss={self.loss.mode} tvat={p.tvat.mode} cutmix={p.cutmix.mode} branch={p.branch} "
            f"aux_teacher={self.teachers.aux_teacher} τ={self.teachers.tau} γ={self.teachers.gamma} "
            f"β_max={self.ramp.beta_max} epochs={self.optim.epochs} seed={self.seed}"
        )


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def parse_override(text: str) -> tuple[str, Any]:
    """"a.b=value" → ("a.b", value) with JSON value parsing ("1/8" and bare words stay strings)."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_run_config(
    path: str | Path | None = None,
    overrides: Iterable[str] | Mapping[str, Any] = (),
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    tree = RunConfig().to_dict()
    if path is not None:
        path = Path(path)
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON ({exc})") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        _deep_merge(tree, _hoist_perturb_keys(loaded))
        log.debug("Loaded run config %s", path)

    cfg = RunConfig.from_dict(tree).with_overrides(overrides)

    env = os.environ if env is None else env
    if env.get(SEED_ENV_VAR):
        try:
            cfg.seed = int(env[SEED_ENV_VAR])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env[SEED_ENV_VAR]!r}") from exc
        log.info("Seed overridden from $%s: %d", SEED_ENV_VAR, cfg.seed)
    return cfg.validate()


def save_run_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Tree helpers
# ---------------------------------------------------------------------------

def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _hoist_perturb_keys(tree: dict) -> dict:
    """Move top-level perturbation sections ("tvat", "cutmix", ...) under "perturb"."""
    tree = copy.deepcopy(tree)
    moved = {k: tree.pop(k) for k in _PERTURB_SECTIONS if k in tree}
    if moved:
        perturb = tree.setdefault("perturb", {})
        if not isinstance(perturb, dict):
            raise ConfigError("config section 'perturb' must be a mapping")
        _deep_merge(perturb, moved)
    return tree


def _deep_merge(base: dict, extra: Mapping) -> None:
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = copy.deepcopy(value)


def _set_dotted(tree: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    if parts[0] in _PERTURB_SECTIONS:
        parts = ["perturb"] + parts
    node = tree
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key: {'.'.join(parts[:i + 1])}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {'.'.join(parts)}")
    node[parts[-1]] = value


def _build(cls: type, data: Any, prefix: str) -> Any:
    if not isinstance(data, Mapping):
        raise ConfigError(f"config section '{prefix.rstrip('.') or 'root'}' must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key: {prefix}{unknown[0]}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        hint = hints[f.name]
        key = f"{prefix}{f.name}"
        if is_dataclass(hint):
            kwargs[f.name] = _build(hint, data[f.name], key + ".")
        else:
            kwargs[f.name] = _coerce(data[f.name], hint, key)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid config section '{prefix.rstrip('.') or 'root'}': {exc}") from exc


def _coerce(value: Any, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {key} expects a list, got {value!r}")
        elem = args[0] if args else Any
        return tuple(_coerce(v, elem, key) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key} expects true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key} expects an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key} expects a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key {key} expects a string, got {value!r}")
        return value
    return value
