"""
PSMT — Training state and checkpoint container

TrainState owns everything a training step mutates: the student, the teacher
pair, the SGD optimiser (bound to student parameters only), the counters,
the RNG streams and the two batch samplers.

Checkpoint file (torch.save of one dict):

    version              "psmt-ckpt-1"
    arch                 ArchDescriptor.to_dict()
    student/<name>       student state_dict entries
    teacher1/<name>      teacher 1 state_dict entries
    teacher2/<name>      teacher 2 state_dict entries
    ema_cursor, ema_steps
    optimizer            optimiser state_dict
    epoch, iteration, max_iter
    rng/aug, rng/tvat, rng/torch
    sampler/labelled, sampler/unlabelled
    config               resolved run-config tree
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from data_loader.dataset import CyclicSampler
from src.config import CHECKPOINT_VERSION
from src.errors import ConfigError, DataError
from src.model import ArchDescriptor, SegModel, build_model
from src.run_config import RunConfig
from src.teachers import TeacherPair

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

@dataclass
class RngStreams:
    """Independent substreams derived from the run seed."""

    aug: np.random.Generator          # augmentation draws, branch choice, masks, zoom
    tvat: torch.Generator             # adversarial probes / uniform noise
    labelled_seed: int
    unlabelled_seed: int

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        aug_ss, tvat_ss, lab_ss, unl_ss = np.random.SeedSequence(seed).spawn(4)
        tvat = torch.Generator().manual_seed(int(tvat_ss.generate_state(1)[0]))
        return cls(
            aug=np.random.default_rng(aug_ss),
            tvat=tvat,
            labelled_seed=int(lab_ss.generate_state(1)[0]),
            unlabelled_seed=int(unl_ss.generate_state(1)[0]),
        )


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# TrainState
# ---------------------------------------------------------------------------

def build_optimizer(student: SegModel, config: RunConfig) -> torch.optim.SGD:
    o = config.optim
    return torch.optim.SGD(
        student.parameters(), lr=o.lr0, momentum=o.momentum, weight_decay=o.weight_decay
    )


@dataclass
class TrainState:
    config: RunConfig
    student: SegModel
    teachers: TeacherPair
    optimizer: torch.optim.Optimizer
    rngs: RngStreams
    labelled_sampler: CyclicSampler | None = None
    unlabelled_sampler: CyclicSampler | None = None
    epoch: int = 0
    iteration: int = 0
    max_iter: int = 0
    history: list = field(default_factory=list)     # LossReports of this process

    @classmethod
    def initial(
        cls,
        config: RunConfig,
        labelled_ids: Sequence[str] = (),
        unlabelled_ids: Sequence[str] = (),
        max_iter: int = 0,
    ) -> "TrainState":
        """Fresh state: student from the arch seed, both teachers cloned from it."""
        student = build_model(config.model)
        teachers = TeacherPair.from_student(
            student,
            gamma=config.teachers.gamma,
            aux_teacher=config.teachers.aux_teacher,
            gamma_ramp=config.teachers.gamma_ramp,
        )
        rngs = RngStreams.from_seed(config.seed)
        lab = CyclicSampler(labelled_ids, config.optim.batch_labelled, rngs.labelled_seed) if labelled_ids else None
        unl = CyclicSampler(unlabelled_ids, config.optim.batch_unlabelled, rngs.unlabelled_seed) if unlabelled_ids else None
        return cls(
            config=config,
            student=student,
            teachers=teachers,
            optimizer=build_optimizer(student, config),
            rngs=rngs,
            labelled_sampler=lab,
            unlabelled_sampler=unl,
            max_iter=max_iter,
        )

    def optimizer_binds_only_student(self) -> bool:
        bound = {id(p) for group in self.optimizer.param_groups for p in group["params"]}
        student = {id(p) for p in self.student.parameters()}
        teachers = {id(p) for p in self.teachers.parameters()}
        return bound == student and not bound & teachers

    # ------------------------------------------------------------------
    # Checkpointing
    # ------------------------------------------------------------------

    def to_checkpoint(self) -> dict:
        ckpt: dict = {
            "version": CHECKPOINT_VERSION,
            "arch": self.student.arch.to_dict(),
            "ema_cursor": self.teachers.cursor,
            "ema_steps": self.teachers.ema_steps,
            "optimizer": self.optimizer.state_dict(),
            "epoch": self.epoch,
            "iteration": self.iteration,
            "max_iter": self.max_iter,
            "rng/aug": self.rngs.aug.bit_generator.state,
            "rng/tvat": self.rngs.tvat.get_state(),
            "rng/torch": torch.get_rng_state(),
            "sampler/labelled": self.labelled_sampler.state_dict() if self.labelled_sampler else None,
            "sampler/unlabelled": self.unlabelled_sampler.state_dict() if self.unlabelled_sampler else None,
            "config": self.config.to_dict(),
        }
        for prefix, model in (("student", self.student), ("teacher1", self.teachers.t1), ("teacher2", self.teachers.t2)):
            for name, tensor in model.state_dict().items():
                ckpt[f"{prefix}/{name}"] = tensor.detach().clone()
        return ckpt

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.to_checkpoint(), path)
        log.info("Checkpoint → %s (epoch %d, iteration %d)", path, self.epoch, self.iteration)
        return path

    def load_checkpoint(self, source: str | Path | dict) -> "TrainState":
        """Restore parameters, counters, RNG and sampler state in place."""
        ckpt = source if isinstance(source, dict) else read_checkpoint(source)
        arch = ArchDescriptor.from_dict(ckpt["arch"])
        if arch != self.student.arch:
            raise ConfigError(f"checkpoint architecture {arch} does not match configured {self.student.arch}")

        for prefix, model in (("student", self.student), ("teacher1", self.teachers.t1), ("teacher2", self.teachers.t2)):
            model.load_state_dict(_section(ckpt, prefix))
        self.teachers.cursor = ckpt["ema_cursor"]
        self.teachers.ema_steps = int(ckpt.get("ema_steps", 0))
        self.optimizer.load_state_dict(ckpt["optimizer"])
        self.epoch = int(ckpt["epoch"])
        self.iteration = int(ckpt["iteration"])
        self.max_iter = int(ckpt.get("max_iter", self.max_iter))
        self.rngs.aug.bit_generator.state = ckpt["rng/aug"]
        self.rngs.tvat.set_state(ckpt["rng/tvat"])
        torch.set_rng_state(ckpt["rng/torch"])
        if self.labelled_sampler and ckpt.get("sampler/labelled"):
            self.labelled_sampler.load_state_dict(ckpt["sampler/labelled"])
        if self.unlabelled_sampler and ckpt.get("sampler/unlabelled"):
            self.unlabelled_sampler.load_state_dict(ckpt["sampler/unlabelled"])
        log.info("Resumed from checkpoint at epoch %d, iteration %d", self.epoch, self.iteration)
        return self


def _section(ckpt: dict, prefix: str) -> dict:
    head = prefix + "/"
    return {k[len(head):]: v for k, v in ckpt.items() if k.startswith(head)}


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise DataError(path, "checkpoint not found") from exc
    except Exception as exc:
        raise DataError(path, f"unreadable checkpoint ({exc})") from exc
    if not isinstance(ckpt, dict) or ckpt.get("version") != CHECKPOINT_VERSION:
        found = ckpt.get("version") if isinstance(ckpt, dict) else type(ckpt).__name__
        raise DataError(path, f"unsupported checkpoint version {found!r} (expected {CHECKPOINT_VERSION!r})")
    return ckpt


def teachers_from_checkpoint(path: str | Path) -> tuple[TeacherPair, RunConfig]:
    """Teacher pair (plus its run config) for evaluation, without optimiser state."""
    ckpt = read_checkpoint(path)
    config = RunConfig.from_dict(ckpt["config"])
    arch = ArchDescriptor.from_dict(ckpt["arch"])
    t1, t2 = SegModel(arch), SegModel(arch)
    t1.load_state_dict(_section(ckpt, "teacher1"))
    t2.load_state_dict(_section(ckpt, "teacher2"))
    pair = TeacherPair(
        t1, t2,
        gamma=config.teachers.gamma,
        cursor=ckpt["ema_cursor"],
        aux_teacher=config.teachers.aux_teacher,
        gamma_ramp=config.teachers.gamma_ramp,
    )
    return pair, config
