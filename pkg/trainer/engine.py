"""
PSMT — Training engine

One training step, in order:
  1. weak-augment the labelled and unlabelled batches
  2. teachers predict on the weak unlabelled views (no gradients)
  3. pick one input-perturbation branch (CutMix / Zoom / both / none),
     transform the student's unlabelled input and the teacher targets
     together, then strong-augment every student input
  4. T-VAT: adversarial feature perturbation from the teacher ensemble,
     injected into the student's encoder features
  5. total = ℓ_sup + β(t)·ℓ_con (+ w_cam·ℓ_cam)
  6. SGD step on the student only (polynomial LR decay)
  7. EMA update of the cursor teacher (per iteration or per epoch)

Epoch boundary: (per-epoch EMA) → cursor flip → validation mIoU →
checkpoint every k epochs and at the end.

A non-finite loss writes nan_dump.json into the run directory and raises
TrainingAborted.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from data_loader.dataset import (
    Batch,
    DatasetIndex,
    check_pseudo_labels,
    load_batch,
    load_pseudo_labels,
)
from src.config import GRAD_PROBE_FILE, METRICS_FILE
from src.errors import ConfigError, NonFiniteError, TrainingAborted
from src.evaluation import evaluate_split
from src.losses import LossReport, beta_at, cam_loss, consistency_loss, supervised_loss
from src.perturb.augment import strong_augment_batch, weak_augment_batch
from src.perturb.cutmix import cutmix_after_prediction, cutmix_combine, sample_batch_masks, stack_masks
from src.perturb.tvat import feature_perturbation
from src.perturb.zoom import zoom_consistency_targets, zoom_images, zoom_labels
from src.run_config import RunConfig
from trainer.probe import probe_both_modes
from trainer.results import MetricsLog, TrainResult
from trainer.state import TrainState, seed_everything

log = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoints"
LAST_CHECKPOINT = "last.pt"
NAN_DUMP_FILE = "nan_dump.json"


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

def lr_at(config: RunConfig, iteration: int, max_iter: int) -> float:
    """lr0 · (1 − iter/max_iter)^power."""
    if max_iter <= 0:
        return config.optim.lr0
    if not 0 <= iteration <= max_iter:
        raise ConfigError(f"iteration {iteration} outside [0, {max_iter}]")
    return config.optim.lr0 * (1.0 - iteration / max_iter) ** config.optim.poly_power


def iterations_per_epoch(index: DatasetIndex, config: RunConfig) -> int:
    """One pass over the unlabelled pool (the labelled pool when there is none)."""
    if index.unlabelled:
        return math.ceil(len(index.unlabelled) / config.optim.batch_unlabelled)
    return math.ceil(len(index.labelled) / config.optim.batch_labelled)


def _ramp_position(state: TrainState) -> int:
    return state.iteration if state.config.ramp.unit == "iter" else state.epoch


def choose_branch(policy: str, cutmix_mode: str, rng: np.random.Generator) -> tuple[bool, bool]:
    """(use_cutmix, use_zoom) for this batch."""
    if policy == "random":
        use_cutmix = bool(rng.random() < 0.5)
        use_zoom = not use_cutmix
    else:
        use_cutmix = policy in ("cutmix", "both")
        use_zoom = policy in ("zoom", "both")
    return use_cutmix and cutmix_mode != "off", use_zoom


# ---------------------------------------------------------------------------
# One step
# ---------------------------------------------------------------------------

def train_step(
    state: TrainState,
    labelled: Batch,
    unlabelled: Batch,
    pseudo: torch.Tensor | None = None,
) -> tuple[TrainState, LossReport]:
    """
    One optimisation step of the student plus the per-iteration EMA update.

    The adversarial feature perturbation is drawn separately for the
    unlabelled and the labelled pass: under Zoom their feature maps have
    different spatial sizes, so one r_adv cannot serve both.
    """
    cfg = state.config
    arch = state.student.arch
    ignore = arch.ignore_index
    spec = cfg.perturb
    rng = state.rngs.aug
    student, pair = state.student, state.teachers
    student.train()

    # (1) weak views
    xl, yl, _ = weak_augment_batch(labelled.images, labelled.masks, rng, spec.weak_aug, ignore)
    xu, pseudo, _ = weak_augment_batch(unlabelled.images, pseudo, rng, spec.weak_aug, ignore)

    # (2)-(3) teacher targets and the input-perturbation branch
    use_cutmix, use_zoom = choose_branch(spec.branch, spec.cutmix.mode, rng)
    x_student = xu
    if use_cutmix:
        masks = stack_masks(sample_batch_masks(xu.shape[0], xu.shape[-2], xu.shape[-1], spec.cutmix, rng)).to(xu.dtype)
        x_student = cutmix_combine(xu, xu.roll(1, dims=0), masks)
        if spec.cutmix.mode == "after":
            pred = pair.predict(xu, cfg.teachers.tau)
            target = cutmix_after_prediction(pred, pred.roll(1), masks)
        else:
            target = pair.predict(x_student, cfg.teachers.tau)
        if pseudo is not None:
            pseudo = cutmix_combine(pseudo, pseudo.roll(1, dims=0), masks)
    else:
        target = pair.predict(xu, cfg.teachers.tau)
    if use_zoom:
        zoom = spec.zoom.draw(rng, multiple=arch.downsample_factor)
        x_student = zoom_images(x_student, zoom)
        target = zoom_consistency_targets(target, zoom)
        if pseudo is not None:
            pseudo = zoom_labels(pseudo, zoom)

    xs_u = strong_augment_batch(x_student, rng, spec.strong_aug)
    xs_l = strong_augment_batch(xl, rng, spec.strong_aug)

    # (4) feature perturbation
    z_u = student.encode(xs_u)
    r_u = feature_perturbation(z_u, spec.tvat, pair=pair, student=student, generator=state.rngs.tvat)
    z_l = student.encode(xs_l)
    r_l = None
    if spec.tvat.on_labelled:
        r_l = feature_perturbation(z_l, spec.tvat, pair=pair, student=student, generator=state.rngs.tvat)

    p_u = torch.softmax(student.decode(z_u if r_u is None else z_u + r_u), dim=1)
    p_l = torch.softmax(student.decode(z_l if r_l is None else z_l + r_l), dim=1)

    # (5) objective
    beta = beta_at(cfg.ramp, _ramp_position(state))
    sup = supervised_loss(p_l, yl, ignore)
    con = consistency_loss(cfg.loss.mode, p_u, target)
    total = sup + beta * con
    cam = None
    if cfg.loss.cam:
        cam = cam_loss(p_u, pseudo, target.confidence, ignore)
        total = total + cfg.loss.cam_weight * cam

    report = LossReport(
        sup=float(sup.detach()),
        con=float(con.detach()),
        beta_t=beta,
        cam=None if cam is None else float(cam.detach()),
        cam_weight=cfg.loss.cam_weight,
    )
    if not (torch.isfinite(total.detach()) and report.is_finite()):
        raise NonFiniteError(f"non-finite loss {report.to_dict()}", iteration=state.iteration)

    # (6) SGD on the student
    lr = lr_at(cfg, state.iteration, state.max_iter)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()

    # (7) EMA
    if cfg.teachers.ema_cadence == "iter":
        pair.ema_update(student)

    state.iteration += 1
    state.history.append(report)
    return state, report


# ---------------------------------------------------------------------------
# TrainEngine
# ---------------------------------------------------------------------------

class TrainEngine:
    """
    Epoch loop around `train_step`, with metrics, validation and checkpoints.

    Parameters
    ----------
    config    : resolved RunConfig (validated here)
    run_dir   : directory receiving metrics.jsonl, checkpoints/, summary.json
    index     : training split (defaults to config.data.split_path())
    val_index : validation split (defaults to config.data.val_split_path(), if present)
    """

    def __init__(
        self,
        config: RunConfig,
        run_dir: str | Path,
        index: DatasetIndex | None = None,
        val_index: DatasetIndex | None = None,
    ) -> None:
        self.config = config.validate()
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        seed_everything(config.seed, config.run.deterministic)

        self.index = index or DatasetIndex.load(config.data.split_path())
        if not self.index.labelled:
            raise ConfigError(f"split {self.index.name!r} has no labelled items")
        if self.index.num_classes != config.model.num_classes:
            raise ConfigError(
                f"split has {self.index.num_classes} classes but model.num_classes is {config.model.num_classes}"
            )
        self.val_index = val_index if val_index is not None else self._load_val_index()

        if not self.index.unlabelled:
            log.warning(
                "Split %r has no unlabelled items — the consistency loss reuses the labelled images "
                "(create a partition with `psmt.py split --ratio ...` and set data.split)",
                self.index.name,
            )
        self.unlabelled_pool = list(self.index.unlabelled) or list(self.index.labelled)
        if config.loss.cam:
            check_pseudo_labels(config.data.pseudo_dir, self.unlabelled_pool)

        self.iters_per_epoch = iterations_per_epoch(self.index, config)
        self.metrics = MetricsLog(self.run_dir / METRICS_FILE)
        self.state = TrainState.initial(
            config,
            labelled_ids=self.index.labelled,
            unlabelled_ids=self.unlabelled_pool,
            max_iter=config.optim.epochs * self.iters_per_epoch,
        )
        if not self.state.optimizer_binds_only_student():
            raise ConfigError("optimizer must bind exactly the student parameters")

    def _load_val_index(self) -> DatasetIndex | None:
        path = self.config.data.val_split_path()
        if path is None:
            return None
        if not path.exists():
            log.warning("Validation split %s not found — per-epoch mIoU disabled", path)
            return None
        return DatasetIndex.load(path)

    @property
    def checkpoint_dir(self) -> Path:
        return self.run_dir / CHECKPOINT_DIR

    # ------------------------------------------------------------------
    # Resume
    # ------------------------------------------------------------------

    def resume(self, checkpoint: str | Path) -> "TrainEngine":
        self.state.load_checkpoint(checkpoint)
        dropped = self.metrics.truncate_after(self.state.iteration)
        if dropped:
            log.info("Dropped %d metric records past the checkpoint", dropped)
        return self

    # ------------------------------------------------------------------
    # Steps
    # ------------------------------------------------------------------

    def step(self, labelled: Batch, unlabelled: Batch, pseudo: torch.Tensor | None = None) -> LossReport:
        try:
            _, report = train_step(self.state, labelled, unlabelled, pseudo)
        except NonFiniteError as exc:
            dump = self._write_nan_dump(labelled, unlabelled, exc)
            raise TrainingAborted(f"training aborted: {exc}", dump_path=str(dump)) from exc
        return report

    def _write_nan_dump(self, labelled: Batch, unlabelled: Batch, exc: NonFiniteError) -> Path:
        last = self.state.history[-1].to_dict() if self.state.history else None
        dump = {
            "error": str(exc),
            "epoch": self.state.epoch,
            "iteration": self.state.iteration if exc.iteration is None else exc.iteration,
            "labelled_ids": labelled.ids,
            "unlabelled_ids": unlabelled.ids,
            "last_finite_losses": last,
        }
        path = self.run_dir / NAN_DUMP_FILE
        path.write_text(json.dumps(dump, indent=2, default=str) + "\n", encoding="utf-8")
        log.error("Non-finite loss at iteration %d — diagnostic dump %s", dump["iteration"], path)
        return path

    def _next_batches(self) -> tuple[Batch, Batch, torch.Tensor | None]:
        lab_ids = self.state.labelled_sampler.next_ids()
        unl_ids = self.state.unlabelled_sampler.next_ids()
        labelled = load_batch(self.index, lab_ids, "labelled")
        unlabelled = load_batch(self.index, unl_ids, "unlabelled")
        pseudo = None
        if self.config.loss.cam:
            pseudo = load_pseudo_labels(self.config.data.pseudo_dir, unl_ids, self.index.num_classes)
        return labelled, unlabelled, pseudo

    # ------------------------------------------------------------------
    # Epoch loop
    # ------------------------------------------------------------------

    def run(self, stop_epoch: int | None = None) -> TrainResult:
        """Train up to `config.optim.epochs` (or `stop_epoch`, for interrupted runs)."""
        cfg = self.config
        state = self.state
        end_epoch = cfg.optim.epochs if stop_epoch is None else min(stop_epoch, cfg.optim.epochs)
        val_miou: list[float] = []
        last_report: LossReport | None = None

        log.info(
            "Training %d epochs × %d iterations | %s",
            cfg.optim.epochs, self.iters_per_epoch, cfg.summary(),
        )
        if state.epoch >= end_epoch:
            self.save_checkpoint()

        while state.epoch < end_epoch:
            epoch_reports: list[LossReport] = []
            for _ in range(self.iters_per_epoch):
                labelled, unlabelled, pseudo = self._next_batches()
                lr = lr_at(cfg, state.iteration, state.max_iter)
                report = self.step(labelled, unlabelled, pseudo)
                epoch_reports.append(report)
                self.metrics.append({
                    "kind": "train",
                    "epoch": state.epoch,
                    "iter": state.iteration,
                    "sup": report.sup,
                    "con": report.con,
                    "cam": report.cam,
                    "beta": report.beta_t,
                    "lr": lr,
                    "total": report.total,
                })
                log.debug("iter %d %s", state.iteration, report.to_dict())
            last_report = epoch_reports[-1]

            if cfg.teachers.ema_cadence == "epoch":
                state.teachers.ema_update(state.student)
            state.teachers.advance_epoch()
            state.epoch += 1

            miou_text = "n/a"
            if self.val_index is not None:
                result = evaluate_split(state.teachers, self.val_index)
                val_miou.append(result.miou)
                miou_text = f"{result.miou:.4f}"
                self.metrics.append({
                    "kind": "val",
                    "epoch": state.epoch - 1,
                    "iter": state.iteration,
                    "miou": result.miou,
                    "pixel_accuracy": result.pixel_accuracy,
                })

            mean = {k: float(np.mean([getattr(r, k) for r in epoch_reports])) for k in ("sup", "con")}
            log.info(
                "Epoch %d/%d  sup=%.4f con=%.4f β=%.4f lr=%.5f val_mIoU=%s",
                state.epoch, cfg.optim.epochs, mean["sup"], mean["con"],
                last_report.beta_t, lr_at(cfg, state.iteration, state.max_iter), miou_text,
            )

            if state.epoch % cfg.run.checkpoint_every == 0 or state.epoch == end_epoch:
                self.save_checkpoint()

        return self._finish(val_miou, last_report)

    def save_checkpoint(self) -> Path:
        path = self.state.save_checkpoint(self.checkpoint_dir / f"epoch_{self.state.epoch:04d}.pt")
        self.state.save_checkpoint(self.checkpoint_dir / LAST_CHECKPOINT)
        return path

    def _finish(self, val_miou: list[float], last_report: LossReport | None) -> TrainResult:
        state = self.state
        finished = state.epoch >= self.config.optim.epochs
        if finished and self.config.run.grad_probe and state.epoch > 0:
            self.write_grad_probe()

        result = TrainResult(
            run_dir=str(self.run_dir),
            epochs=state.epoch,
            iterations=state.iteration,
            final_loss=last_report.to_dict() if last_report else None,
            val_miou=val_miou,
            final_miou=val_miou[-1] if val_miou else None,
            checkpoint=str(self.checkpoint_dir / LAST_CHECKPOINT),
            metrics_sha256=self.metrics.sha256(),
        )
        if finished and self.val_index is not None and not val_miou:
            final = evaluate_split(state.teachers, self.val_index)
            result.final_miou = final.miou
            result.final_pixel_accuracy = final.pixel_accuracy
        result.save()
        return result

    def write_grad_probe(self) -> Path:
        """Per-layer consistency-gradient magnitudes for both loss modes on a fixed batch."""
        ids = self.unlabelled_pool[: self.config.optim.batch_unlabelled]
        batch = load_batch(self.index, ids, "unlabelled")
        probe = probe_both_modes(self.state, batch.images)
        path = self.run_dir / GRAD_PROBE_FILE
        path.write_text(json.dumps(probe, indent=2) + "\n", encoding="utf-8")
        log.info("Gradient probe → %s", path)
        return path


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def run_training(
    config: RunConfig,
    run_dir: str | Path,
    resume: str | Path | None = None,
    index: DatasetIndex | None = None,
    val_index: DatasetIndex | None = None,
) -> tuple[TrainState, TrainResult]:
    engine = TrainEngine(config, run_dir, index=index, val_index=val_index)
    if resume is not None:
        engine.resume(resume)
    result = engine.run()
    log.info("Training finished: %s", result.summary())
    return engine.state, result
