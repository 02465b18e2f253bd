"""Training loop and benchmark-style evaluation."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import ImagePair, PatchSampler, bicubic_upscale, quantize, sample_batch
from .metrics import psnr, ssim
from .model import IstarModel
from .tensor import NonFiniteError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    halve_every: int = 200          # epochs
    epochs: int = 1000
    steps_per_epoch: int = 1        # desk-scale stand-in for one pass over DIV2K
    batch: int = 16
    patch: int = 48
    seed: int = 0
    checkpoint_every: int = 0       # steps; 0 = only the final checkpoint
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.halve_every < 1 or self.steps_per_epoch < 1:
            raise ValueError("halve_every and steps_per_epoch must be >= 1")
        if self.batch < 1 or self.patch < 1 or self.epochs < 1:
            raise ValueError("batch, patch and epochs must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * 0.5 ** (epoch // self.halve_every)


@dataclass
class LossRecord:
    step: int
    epoch: int
    lr: float
    loss: float

    def row(self) -> list[str]:
        return [str(self.step), str(self.epoch), repr(self.lr), repr(self.loss)]


def l1_loss(pred: ad.Node, target) -> ad.Node:
    """Mean absolute error as a differentiable scalar."""
    target = ad.constant(target, dtype=pred.value.dtype)
    return ad.mean_abs(ad.sub(pred, target))


def train_step(model: IstarModel, lr_batch, hr_batch, lr: float, cfg: TrainConfig) -> float:
    loss = l1_loss(model(lr_batch), hr_batch)
    ad.backward(loss)
    ad.adam_step(model.params, lr, cfg.beta1, cfg.beta2, cfg.eps)
    return float(loss.value[0])


LOSS_HEADER = ["step", "epoch", "lr", "loss"]


def train(model: IstarModel, pairs: list[ImagePair], cfg: TrainConfig, out_dir=None,
          start_step: int = 0, stop_step: int | None = None) -> list[LossRecord]:
    """Run steps ``start_step .. stop_step-1`` (default: to the end of training).

    Batches are a pure function of (seed, step) and the optimizer state lives
    in the model's ParamStore, so a run resumed from a checkpoint written at
    step s reproduces the uninterrupted run exactly.  With ``out_dir`` the
    loss log goes to ``loss.csv`` (rows at or after ``start_step`` are
    rewritten) and checkpoints to ``ckpt_XXXXXX.istar`` / ``last.istar``.
    """
    if not pairs:
        raise ValueError("dataset is empty")
    stop = cfg.total_steps if stop_step is None else min(stop_step, cfg.total_steps)
    sampler = PatchSampler(cfg.patch, cfg.seed, cfg.augment, step=start_step)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh, writer = _open_loss_log(out / "loss.csv", start_step)

    records = []
    try:
        for step in range(start_step, stop):
            epoch = step // cfg.steps_per_epoch
            lr = cfg.lr_at(epoch)
            lr_b, hr_b = sample_batch(sampler, pairs, cfg.batch)
            try:
                rec = LossRecord(step, epoch, lr, train_step(model, lr_b, hr_b, lr, cfg))
            except NonFiniteError as exc:
                raise NonFiniteError(f"{exc.where} at training step {step}") from None
            records.append(rec)
            if writer is not None:
                writer.writerow(rec.row())
                fh.flush()
            if step % 50 == 0:
                log.info("step %d epoch %d lr %.3g loss %.6f", step, epoch, lr, rec.loss)
            done = step + 1
            if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_training_checkpoint(model, out / f"ckpt_{done:06d}.istar", done)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_training_checkpoint(model, out / "last.istar", stop)
    return records


def _open_loss_log(path: Path, start_step: int):
    kept = []
    if start_step > 0 and path.exists():
        with open(path, newline="") as fh:
            kept = [row for row in csv.reader(fh)][1:]
        kept = [row for row in kept if int(row[0]) < start_step]
    fh = open(path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(LOSS_HEADER)
    writer.writerows(kept)
    return fh, writer


def save_training_checkpoint(model: IstarModel, path, step: int) -> None:
    model.save(path, optimizer=True, meta={"state.step": step})


def read_loss_log(path) -> list[LossRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossRecord(int(r["step"]), int(r["epoch"]), float(r["lr"]), float(r["loss"]))
            for r in rows]


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    scale: int
    shave: int
    mode: str = "Y"
    names: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "psnr_db", "ssim"])
            for row in zip(self.names, self.psnr, self.ssim):
                w.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}"])

    def table(self) -> str:
        lines = [f"{'image':<20} {'PSNR(dB)':>10} {'SSIM':>8}"]
        lines += [f"{n:<20} {p:>10.4f} {s:>8.4f}" for n, p, s in zip(self.names, self.psnr, self.ssim)]
        lines.append(f"{'mean':<20} {self.mean_psnr:>10.4f} {self.mean_ssim:>8.4f}")
        return "\n".join(lines)


def bicubic_model(scale: int):
    return lambda lr: bicubic_upscale(lr, scale)


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("ISTAR_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(model, pairs: list[ImagePair], scale: int, mode: str = "Y",
             workers: int | None = None) -> EvalReport:
    """Full-image SR, clip + 8-bit quantization, then PSNR/SSIM with shave = scale.

    ``model`` is an :class:`IstarModel` or any callable mapping a (3, H, W)
    LR image to a (3, rH, rW) SR image.  Images may be processed on several
    threads (``ISTAR_THREADS``); the report keeps dataset order.
    """
    upscale = model.predict if isinstance(model, IstarModel) else model

    def one(pair: ImagePair):
        sr = quantize(upscale(pair.lr))
        return psnr(sr, pair.hr, scale, mode), ssim(sr, pair.hr, scale, mode)

    workers = workers or _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(p) for p in pairs]
    report = EvalReport(scale=scale, shave=scale, mode=mode)
    for pair, (p, s) in zip(pairs, results):
        report.names.append(pair.source)
        report.psnr.append(p)
        report.ssim.append(s)
    return report
