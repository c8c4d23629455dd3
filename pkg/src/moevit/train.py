"""Training loops: supervised classification, masked pre-training, evaluation.

Both loops share the same bookkeeping: per-step warmup+cosine LR, per-epoch
CSV log lines, periodic checkpoints carrying model weights, optimizer moments,
and RNG stream states. Because every random draw (shuffling, augmentation,
routing noise, dropout, masking) flows through named, checkpointable streams,
rerunning with a seed reproduces loss logs bit-for-bit and resuming from a
checkpoint continues the exact trajectory of an uninterrupted run.
"""

from __future__ import annotations

import math
import os

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentConfig, Dataset, iterate_batches
from .errors import CheckpointError
from .mae import MMLiT, mae_forward
from .model import MLiT
from .module import Module
from .optim import AdamW, Schedule, default_warmup_epochs, layerwise_lrs
from .rng import RngStreams


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the batch."""
    logp = ad.log_softmax_rows(logits)
    picked = ad.take_along_last(logp, np.asarray(labels).reshape(-1, 1))
    return -picked.mean()


def evaluate_accuracy(model: MLiT, ds: Dataset, batch_size: int = 256, aug: AugmentConfig | None = None) -> float:
    aug = aug if aug is not None else AugmentConfig()
    correct = 0
    with no_grad():
        for x, y in iterate_batches(ds, batch_size, aug, train=False):
            logits, _ = model(x, train=False)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    return correct / len(ds)


# -- checkpoint plumbing ------------------------------------------------------

def save_training_checkpoint(
    path: str, model: Module, optimizer: AdamW, streams: RngStreams, epoch: int, global_step: int, config: dict
) -> None:
    tensors = dict(model.state_arrays())
    tensors.update(optimizer.state_arrays())
    meta = {
        "config": config,
        "epoch": epoch,
        "global_step": global_step,
        "optimizer_step": optimizer.step_count,
        "rng": streams.state(),
    }
    save_checkpoint(path, tensors, meta)


def load_training_checkpoint(
    path: str, model: Module, optimizer: AdamW | None = None, streams: RngStreams | None = None
) -> dict:
    tensors, meta = load_checkpoint(path)
    model_arrays = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    model.load_state_arrays(model_arrays)
    if optimizer is not None:
        optimizer.load_state_arrays({k: v for k, v in tensors.items() if k.startswith("adam.")})
        optimizer.step_count = meta.get("optimizer_step", 0)
    if streams is not None:
        streams.set_state(meta["rng"])
    return meta


def load_encoder_weights(path: str, encoder: MLiT, reinit_head: bool = True) -> dict:
    """Pull `encoder.*` tensors from a pre-training checkpoint into a bare encoder."""
    tensors, meta = load_checkpoint(path)
    enc_arrays = {k[len("encoder.") :]: v for k, v in tensors.items() if k.startswith("encoder.")}
    if not enc_arrays:
        raise CheckpointError(f"{path}: no encoder tensors found")
    own = dict(encoder.named_parameters())
    for name, p in own.items():
        if name.startswith("head"):
            if reinit_head:
                continue  # keep the fresh initialization
        if name not in enc_arrays:
            raise CheckpointError(f"checkpoint missing encoder tensor '{name}'")
        arr = enc_arrays[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for 'encoder.{name}': checkpoint {arr.shape} vs model {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
    return meta


# -- loop scaffolding ---------------------------------------------------------

class _Loop:
    """Shared epoch/step/checkpoint machinery for the two training loops."""

    def __init__(
        self,
        model: Module,
        ds: Dataset,
        *,
        epochs: int,
        batch_size: int,
        base_lr: float,
        warmup_epochs: int | None,
        weight_decay: float,
        layerwise_decay: float | None,
        num_layers: int,
        seed: int,
        out_dir: str | None,
        save_every: int,
        resume: str | None,
        config: dict,
        log_fn=None,
        drop_last: bool = False,
    ):
        self.model = model
        self.ds = ds
        self.batch_size = batch_size
        self.epochs = epochs
        steps = len(ds) // batch_size if drop_last else math.ceil(len(ds) / batch_size)
        self.schedule = Schedule(
            base_lr=base_lr,
            batch_size=batch_size,
            total_epochs=epochs,
            warmup_epochs=warmup_epochs if warmup_epochs is not None else default_warmup_epochs(epochs),
            steps_per_epoch=max(1, steps),
        )
        multipliers = layerwise_lrs(num_layers, layerwise_decay) if layerwise_decay else None
        self.optimizer = AdamW(model.named_parameters(), weight_decay=weight_decay, lr_multipliers=multipliers)
        self.streams = RngStreams(seed)
        self.params = model.parameters()
        self.out_dir = out_dir
        self.save_every = save_every
        self.config = config
        self.log_fn = log_fn
        self.drop_last = drop_last
        self.global_step = 0
        self.start_epoch = 0
        self.log_lines: list[str] = []
        if resume:
            meta = load_training_checkpoint(resume, model, self.optimizer, self.streams)
            self.start_epoch = meta["epoch"] + 1
            self.global_step = meta["global_step"]

    def emit(self, line: str) -> None:
        self.log_lines.append(line)
        if self.log_fn is not None:
            self.log_fn(line)

    def checkpoint(self, epoch: int, tag: str | None = None) -> str | None:
        if self.out_dir is None:
            return None
        os.makedirs(self.out_dir, exist_ok=True)
        name = f"checkpoint_{tag}.bin" if tag else f"checkpoint_epoch{epoch:04d}.bin"
        path = os.path.join(self.out_dir, name)
        save_training_checkpoint(path, self.model, self.optimizer, self.streams, epoch, self.global_step, self.config)
        return path

def _epoch_line(epoch: int, parts: list[float], lr: float) -> str:
    return ",".join([str(epoch)] + [f"{p:.8e}" for p in parts] + [f"{lr:.8e}"])


def train_classifier(
    model: MLiT,
    ds: Dataset,
    *,
    epochs: int,
    batch_size: int,
    base_lr: float = 3e-4,
    warmup_epochs: int | None = None,
    weight_decay: float = 0.05,
    beta: float = 0.5,
    layerwise_decay: float | None = None,
    aug: AugmentConfig | None = None,
    seed: int = 0,
    out_dir: str | None = None,
    save_every: int = 0,
    resume: str | None = None,
    config: dict | None = None,
    log_fn=None,
    drop_last: bool = False,
) -> list[str]:
    """Cross-entropy + beta*aux supervised training; returns CSV log lines."""
    aug = aug if aug is not None else AugmentConfig()
    loop = _Loop(
        model,
        ds,
        epochs=epochs,
        batch_size=batch_size,
        base_lr=base_lr,
        warmup_epochs=warmup_epochs,
        weight_decay=weight_decay,
        layerwise_decay=layerwise_decay,
        num_layers=model.cfg.num_layers,
        seed=seed,
        out_dir=out_dir,
        save_every=save_every,
        resume=resume,
        config=config or {},
        log_fn=log_fn,
        drop_last=drop_last,
    )
    if loop.start_epoch == 0:
        loop.emit("epoch,loss,cross_entropy,aux,lr")
    for epoch in range(loop.start_epoch, loop.epochs):
        totals = np.zeros(3)
        batches = 0
        lr = 0.0
        for x, y in iterate_batches(
            ds, batch_size, aug, train=True,
            order_rng=loop.streams.data_order, augment_rng=loop.streams.augment, drop_last=drop_last,
        ):
            lr = loop.schedule.lr_at(loop.global_step)
            logits, aux = model(x, train=True, rng=loop.streams)
            ce = cross_entropy(logits, y)
            loss = ce + beta * aux
            ad.zero_grads(loop.params)
            ad.collect_grads(loss, loop.params)
            loop.optimizer.step(lr)
            totals += [loss.item(), ce.item(), aux.item()]
            batches += 1
            loop.global_step += 1
        loop.emit(_epoch_line(epoch, list(totals / batches), lr))
        if loop.save_every and (epoch + 1) % loop.save_every == 0:
            loop.checkpoint(epoch)
    loop.checkpoint(loop.epochs - 1, tag="final")
    return loop.log_lines


def pretrain_mae(
    model: MMLiT,
    ds: Dataset,
    *,
    epochs: int,
    batch_size: int,
    base_lr: float = 3e-4,
    warmup_epochs: int | None = None,
    weight_decay: float = 0.05,
    alpha: float = 0.1,
    beta: float = 0.5,
    mask_ratio: float = 0.75,
    decoder_aux: bool = True,
    aug: AugmentConfig | None = None,
    seed: int = 0,
    out_dir: str | None = None,
    save_every: int = 0,
    resume: str | None = None,
    config: dict | None = None,
    log_fn=None,
    drop_last: bool = False,
) -> list[str]:
    """Masked-reconstruction pre-training; returns CSV log lines."""
    aug = aug if aug is not None else AugmentConfig(crop_scale=(0.6, 1.0))
    loop = _Loop(
        model,
        ds,
        epochs=epochs,
        batch_size=batch_size,
        base_lr=base_lr,
        warmup_epochs=warmup_epochs,
        weight_decay=weight_decay,
        layerwise_decay=None,
        num_layers=model.encoder.cfg.num_layers,
        seed=seed,
        out_dir=out_dir,
        save_every=save_every,
        resume=resume,
        config=config or {},
        log_fn=log_fn,
        drop_last=drop_last,
    )
    if loop.start_epoch == 0:
        loop.emit("epoch,total,mse_masked,mse_unmasked,aux,lr")
    for epoch in range(loop.start_epoch, loop.epochs):
        totals = np.zeros(4)
        batches = 0
        lr = 0.0
        for x, _ in iterate_batches(
            ds, batch_size, aug, train=True,
            order_rng=loop.streams.data_order, augment_rng=loop.streams.augment, drop_last=drop_last,
        ):
            lr = loop.schedule.lr_at(loop.global_step)
            out = mae_forward(
                model, x, train=True, rng=loop.streams,
                alpha=alpha, beta=beta, decoder_aux=decoder_aux, mask_ratio=mask_ratio,
            )
            ad.zero_grads(loop.params)
            ad.collect_grads(out.total, loop.params)
            loop.optimizer.step(lr)
            totals += [out.total.item(), out.mse_masked.item(), out.mse_unmasked.item(), out.aux.item()]
            batches += 1
            loop.global_step += 1
        loop.emit(_epoch_line(epoch, list(totals / batches), lr))
        if loop.save_every and (epoch + 1) % loop.save_every == 0:
            loop.checkpoint(epoch)
    loop.checkpoint(loop.epochs - 1, tag="final")
    return loop.log_lines
