"""Dice loss, Adam, reduce-on-plateau and the epoch loop."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, backward, derive_rng, make_rng, record
from .exceptions import ConfigError, ContractError, NumericalError, ValidationError
from .model import ArchConfig, FocusNetParams, build, forward

logger = logging.getLogger(__name__)


def dice_loss(prob: Tensor, gt, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s), pooled over the whole batch."""
    gt_data = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if gt_data.shape != prob.shape:
        raise ValidationError(f"prediction {prob.shape} and ground truth {gt_data.shape} differ in shape")
    if not np.isin(gt_data, (0, 1)).all():
        raise ValidationError("ground truth must be binary (0/1)")
    if smooth <= 0:
        raise ValidationError("smooth must be positive")
    p = prob.data.astype(np.float64)
    g = gt_data.astype(np.float64)
    # exactly rounded sums keep the loss within an ulp or so, which the
    # finite-difference checks on tiny gradients rely on
    inter = math.fsum((p * g).ravel())
    denom = math.fsum(p.ravel()) + math.fsum(g.ravel()) + smooth
    numer = 2.0 * inter + smooth
    value = math.fsum((p + g - 2.0 * p * g).ravel()) / denom
    out = Tensor(np.asarray(value, dtype=prob.dtype))

    def grad_fn(grad):
        d = -(2.0 * g * denom - numer) / (denom * denom)
        return ((float(grad) * d).astype(prob.dtype),)

    return record("dice_loss", (prob,), out, grad_fn)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """One bias-corrected Adam update; parameter arrays are replaced, not mutated."""
    missing = [name for name in params if name not in grads]
    if missing:
        raise ContractError(f"no gradient for parameter(s): {', '.join(missing[:5])}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, tensor in params.items():
        g = np.asarray(grads[name], dtype=tensor.dtype)
        if g.shape != tensor.shape:
            raise ContractError(f"gradient shape {g.shape} does not match {name} {tensor.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        tensor.data = (tensor.data - step).astype(tensor.dtype)
    return state


# ---------------------------------------------------------------------------
# plateau schedule


@dataclass
class PlateauState:
    lr: float = 1e-3
    factor: float = 0.5
    patience: int = 5
    min_delta: float = 1e-3
    best: float = math.inf
    wait: int = 0


def plateau_update(state: PlateauState, val_loss: float) -> tuple[PlateauState, bool]:
    """Improvement is ``best - val_loss > min_delta`` (strict).

    After ``patience`` consecutive non-improving epochs the rate is multiplied
    by ``factor`` and the counter restarts. No cooldown, no floor.
    """
    if state.best - val_loss > state.min_delta:
        state.best = val_loss
        state.wait = 0
        return state, False
    state.wait += 1
    if state.wait >= state.patience:
        state.lr *= state.factor
        state.wait = 0
        return state, True
    return state, False


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    max_epochs: int = 80
    batch_size: int = 8
    seed: int = 0
    smooth: float = 1.0
    lr: float = 1e-3
    checkpoint_path: str | None = None

    def validate(self) -> "TrainConfig":
        if self.max_epochs < 1 or self.batch_size < 1 or self.smooth <= 0 or self.lr <= 0:
            raise ConfigError("max_epochs, batch_size, smooth and lr must all be positive")
        return self


@dataclass
class CheckpointRecord:
    params: FocusNetParams
    best_val_loss: float
    epoch: int

    @property
    def cfg(self) -> ArchConfig:
        return self.params.cfg


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def _as_arrays(dataset):
    """Accept ``(images, masks)`` arrays or a sequence of samples with .image/.mask."""
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray):
        return dataset
    samples = getattr(dataset, "samples", dataset)
    images = np.stack([np.asarray(s.image) for s in samples])
    masks = np.stack([np.asarray(s.mask) for s in samples])
    return images, masks


def iter_batches(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def evaluate_loss(params: FocusNetParams, images, masks, batch_size=8, smooth=1.0) -> float:
    """Dice loss over the whole split in eval mode (one pooled ratio)."""
    inter = psum = gsum = 0.0
    for batch in iter_batches(len(images), batch_size):
        prob, _ = forward(params, Tensor(images[batch], dtype=params.dtype), "eval")
        p = prob.data.astype(np.float64)
        g = masks[batch].astype(np.float64)
        inter += float((p * g).sum())
        psum += float(p.sum())
        gsum += float(g.sum())
    return 1.0 - (2.0 * inter + smooth) / (psum + gsum + smooth)


def train(cfg: TrainConfig, arch: ArchConfig, train_set, val_set, rng=None, params=None, on_epoch=None):
    """Fit FocusNet; returns ``(history, best)``.

    Validation uses eval mode and the same pooled dice loss as training. The
    best record is a deep copy taken whenever validation loss strictly improves.
    """
    cfg.validate()
    arch.validate()
    x_tr, y_tr = _as_arrays(train_set)
    x_va, y_va = _as_arrays(val_set)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    for name, x in (("train", x_tr), ("validation", x_va)):
        if x.ndim != 4 or x.shape[1] != arch.in_channels:
            raise ConfigError(f"{name} images have shape {x.shape}, architecture expects {arch.in_channels} channels")
    rng = make_rng(cfg.seed if rng is None else rng)
    if params is None:
        params = build(arch, rng)
    tensors = params.tensors()
    adam = AdamState(lr=cfg.lr)
    plateau = PlateauState(lr=cfg.lr)
    history: list[EpochRecord] = []
    best: CheckpointRecord | None = None
    shuffle_seed = int(rng.integers(2**63))

    for epoch in range(cfg.max_epochs):
        epoch_rng = derive_rng(shuffle_seed, epoch)
        order = epoch_rng.permutation(len(x_tr))
        losses, weights = [], []
        for batch in iter_batches(len(x_tr), cfg.batch_size, order):
            with Tape() as tape:
                prob, _ = forward(params, Tensor(x_tr[batch], dtype=params.dtype), "train", epoch_rng)
                loss = dice_loss(prob, y_tr[batch], cfg.smooth)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            grads = backward(loss, tape, tensors)
            adam.lr = plateau.lr
            adam_step(tensors, grads, adam)
            losses.append(value)
            weights.append(len(batch))
        train_loss = float(np.average(losses, weights=weights))
        val_loss = evaluate_loss(params, x_va, y_va, cfg.batch_size, cfg.smooth)
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        record_ = EpochRecord(epoch, train_loss, val_loss, plateau.lr)
        history.append(record_)
        if best is None or val_loss < best.best_val_loss:
            best = CheckpointRecord(copy.deepcopy(params), val_loss, epoch)
            if cfg.checkpoint_path:
                from .checkpoint import save_checkpoint
                save_checkpoint(best, cfg.checkpoint_path)
        plateau_update(plateau, val_loss)
        logger.info("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, val_loss, record_.lr)
        if on_epoch is not None:
            on_epoch(record_, params)
    return history, best


def write_history_csv(history, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in history:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])
