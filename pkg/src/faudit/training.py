"""Seeded training loop: Adam/AdamW, optional grad clipping, early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import _ModelBase, predict_proba
from .optim import AdamState, adam_step, clip_grad_norm


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    clip_norm: float | None = None
    patience: int = 6
    seed: int = 0
    # train-time augmentation (validation/test always see clean images)
    aug_d4: bool = False  # random square-symmetry transform (rot90 + flips)
    aug_dropout: float = 0.0  # per image, zero a U[0, aug_dropout] fraction of pixels
    aug_noise: float = 0.0  # additive Gaussian sigma


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_balanced_acc: float
    val_acc: float
    grad_norm: float


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_val_balanced_acc: float
    best_epoch: int
    stopped_epoch: int

    def to_jsonable(self) -> dict:
        return {
            "history": [vars(e) for e in self.history],
            "best_val_balanced_acc": self.best_val_balanced_acc,
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
        }


def balanced_accuracy(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Mean per-class recall over the classes present in y_true."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise TrainingError("balanced accuracy of an empty label set")
    recalls = []
    for cls in np.unique(y_true):
        sel = y_true == cls
        recalls.append(float((y_pred[sel] == cls).mean()))
    return float(np.mean(recalls))


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    scores = []
    for cls in np.unique(y_true):
        tp = float(np.sum((y_pred == cls) & (y_true == cls)))
        fp = float(np.sum((y_pred == cls) & (y_true != cls)))
        fn = float(np.sum((y_pred != cls) & (y_true == cls)))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def evaluate(model: _ModelBase, images: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(balanced accuracy, plain accuracy) on a labelled batch."""
    preds = predict_proba(model, images).argmax(axis=1)
    return balanced_accuracy(labels, preds), float((preds == labels).mean())


def augment_batch(images: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the configured train-time augmentations to a [n,c,h,w] batch.

    The input is never modified; with every augmentation disabled the batch
    is returned as-is and the RNG is not consumed.
    """
    if not (cfg.aug_d4 or cfg.aug_dropout > 0.0 or cfg.aug_noise > 0.0):
        return images
    out = images.copy()
    n = len(out)
    if cfg.aug_d4:
        ks = rng.integers(0, 4, size=n)
        flips = rng.integers(0, 2, size=n)
        for i in range(n):
            img = np.rot90(out[i], k=int(ks[i]), axes=(1, 2))
            if flips[i]:
                img = img[:, :, ::-1]
            out[i] = img
    if cfg.aug_dropout > 0.0:
        h, w = out.shape[-2:]
        qs = rng.uniform(0.0, cfg.aug_dropout, size=n)
        drops = rng.random((n, 1, h, w)) < qs[:, None, None, None]
        out[np.broadcast_to(drops, out.shape)] = 0.0
    if cfg.aug_noise > 0.0:
        out += rng.normal(0.0, cfg.aug_noise, size=out.shape)
    return out


def train(
    model: _ModelBase,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
    cfg: TrainConfig,
) -> TrainResult:
    """Train in place; restores the best-validation parameters before returning."""
    if len(train_images) == 0:
        raise TrainingError("empty training split")
    if len(val_images) == 0:
        raise TrainingError("empty validation split")
    train_labels = np.asarray(train_labels, dtype=np.int64)
    val_labels = np.asarray(val_labels, dtype=np.int64)

    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list[EpochStats] = []
    best = -1.0
    best_epoch = -1
    best_state: dict[str, np.ndarray] | None = None
    stale = 0

    n = len(train_images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        last_norm = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = T.Tensor(augment_batch(train_images[idx], cfg, rng))
            model.zero_grad()
            fwd = model.forward(xb, record_attn=False)
            loss = T.cross_entropy(fwd.logits, train_labels[idx])
            lval = loss.item()
            if not np.isfinite(lval):
                raise TrainingError(f"training diverged (loss={lval}) at epoch {epoch}", epoch)
            T.backward(loss)
            grads = model.grads()
            if cfg.clip_norm is not None:
                last_norm = clip_grad_norm(grads, cfg.clip_norm)
            else:
                last_norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
            adam_step(model.params, grads, state)
            losses.append(lval)

        val_bal, val_acc = evaluate(model, val_images, val_labels)
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                val_balanced_acc=val_bal,
                val_acc=val_acc,
                grad_norm=last_norm,
            )
        )
        if val_bal > best:
            best = val_bal
            best_epoch = epoch
            best_state = model.state_arrays()
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break

    if best_state is not None:
        model.load_state_arrays(best_state)
    return TrainResult(
        history=history,
        best_val_balanced_acc=best,
        best_epoch=best_epoch,
        stopped_epoch=history[-1].epoch,
    )
