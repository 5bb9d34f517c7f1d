"""Loss functions, Adam, k-fold splitting, early stopping, and the
training loop.

Binary heads (num_classes == 1) train with fused sigmoid + binary
cross-entropy; softmax heads with fused per-pixel softmax + categorical
cross-entropy.  Both losses are means over every pixel in the batch.
Everything is seeded and deterministic: the same seeds produce bit-identical
histories on one platform.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import metrics, model as model_mod
from .autograd import Tape
from .data import Sample
from .ops import sigmoid, softmax_channels


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or invalid setup)."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 4
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "beta1", "beta2", "epsilon",
                     "batch_size", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must be <= max_epochs")


class AdamState:
    """First/second moment buffers mirroring the parameter shapes."""

    def __init__(self, params):
        self.m = {p.name: np.zeros_like(p.value, dtype=np.float64) for p in params}
        self.v = {p.name: np.zeros_like(p.value, dtype=np.float64) for p in params}
        self.t = 0


def adam_step(params, state: AdamState, cfg: TrainConfig) -> None:
    """One Adam update from each parameter's ``grad`` slot."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for p in params:
        g = p.grad.astype(np.float64)
        m = state.m[p.name] = b1 * state.m[p.name] + (1.0 - b1) * g
        v = state.v[p.name] = b2 * state.v[p.name] + (1.0 - b2) * g * g
        step = cfg.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + cfg.epsilon)
        p.value = (p.value.astype(np.float64) - step).astype(p.value.dtype)


def kfold_split(n: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle, then contiguous partition into k folds.

    Returns (train_indices, val_indices) per fold; validation sets are
    disjoint, cover 0..n-1, and their sizes differ by at most one.
    """
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    sizes = np.full(k, n // k)
    sizes[:n % k] += 1
    folds = []
    start = 0
    for size in sizes:
        val = order[start:start + size]
        train = np.concatenate([order[:start], order[start + size:]])
        folds.append((np.sort(train), np.sort(val)))
        start += size
    return folds


# ---------------------------------------------------------------- losses

def cross_entropy_loss(probs: np.ndarray, target: np.ndarray) -> float:
    """Mean per-pixel categorical cross-entropy of probabilities against a
    one-hot target, with probabilities clamped at 1e-7."""
    if probs.shape != target.shape:
        raise ValueError(f"probs shape {probs.shape} != target {target.shape}")
    p = np.clip(probs.astype(np.float64), 1e-7, None)
    n, _, h, w = probs.shape
    return float(-(target.astype(np.float64) * np.log(p)).sum() / (n * h * w))


def binary_cross_entropy_loss(probs: np.ndarray, target: np.ndarray) -> float:
    if probs.shape != target.shape:
        raise ValueError(f"probs shape {probs.shape} != target {target.shape}")
    p = np.clip(probs.astype(np.float64), 1e-7, 1.0 - 1e-7)
    t = target.astype(np.float64)
    n, _, h, w = probs.shape
    total = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum()
    return float(total / (n * h * w))


def one_hot(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """(n,1,h,w) integer-valued mask -> (n,C,h,w) one-hot float32."""
    labels = mask[:, 0].astype(np.int64)
    out = np.zeros((mask.shape[0], num_classes) + mask.shape[2:], dtype=np.float32)
    for c in range(num_classes):
        out[:, c][labels == c] = 1.0
    return out


# ---------------------------------------------------------- history rows

@dataclass
class HistoryRow:
    fold: int
    epoch: int
    train_loss: float
    val_loss: float
    val_jaccard: float
    val_dice: float


HISTORY_COLUMNS = ("fold", "epoch", "train_loss", "val_loss",
                   "val_jaccard", "val_dice")


def write_history_csv(rows: list[HistoryRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(HISTORY_COLUMNS)
        for r in rows:
            writer.writerow([r.fold, r.epoch,
                             f"{r.train_loss:.6g}", f"{r.val_loss:.6g}",
                             f"{r.val_jaccard:.6g}", f"{r.val_dice:.6g}"])


def read_history_csv(path) -> list[HistoryRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            rows.append(HistoryRow(int(rec["fold"]), int(rec["epoch"]),
                                   float(rec["train_loss"]),
                                   float(rec["val_loss"]),
                                   float(rec["val_jaccard"]),
                                   float(rec["val_dice"])))
    return rows


# ------------------------------------------------------------ early stop

class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly lower
    validation loss; remembers which epoch was best."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.strikes = 0

    def update(self, val_loss: float, epoch: int) -> bool:
        """Record an epoch; returns True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.strikes = 0
        else:
            self.strikes += 1
        return self.strikes >= self.patience


# ------------------------------------------------------------- train loop

def _batches(indices, batch_size):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def evaluate_model(model, samples: list[Sample], batch_size: int = 4
                   ) -> tuple[float, float, float]:
    """(loss, mean Jaccard, mean Dice) over a sample list.

    Jaccard/Dice are per-sample values averaged over the set: foreground
    scores for binary heads, unweighted class means for softmax heads.
    """
    cfg = model.config
    total_loss = 0.0
    jacc, dice = [], []
    count = 0
    for batch_idx in _batches(np.arange(len(samples)), batch_size):
        x = np.concatenate([samples[i].image for i in batch_idx])
        mask = np.concatenate([samples[i].mask for i in batch_idx])
        logits = model_mod.forward(model, x)
        if cfg.num_classes == 1:
            probs = sigmoid(logits)
            loss = binary_cross_entropy_loss(probs, mask)
            pred = metrics.binarize(probs)
            for j in range(len(batch_idx)):
                jacc.append(metrics.jaccard(mask[j], pred[j]))
                dice.append(metrics.dice(mask[j], pred[j]))
        else:
            probs = softmax_channels(logits)
            loss = cross_entropy_loss(probs, one_hot(mask, cfg.num_classes))
            pred = metrics.argmax_channels(probs)
            for j in range(len(batch_idx)):
                jacc.append(metrics.mean_iou(mask[j], pred[j], cfg.num_classes))
                dice.append(metrics.mean_dice(mask[j], pred[j], cfg.num_classes))
        total_loss += loss * len(batch_idx)
        count += len(batch_idx)
    return total_loss / count, float(np.mean(jacc)), float(np.mean(dice))


@dataclass
class TrainResult:
    history: list[HistoryRow]
    best_epoch: int
    best_val_loss: float
    best_val_jaccard: float
    best_val_dice: float
    best_params: dict = field(repr=False, default_factory=dict)


def train(model, train_samples: list[Sample], val_samples: list[Sample],
          cfg: TrainConfig, fold: int = 0,
          jaccard_goal: Optional[float] = None) -> TrainResult:
    """Mini-batch training with Adam and validation-loss early stopping.

    Per epoch: seeded shuffle, forward/backward/Adam on every batch, then
    validation loss + Jaccard + Dice.  The model is left holding the weights
    of the best-validation-loss epoch, which are also returned.  An optional
    ``jaccard_goal`` stops as soon as validation Jaccard reaches it.
    """
    if not train_samples or not val_samples:
        raise TrainingError("train and validation sets must be non-empty")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, fold]))
    params = model.parameters()
    state = AdamState(params)
    stopper = EarlyStopping(cfg.patience)
    num_classes = model.config.num_classes
    history: list[HistoryRow] = []
    best = None

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_samples))
        epoch_loss = 0.0
        seen = 0
        for b, batch_idx in enumerate(_batches(order, cfg.batch_size)):
            x = np.concatenate([train_samples[i].image for i in batch_idx])
            mask = np.concatenate([train_samples[i].mask for i in batch_idx])
            tape = Tape()
            trace = model_mod.run_forward(model, x, tape)
            if num_classes == 1:
                loss_id = tape.sigmoid_binary_cross_entropy(trace.logits_id, mask)
            else:
                target = one_hot(mask, num_classes)
                loss_id = tape.softmax_cross_entropy(trace.logits_id, target)
            loss = float(tape.value(loss_id))
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch "
                                    f"{epoch}, batch {b}")
            tape.backward(loss_id)
            adam_step(params, state, cfg)
            epoch_loss += loss * len(batch_idx)
            seen += len(batch_idx)

        val_loss, val_jacc, val_dice = evaluate_model(model, val_samples,
                                                      cfg.batch_size)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append(HistoryRow(fold, epoch, epoch_loss / seen, val_loss,
                                  val_jacc, val_dice))
        if val_loss < stopper.best:
            best = TrainResult(
                history=history, best_epoch=epoch, best_val_loss=val_loss,
                best_val_jaccard=val_jacc, best_val_dice=val_dice,
                best_params={p.name: p.value.copy() for p in params})
        if stopper.update(val_loss, epoch):
            break
        if jaccard_goal is not None and val_jacc >= jaccard_goal:
            break

    for p in params:  # leave the model at its best epoch
        p.value = best.best_params[p.name].copy()
    best.history = history
    return best
