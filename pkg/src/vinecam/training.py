"""Adam with coupled L2 decay, reduce-on-plateau, early stopping and the fit loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .densenet import Model
from .errors import DataError, NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSettings:
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 20
    early_stop_patience: int = 5
    early_stop_min_delta: float = 0.001
    weight_decay: float = 1e-4
    plateau_factor: float = 0.1
    plateau_patience: int = 2
    min_lr: float = 1e-6
    dropout_rate: float = 0.4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "early_stop_patience", "eval_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.early_stop_min_delta < 0 or self.weight_decay < 0:
            raise ValueError("min_delta and weight_decay must be non-negative")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], t: int, **kw) -> "AdamState":
        st = cls(t=t, **kw)
        for key, a in arrays.items():
            if key.startswith("adam.m."):
                st.m[key[len("adam.m."):]] = a.copy()
            elif key.startswith("adam.v."):
                st.v[key[len("adam.v."):]] = a.copy()
        return st


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float, weight_decay: float = 0.0) -> None:
    """One Adam update, in place. L2 decay is added to the gradient before the moments."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# -- schedules ----------------------------------------------------------------

@dataclass
class PlateauState:
    lr: float
    best: float = math.inf
    since_improvement: int = 0


def plateau_step(state: PlateauState, val_loss: float, factor: float = 0.1, patience: int = 2,
                 min_lr: float = 1e-6, min_delta: float = 0.0) -> float:
    """Reduce the learning rate once the loss has stalled for more than ``patience`` epochs."""
    if not 0 < factor < 1:
        raise ValueError("factor must be in (0, 1)")
    if val_loss < state.best - min_delta:
        state.best = val_loss
        state.since_improvement = 0
    else:
        state.since_improvement += 1
    if state.since_improvement > patience:
        state.lr = max(state.lr * factor, min_lr)
        state.since_improvement = 0
    return state.lr


@dataclass
class EarlyStopState:
    best: float = math.inf
    since_improvement: int = 0
    stopped: bool = False


def early_stop_update(state: EarlyStopState, val_loss: float, patience: int = 5,
                      min_delta: float = 0.001) -> bool:
    """Record one epoch; returns True when training should stop."""
    if val_loss < state.best - min_delta:
        state.best = val_loss
        state.since_improvement = 0
    else:
        state.since_improvement += 1
    state.stopped = state.since_improvement >= patience
    return state.stopped


# -- history --------------------------------------------------------------------

HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr")


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in HISTORY_COLUMNS[1:]])

    def write_timing_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "seconds"))
            for r in self.rows:
                w.writerow([r["epoch"], f"{r.get('seconds', 0.0):.3f}"])

    @classmethod
    def read_csv(cls, path) -> "TrainHistory":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [{"epoch": int(r["epoch"]), **{c: float(r[c]) for c in HISTORY_COLUMNS[1:]}}
                    for r in csv.DictReader(fh)]
        return cls(rows)


# -- fit ------------------------------------------------------------------------

def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch, stream])))


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 64):
    """Eval-mode pass. Returns (mean loss, accuracy, probabilities)."""
    probs, total = [], 0.0
    for start in range(0, len(x), batch_size):
        xb = ad.Tensor(x[start:start + batch_size])
        yb = y[start:start + batch_size]
        logits = model.forward(xb, training=False)
        loss, p = ad.softmax_cross_entropy(ad.Tensor(logits.data.astype(np.float64)), yb)
        total += loss.item() * len(yb)
        probs.append(p)
    probs = np.concatenate(probs) if probs else np.zeros((0, model.cfg.num_classes))
    acc = float(np.mean(probs.argmax(axis=1) == y)) if len(y) else 0.0
    return total / max(len(y), 1), acc, probs


def train_step(model: Model, xb: np.ndarray, yb: np.ndarray, adam: AdamState, lr: float,
               weight_decay: float, rng: np.random.Generator | None = None):
    """Forward, backward and one Adam update on a batch. Returns (loss, #correct)."""
    model.zero_grad()
    with ad.Tape() as tape:
        logits = model.forward(ad.Tensor(xb), training=True, rng=rng)
        loss, probs = ad.softmax_cross_entropy(logits, yb)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"training loss became {value}; aborting")
    tape.backward(loss)
    params = {n: t.data for n, t in model.params.items()}
    grads = {n: t.grad for n, t in model.params.items()}
    adam_step(params, grads, adam, lr, weight_decay)
    return value, int(np.sum(probs.argmax(axis=1) == yb))


@dataclass
class FitState:
    """Everything needed to resume a fit after ``epoch`` completed epochs."""

    epoch: int
    adam: AdamState
    plateau: PlateauState
    early: EarlyStopState
    history: TrainHistory
    best_model: Model | None
    best_epoch: int = 0
    best_val_loss: float = math.inf

    def meta(self) -> dict:
        return {
            "epoch": self.epoch,
            "adam_t": self.adam.t,
            "plateau": asdict(self.plateau),
            "early": asdict(self.early),
            "history": [{k: v for k, v in r.items() if k != "seconds"} for r in self.history.rows],
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
        }

    @classmethod
    def from_meta(cls, meta: dict, arrays: dict, best_model: Model | None, settings: TrainSettings) -> "FitState":
        adam = AdamState.from_arrays(arrays, meta["adam_t"], beta1=settings.beta1, beta2=settings.beta2,
                                     eps=settings.adam_eps)
        return cls(meta["epoch"], adam, PlateauState(**meta["plateau"]), EarlyStopState(**meta["early"]),
                   TrainHistory([dict(r) for r in meta["history"]]), best_model,
                   meta["best_epoch"], meta["best_val_loss"])


@dataclass
class FitResult:
    best_model: Model
    history: TrainHistory
    best_epoch: int
    best_val_loss: float
    state: FitState


def fit(model: Model, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
        settings: TrainSettings, resume: FitState | None = None,
        on_improve: Callable[[Model, int, float], None] | None = None,
        on_epoch: Callable[[Model, FitState], None] | None = None) -> FitResult:
    """Train ``model`` in place and return the lowest-validation-loss snapshot.

    ``on_improve(model, epoch, val_loss)`` fires whenever validation loss
    improves; ``on_epoch(model, state)`` after every epoch (for resumable
    checkpoints).
    """
    x_tr, y_tr = train
    x_va, y_va = val
    if len(x_tr) == 0 or len(x_va) == 0:
        raise DataError("training and validation splits must be non-empty")
    if settings.batch_size > len(x_tr):
        raise DataError(f"batch size {settings.batch_size} exceeds the {len(x_tr)} training samples")
    y_tr = np.asarray(y_tr, dtype=np.int64)
    y_va = np.asarray(y_va, dtype=np.int64)

    state = resume or FitState(0, AdamState(beta1=settings.beta1, beta2=settings.beta2, eps=settings.adam_eps),
                               PlateauState(settings.learning_rate), EarlyStopState(), TrainHistory(), None)
    if state.early.stopped:
        log.info("resumed run had already stopped early")
    n = len(x_tr)
    while state.epoch < settings.max_epochs and not state.early.stopped:
        epoch = state.epoch + 1
        t0 = time.perf_counter()
        lr = state.plateau.lr
        order = _epoch_rng(settings.seed, epoch, 0).permutation(n)
        drop_rng = _epoch_rng(settings.seed, epoch, 1)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, settings.batch_size):
            idx = order[start:start + settings.batch_size]
            loss, ok = train_step(model, x_tr[idx], y_tr[idx], state.adam, lr, settings.weight_decay, drop_rng)
            loss_sum += loss * len(idx)
            correct += ok
        val_loss, val_acc, _ = evaluate(model, x_va, y_va, settings.eval_batch_size)
        if not math.isfinite(val_loss):
            raise NumericError(f"validation loss became {val_loss} at epoch {epoch}")
        state.epoch = epoch
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_epoch = epoch
            state.best_model = model.copy()
            if on_improve:
                on_improve(state.best_model, epoch, val_loss)
        plateau_step(state.plateau, val_loss, settings.plateau_factor, settings.plateau_patience,
                     settings.min_lr, settings.early_stop_min_delta)
        early_stop_update(state.early, val_loss, settings.early_stop_patience, settings.early_stop_min_delta)
        state.history.append(epoch=epoch, train_loss=loss_sum / n, train_acc=correct / n,
                             val_loss=val_loss, val_acc=val_acc, lr=lr,
                             seconds=time.perf_counter() - t0)
        log.info("epoch %d  train_loss %.4f  train_acc %.4f  val_loss %.4f  val_acc %.4f  lr %.2e",
                 epoch, loss_sum / n, correct / n, val_loss, val_acc, lr)
        if on_epoch:
            on_epoch(model, state)
    if state.best_model is None:
        state.best_model = model.copy()
    return FitResult(state.best_model, state.history, state.best_epoch, state.best_val_loss, state)


def overfit_batch(model: Model, x: np.ndarray, y: np.ndarray, steps: int = 200, lr: float = 0.001,
                  weight_decay: float = 0.0, seed: int = 0) -> list[float]:
    """Drive ``steps`` Adam updates on one fixed batch; returns the per-step training losses."""
    adam = AdamState()
    rng = np.random.Generator(np.random.PCG64(seed))
    y = np.asarray(y, dtype=np.int64)
    return [train_step(model, x, y, adam, lr, weight_decay, rng)[0] for _ in range(steps)]
