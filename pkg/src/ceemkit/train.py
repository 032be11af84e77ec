"""Loss, optimiser, learning-rate schedule and the mini-batch training loop."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import LabeledDataset, normalize
from .errors import ShapeError, StratificationError, TrainingDivergedError
from .graph import ModelGraph
from .rng import Rng, derive_seed

LOG_HEADER = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "secs")
PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 16
    lr0: float = 0.75e-4
    decay: float = 0.96
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    seed: int = 0
    ratios: tuple[float, float, float] = (0.70, 0.20, 0.10)  # train, test, validation
    patience: int | None = None  # early stopping on validation loss; off by default
    record_time: bool = False  # fill the secs column with wall time

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise ValueError(f"split ratios must be non-negative and sum to 1, got {self.ratios}")
        self.ratios = tuple(float(r) for r in self.ratios)


# ---------------------------------------------------------------------------
# loss


def one_hot(labels, classes: int) -> np.ndarray:
    return np.eye(classes)[np.asarray(labels, dtype=np.int64)]


def cce_loss(probs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy and its gradient w.r.t. the softmax logits."""
    if probs.shape != targets.shape or probs.ndim != 2:
        raise ShapeError(f"probabilities {probs.shape} and one-hot targets {targets.shape} differ")
    B = probs.shape[0]
    p_true = np.maximum((probs * targets).sum(axis=1), PROB_FLOOR)
    loss = float(-np.log(p_true).mean())
    return loss, (probs - targets) / B


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7) -> dict[str, np.ndarray]:
    """Bias-corrected Adam; returns new parameter arrays and updates ``state`` in place."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    out = {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeError(f"{key}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(key)
        v = state.v.get(key)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[key], state.v[key] = m, v
        out[key] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out


def warmup_epochs(epochs: int) -> int:
    return max(1, epochs // 3)


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Constant ``lr0`` for the first third of training (``epochs // 3``, at least one epoch),
    then multiplied by ``cfg.decay`` once per further epoch."""
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.epochs}")
    warm = warmup_epochs(cfg.epochs)
    if epoch <= warm:
        return cfg.lr0
    return cfg.lr0 * cfg.decay ** (epoch - warm)


# ---------------------------------------------------------------------------
# splitting


def _stratum_counts(n: int, ratios) -> list[int]:
    counts = [int(math.floor(n * r)) for r in ratios]
    spare = n - sum(counts)
    for j, c in enumerate(counts):
        if c == 0 and ratios[j] > 0 and spare > 0:
            counts[j] += 1
            spare -= 1
    j = 0
    while spare > 0:
        counts[j % len(counts)] += 1
        spare -= 1
        j += 1
    for j, c in enumerate(counts):
        if c == 0 and ratios[j] > 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[j] += 1
    return counts


def stratified_split(labels, ratios=(0.70, 0.20, 0.10), seed: int = 0):
    """Per-class shuffled (train, test, val) index arrays.

    Each class gets floor(n * r) samples per part. Leftover samples first go
    to parts that would otherwise be empty, then to the parts in order (train
    first), one each; a part still empty borrows from the largest part.
    """
    labels = np.asarray(labels, dtype=np.int64)
    parts: list[list[int]] = [[] for _ in ratios]
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        if len(idx) < len(ratios):
            raise StratificationError(f"class {k} has {len(idx)} samples; need at least {len(ratios)}")
        idx = idx[Rng(derive_seed(seed, f"split/{k}")).permutation(len(idx))]
        counts = _stratum_counts(len(idx), ratios)
        start = 0
        for part, c in zip(parts, counts):
            part.extend(idx[start:start + c].tolist())
            start += c
    return tuple(np.array(sorted(p), dtype=np.int64) for p in parts)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in LOG_HEADER[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != LOG_HEADER:
            raise ValueError(f"unexpected TrainLog header {reader.fieldnames}")
        return cls([{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in reader])


def _param_key(lid: str, name: str) -> str:
    return f"{lid}/{name}"


def evaluate_loss(graph: ModelGraph, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> tuple[float, float]:
    """(mean CCE loss, accuracy) over an already-normalised set."""
    if len(x) == 0:
        return float("nan"), float("nan")
    probs = graph.predict_proba(x, batch_size)
    loss, _ = cce_loss(probs, one_hot(y, graph.classes))
    return loss, float((probs.argmax(axis=1) == y).mean())


@dataclass
class FitResult:
    graph: ModelGraph
    log: TrainLog
    adam: AdamState
    steps: int
    stopped_early: bool = False


def fit(graph: ModelGraph, train: LabeledDataset, cfg: TrainConfig,
        val: LabeledDataset | None = None, stop_at_train_acc: float | None = None,
        progress=None) -> FitResult:
    """Train ``graph`` in place.

    ``stop_at_train_acc`` ends training after the first epoch whose
    end-of-epoch training accuracy reaches the value (used by overfit checks).
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    if tuple(train.images.shape[1:]) != graph.input_shape:
        raise ShapeError(f"images {train.images.shape[1:]} do not match graph input {graph.input_shape}")
    x = normalize(train.images)
    y = train.labels
    xv = normalize(val.images) if val is not None and len(val) else np.zeros((0,) + graph.input_shape)
    yv = val.labels if val is not None and len(val) else np.zeros(0, dtype=np.int64)
    targets = one_hot(y, graph.classes)
    state = AdamState()
    log = TrainLog()
    steps = 0
    best, bad_epochs, stopped = math.inf, 0, False
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = lr_at_epoch(epoch, cfg)
        order = Rng(derive_seed(cfg.seed, f"epoch/{epoch}")).permutation(len(y))
        for b, start in enumerate(range(0, len(order), cfg.batch_size), start=1):
            idx = order[start:start + cfg.batch_size]
            probs = graph.forward(x[idx])
            loss, g = cce_loss(probs, targets[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss)
            grads = graph.backward(g)
            params = {_param_key(l, n): a for l, n, a in graph.parameters()}
            flat = {_param_key(l, n): d for l, ds in grads.items() for n, d in ds.items()}
            new = adam_step(params, flat, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            for l, n, _ in list(graph.parameters()):
                graph.set_parameter(l, n, new[_param_key(l, n)])
            steps += 1
        train_loss, train_acc = evaluate_loss(graph, x, y)
        if not math.isfinite(train_loss):
            raise TrainingDivergedError(epoch, b, train_loss)
        val_loss, val_acc = evaluate_loss(graph, xv, yv)
        secs = time.perf_counter() - t0 if cfg.record_time else 0.0
        row = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "train_acc": train_acc,
               "val_loss": val_loss, "val_acc": val_acc, "secs": secs}
        log.rows.append(row)
        if progress is not None:
            progress(row)
        if stop_at_train_acc is not None and train_acc >= stop_at_train_acc:
            stopped = True
            break
        if cfg.patience is not None and math.isfinite(val_loss):
            if val_loss < best:
                best, bad_epochs = val_loss, 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    stopped = True
                    break
    return FitResult(graph, log, state, steps, stopped)


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["ratios"] = list(cfg.ratios)
    return d
