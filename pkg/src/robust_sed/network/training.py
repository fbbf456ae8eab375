"""Mini-batch training of the detector from labeled clips."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from .model import (
    DetectorParams, Formulation, Geometry, DESK_GEOMETRY, accuracy, bce_loss,
    forward, init_params, loss_and_grads,
)
from .optim import AdamState, adam_step

logger = logging.getLogger(__name__)


@dataclass
class ClipDataset:
    """Labeled clip patches with their context slices and provenance."""

    patches: np.ndarray
    labels: np.ndarray
    contexts: np.ndarray | None = None
    sensors: np.ndarray | None = None
    times: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.patches) != len(self.labels):
            raise ValueError("patches and labels differ in length")
        if self.contexts is not None and len(self.contexts) != len(self.labels):
            raise ValueError("contexts and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def subset(self, mask_or_idx) -> "ClipDataset":
        idx = np.asarray(mask_or_idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return ClipDataset(self.patches[idx], self.labels[idx], pick(self.contexts),
                           pick(self.sensors), pick(self.times), dict(self.meta))

    @staticmethod
    def concat(parts) -> "ClipDataset":
        parts = list(parts)
        cat = lambda name: (None if getattr(parts[0], name) is None  # noqa: E731
                            else np.concatenate([getattr(p, name) for p in parts]))
        return ClipDataset(cat("patches"), cat("labels"), cat("contexts"),
                           cat("sensors"), cat("times"), dict(parts[0].meta))


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    patience: int = 10
    lr: float = 1e-3
    l2: float = 1e-3
    seed: int = 0
    dtype: str = "float32"

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainingHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1

    def as_array(self, key):
        return np.array([e[key] for e in self.epochs])


def normalization_stats(data: ClipDataset) -> dict:
    stats = {"x_mean": float(np.mean(data.patches)), "x_std": float(np.std(data.patches) or 1.0)}
    if data.contexts is not None:
        stats["c_mean"] = float(np.mean(data.contexts))
        stats["c_std"] = float(np.std(data.contexts) or 1.0)
    return stats


def normalize_inputs(stats: dict | None, x, c=None, dtype=None):
    """Scalar standardization of patches and context slices."""
    x = np.asarray(x, dtype=dtype)
    if stats:
        x = (x - stats["x_mean"]) / stats["x_std"]
        if c is not None and "c_mean" in stats:
            c = (np.asarray(c, dtype=dtype) - stats["c_mean"]) / stats["c_std"]
    if c is not None:
        c = np.asarray(c, dtype=dtype)
    return (x if dtype is None else x.astype(dtype, copy=False)), c


def evaluate(params: DetectorParams, data: ClipDataset, l2: float = 0.0, batch: int = 256):
    """(loss, accuracy) of already-normalized data."""
    ys = []
    for i in range(0, len(data), batch):
        c = None if data.contexts is None else data.contexts[i : i + batch]
        if params.formulation == Formulation.STATIC:
            c = None
        a = forward(params, data.patches[i : i + batch], c)
        ys.append(1.0 / (1.0 + np.exp(-a.astype(np.float64))))
    y = np.concatenate(ys) if ys else np.empty(0)
    return bce_loss(y, data.labels, params, l2), accuracy(y, data.labels)


def _normalized(data: ClipDataset, stats, dtype) -> ClipDataset:
    x, c = normalize_inputs(stats, data.patches, data.contexts, dtype=dtype)
    return ClipDataset(x, data.labels, c, data.sensors, data.times, data.meta)


def train(
    data: ClipDataset,
    config: TrainConfig = TrainConfig(),
    formulation=Formulation.STATIC,
    geometry: Geometry = DESK_GEOMETRY,
    val: ClipDataset | None = None,
    init: DetectorParams | None = None,
) -> tuple[DetectorParams, TrainingHistory]:
    """Class-balanced mini-batch Adam on binary cross-entropy.

    With a validation set, the parameters with the best validation accuracy
    (ties broken by lower validation loss) are returned, and training stops
    after ``config.patience`` epochs without improvement.
    """
    formulation = Formulation.parse(formulation)
    labels = data.labels
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("training set must contain both positive and negative clips")
    if formulation != Formulation.STATIC and data.contexts is None:
        raise ValueError(f"formulation {formulation.value} needs context slices")

    dtype = np.dtype(config.dtype)
    rng = np.random.default_rng(config.seed)
    params = init.astype(dtype) if init is not None else init_params(
        geometry, formulation, seed=int(rng.integers(2**31)), dtype=dtype)
    if init is None:
        params.meta["normalization"] = normalization_stats(data)
    stats = params.meta.get("normalization")
    history = TrainingHistory()
    if config.epochs <= 0:
        return params, history

    train_n = _normalized(data, stats, dtype)
    val_n = _normalized(val, stats, dtype) if val is not None and len(val) else None
    ctx = train_n.contexts if formulation != Formulation.STATIC else None
    state = AdamState(lr=config.lr)
    half = max(1, config.batch_size // 2)
    steps = int(np.ceil(len(data) / config.batch_size))
    best = None
    best_key = None
    since_best = 0

    pos_perm, neg_perm = rng.permutation(pos), rng.permutation(neg)
    pi = ni = 0
    for epoch in range(config.epochs):
        losses = []
        for _ in range(steps):
            take = []
            for _ in range(half):
                if pi == len(pos_perm):
                    pos_perm, pi = rng.permutation(pos), 0
                if ni == len(neg_perm):
                    neg_perm, ni = rng.permutation(neg), 0
                take.append(pos_perm[pi])
                take.append(neg_perm[ni])
                pi += 1
                ni += 1
            idx = np.array(take)
            c = None if ctx is None else ctx[idx]
            loss, grads = loss_and_grads(params, train_n.patches[idx], c,
                                         train_n.labels[idx], l2=config.l2)
            adam_step(params.tensors, grads, state)
            losses.append(loss)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_n is not None:
            vloss, vacc = evaluate(params, val_n)
            record.update(val_loss=vloss, val_acc=vacc)
            key = (vacc, -vloss)
            if best_key is None or key > best_key:
                best_key, best, since_best = key, params.copy(), 0
                history.best_epoch = epoch
            else:
                since_best += 1
        history.epochs.append(record)
        logger.debug("epoch %d %s", epoch, record)
        if val_n is not None and since_best >= config.patience:
            break
    if best is not None:
        params = best
    else:
        history.best_epoch = len(history.epochs) - 1
    return params, history
