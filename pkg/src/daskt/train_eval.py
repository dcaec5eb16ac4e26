"""Metrics, minibatch training with early stopping, and pooled evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, ParamStore, clip_grad_norm
from .model import Batch, ModelConfig, build_params, forward, loss_fn

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Metrics:
    rmse: float
    acc: float
    auc: float
    r2: float
    n_predictions: int

    def as_row(self) -> dict:
        return {"rmse": self.rmse, "acc": self.acc, "auc": self.auc, "r2": self.r2, "n": self.n_predictions}


def _flat(preds, labels, mask=None):
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} differ in shape")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        preds, labels = preds[mask], labels[mask]
    preds, labels = preds.ravel(), labels.ravel()
    if preds.size == 0:
        raise ValueError("no predictions to score")
    return preds, labels


def rmse(preds, labels, mask=None) -> float:
    p, y = _flat(preds, labels, mask)
    return float(np.sqrt(np.mean((p - y) ** 2)))


def accuracy(preds, labels, mask=None, threshold: float = 0.5) -> float:
    p, y = _flat(preds, labels, mask)
    return float(np.mean((p >= threshold) == (y >= 0.5)))


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing their mean rank."""
    _, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    return (upper - (counts - 1) / 2.0)[inv]


def auc(preds, labels, mask=None) -> float:
    """Rank-based ROC AUC; tied scores earn half credit. NaN when one class is absent."""
    p, y = _flat(preds, labels, mask)
    pos = y >= 0.5
    n_pos = int(pos.sum())
    n_neg = p.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = average_ranks(p)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def r2(preds, labels, mask=None) -> float:
    """Squared Pearson correlation; 0 when either side is constant."""
    p, y = _flat(preds, labels, mask)
    pc, yc = p - p.mean(), y - y.mean()
    denom = np.sqrt((pc * pc).sum() * (yc * yc).sum())
    if denom == 0:
        return 0.0
    return float(((pc * yc).sum() / denom) ** 2)


def compute_metrics(preds, labels, mask=None) -> Metrics:
    p, y = _flat(preds, labels, mask)
    return Metrics(rmse(p, y), accuracy(p, y), auc(p, y), r2(p, y), int(p.size))


# --- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParamStore
    config: ModelConfig
    log_lines: list[str] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("nan")
    history: list[dict] = field(default_factory=list)


def predict(batch: Batch, params: ParamStore, cfg: ModelConfig, batch_size: int = 64) -> np.ndarray:
    """Probabilities (B, T-1) for every next step; pad positions hold 0."""
    B, T = batch.problems.shape
    out = np.zeros((B, T - 1))
    for lo in range(0, B, batch_size):
        idx = np.arange(lo, min(lo + batch_size, B))
        sub = batch.take(idx).trimmed()
        pred = forward(sub, params, cfg)["pred"].data
        out[idx, : pred.shape[1]] = pred
    return out * batch.target_mask


def evaluate(params: ParamStore, batch: Batch, cfg: ModelConfig) -> Metrics:
    """Metrics pooled over every real prediction step of the split."""
    if len(batch) == 0 or not batch.target_mask.any():
        raise ValueError("evaluation split has no prediction steps")
    return compute_metrics(predict(batch, params, cfg), batch.labels, batch.target_mask)


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def train(train_batch: Batch, val_batch: Batch, cfg: ModelConfig, max_epochs: int = 30,
          patience: int = 5, batch_size: int = 32, params: ParamStore | None = None,
          min_epochs: int = 0) -> TrainResult:
    """Adam on the masked cross-entropy objective, keeping the best-val-AUC weights."""
    params = params or build_params(cfg)
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 7])
    result = TrainResult(params=params, config=cfg)
    best = -math.inf
    best_state = params.snapshot()
    stale = 0
    n = len(train_batch)
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for b, lo in enumerate(range(0, n, batch_size)):
            mb = train_batch.take(order[lo : lo + batch_size]).trimmed()
            if not mb.target_mask.any():
                continue
            out = forward(mb, params, cfg)
            loss = loss_fn(out, mb, params, cfg)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            params.zero_grad()
            loss.backward()
            clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            params.zero_grad()
            w = int(mb.target_mask.sum())
            total += value * w
            count += w
        train_loss = total / max(count, 1)
        val = evaluate(params, val_batch, cfg)
        score = -math.inf if math.isnan(val.auc) else val.auc
        line = (f"epoch={epoch} train_loss={_fmt(train_loss)} val_auc={_fmt(val.auc)} "
                f"val_rmse={_fmt(val.rmse)} val_acc={_fmt(val.acc)} val_r2={_fmt(val.r2)}")
        result.log_lines.append(line)
        result.history.append({"epoch": epoch, "train_loss": train_loss, **val.as_row()})
        log.info(line)
        if score > best:
            best, stale = score, 0
            best_state = params.snapshot()
            result.best_epoch, result.best_val_auc = epoch, val.auc
        else:
            stale += 1
            if stale >= patience and epoch >= min_epochs:
                break
    params.restore(best_state)
    return result
