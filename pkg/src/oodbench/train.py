"""SGD training with per-epoch norm and separability tracking."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import nn
from .data import Dataset, batches
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

EVAL_CHUNK = 512


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-3
    seed: int = 0
    lr_schedule: str = "step"  # "constant" or "step"
    step_epochs: tuple = (15,)
    step_factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "step_epochs", tuple(int(e) for e in self.step_epochs))
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        return self.lr * self.step_factor ** sum(epoch >= s for s in self.step_epochs)


@dataclass
class EpochTrace:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    id_feature_norm: float
    id_logit_norm: float
    ood_feature_norm: Optional[float] = None
    ood_logit_norm: Optional[float] = None
    separability_feature: Optional[float] = None
    separability_logit: Optional[float] = None


TRACE_COLUMNS = [f.name for f in fields(EpochTrace)]


def sgd_step(m: nn.ModelState, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """v <- momentum*v + (g + wd*theta); theta <- theta - lr*v; then clear grads."""
    missing = [p.name for p in m.params if p.value.grad is None]
    if missing:
        raise RuntimeError(f"no gradient for {', '.join(missing)}; call backward() first")
    for p in m.params:
        theta = p.value.data
        g = p.value.grad + weight_decay * theta
        v = m.velocity.get(p.name)
        v = g if v is None else momentum * v + g
        m.velocity[p.name] = v
        p.value.data = theta - lr * v
        p.value.grad = None


def score_outputs(m: nn.ModelState, images: np.ndarray, normalize_at_scoring: bool = False) -> tuple:
    """Scoring-path (logits, h_star, h_scaled) arrays for a whole array, without a graph."""
    outs = [], [], []
    with no_grad():
        for start in range(0, max(len(images), 1), EVAL_CHUNK):
            chunk = images[start : start + EVAL_CHUNK]
            if len(chunk) == 0:
                break
            for acc, t in zip(outs, nn.forward_score(m, Tensor(chunk), normalize_at_scoring)):
                acc.append(t.data)
    if not outs[0]:
        d, c = m.spec.feature_dim, m.spec.num_classes
        return np.zeros((0, c)), np.zeros((0, d)), np.zeros((0, d))
    return tuple(np.concatenate(o) for o in outs)


def predict(m: nn.ModelState, images: np.ndarray) -> np.ndarray:
    preds = []
    with no_grad():
        for start in range(0, len(images), EVAL_CHUNK):
            preds.append(nn.classify(m, Tensor(images[start : start + EVAL_CHUNK])))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(m: nn.ModelState, d: Dataset) -> float:
    if len(d) == 0:
        raise ValueError("accuracy of an empty dataset")
    return float(np.mean(predict(m, d.images) == d.labels))


def mean_norms(m: nn.ModelState, d: Dataset, normalize_at_scoring: bool = False) -> tuple:
    """Mean L2 norm of scoring-path features and logits over ``d``."""
    logits, _, h = score_outputs(m, d.images, normalize_at_scoring)
    return float(np.linalg.norm(h, axis=1).mean()), float(np.linalg.norm(logits, axis=1).mean())


def track_separability(m: nn.ModelState, id_set: Dataset, ood_set: Dataset) -> tuple:
    """(S_feature, S_logit): mean ID norm over mean OOD norm on the scoring path."""
    if len(id_set) == 0 or len(ood_set) == 0:
        raise ValueError("separability needs non-empty ID and OOD sets")
    id_f, id_l = mean_norms(m, id_set)
    ood_f, ood_l = mean_norms(m, ood_set)
    if ood_f == 0 or ood_l == 0:
        raise ZeroDivisionError("mean OOD norm is zero; separability undefined")
    return id_f / ood_f, id_l / ood_l


def train(
    m: nn.ModelState,
    data: Dataset,
    cfg: TrainConfig,
    monitor_id: Optional[Dataset] = None,
    monitor_ood: Optional[Dataset] = None,
) -> list:
    """Train ``m`` in place and return one EpochTrace per epoch.

    Norms are tracked on ``monitor_id`` (defaults to ``data``); separability
    ratios only when ``monitor_ood`` is given.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    monitor_id = monitor_id if monitor_id is not None else data
    traces = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        total, correct, seen = 0.0, 0, 0
        for b, (xb, yb) in enumerate(batches(data, cfg.batch_size, cfg.seed, epoch)):
            try:
                with np.errstate(over="raise", invalid="raise", divide="raise"):
                    loss, logits = nn.loss_and_logits(m, Tensor(xb), yb)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise FloatingPointError(f"loss is {value}")
                    loss.backward()
                    sgd_step(m, lr, cfg.momentum, cfg.weight_decay)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch} batch {b}: {exc}") from exc
            total += value * len(yb)
            correct += int(np.sum(nn.argmax_rows(logits) == yb))
            seen += len(yb)
        m.epoch += 1

        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                id_f, id_l = mean_norms(m, monitor_id)
                ood_norms = mean_norms(m, monitor_ood) if monitor_ood is not None and len(monitor_ood) else None
        except FloatingPointError as exc:
            raise TrainingDiverged(f"epoch {epoch} monitoring: {exc}") from exc
        tr = EpochTrace(epoch, lr, total / seen, correct / seen, id_f, id_l)
        if ood_norms is not None:
            tr.ood_feature_norm, tr.ood_logit_norm = ood_norms
            tr.separability_feature = id_f / tr.ood_feature_norm if tr.ood_feature_norm else math.inf
            tr.separability_logit = id_l / tr.ood_logit_norm if tr.ood_logit_norm else math.inf
        log.debug("epoch %d loss %.4f acc %.4f", epoch, tr.train_loss, tr.train_accuracy)
        traces.append(tr)
    return traces


def converged(traces: list, num_classes: int) -> bool:
    """A run counts as converged once its final training loss is below half of ln(C)."""
    if not traces or num_classes < 2:
        return bool(traces)
    return traces[-1].train_loss < 0.5 * math.log(num_classes)


def write_traces(path, traces: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for t in traces:
            w.writerow(["" if getattr(t, c) is None else repr(getattr(t, c)) for c in TRACE_COLUMNS])


def read_traces(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for c in TRACE_COLUMNS:
                v = row[c]
                kw[c] = None if v == "" else (int(v) if c == "epoch" else float(v))
            out.append(EpochTrace(**kw))
    return out
