"""Post-hoc OOD scores computed on the scoring path of a model.

Higher scores mean "more in-distribution" for every scorer.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from . import tensor as T
from .data import Dataset
from .tensor import Tensor, no_grad
from .train import EVAL_CHUNK, score_outputs

SCORER_KINDS = ("msp", "tempscale", "energy", "odin", "gradnorm", "dice")
DICE_MAX_SAMPLES = 2048
TEMPERATURE_GRID = tuple(np.round(np.arange(0.25, 5.0001, 0.25), 2))


class ScoringError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScorerSpec:
    kind: str
    odin_temperature: float = 1000.0
    odin_epsilon: float = 0.0014
    dice_p: float = 0.9
    tempscale_T: Optional[float] = None  # None: fit by NLL grid search on ID data
    normalize_at_scoring: bool = False

    def __post_init__(self):
        if self.kind not in SCORER_KINDS:
            raise ValueError(f"unknown scorer {self.kind!r}; expected one of {SCORER_KINDS}")
        if self.odin_temperature <= 0:
            raise ValueError("odin_temperature must be positive")
        if self.odin_epsilon < 0:
            raise ValueError("odin_epsilon must be non-negative")
        if not 0 <= self.dice_p <= 1:
            raise ValueError("dice_p must be in [0, 1]")
        if self.tempscale_T is not None and self.tempscale_T <= 0:
            raise ValueError("tempscale_T must be positive")

    @property
    def key(self) -> str:
        """Short identifier used in file names and tables."""
        if self.kind == "dice":
            k = f"dice-p{self.dice_p:g}"
        elif self.kind == "odin":
            k = f"odin-T{self.odin_temperature:g}-e{self.odin_epsilon:g}"
        elif self.kind == "tempscale" and self.tempscale_T is not None:
            k = f"tempscale-T{self.tempscale_T:g}"
        else:
            k = self.kind
        return k + ("+norm" if self.normalize_at_scoring else "")


@dataclass
class ScoreSet:
    scores: np.ndarray
    dataset_id: str
    scorer: ScorerSpec
    model_id: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise ScoringError(f"non-finite scores in {self.dataset_id}")

    def __len__(self) -> int:
        return len(self.scores)

    def filename(self) -> str:
        return f"{self.model_id}__{self.scorer.key.replace('+norm', '')}__{self.dataset_id}__norm{int(self.scorer.normalize_at_scoring)}.csv"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_index", "score"])
            for i, s in enumerate(self.scores.tolist()):
                w.writerow([i, repr(s)])


def read_scores(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([float(r["score"]) for r in csv.DictReader(fh)])


# ----------------------------------------------------------------------
# logit-only scores
# ----------------------------------------------------------------------
def _max_softmax(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    return 1.0 / np.exp(z - z.max(axis=1, keepdims=True)).sum(axis=1)


def msp(logits) -> np.ndarray:
    """Maximum softmax probability per row."""
    return _max_softmax(np.asarray(logits, dtype=np.float64))


def tempscale(logits, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return _max_softmax(np.asarray(logits, dtype=np.float64) / temperature)


def energy(logits) -> np.ndarray:
    """logsumexp of the logits (negative free energy at T=1)."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    m = z.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]


def nll(logits, labels, temperature: float = 1.0) -> float:
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64)) / temperature
    lse = energy(z)
    return float(np.mean(lse - z[np.arange(len(z)), labels]))


def fit_temperature(logits, labels, grid=TEMPERATURE_GRID) -> float:
    """Grid value of T minimizing the NLL of ``logits / T`` (first one on ties)."""
    losses = [nll(logits, labels, t) for t in grid]
    return float(grid[int(np.argmin(losses))])


# ----------------------------------------------------------------------
# gradient-based scores
# ----------------------------------------------------------------------
def odin(m: nn.ModelState, x, temperature: float = 1000.0, epsilon: float = 0.0014,
         normalize_at_scoring: bool = False) -> np.ndarray:
    """Temperature-scaled MSP after an input step that raises that MSP.

    x_tilde = x - epsilon * sign(grad_x of -log max softmax(logits / T)),
    computed through the scoring path; no clamping afterwards.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    xt = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
    logits, _, _ = nn.forward_score(m, xt, normalize_at_scoring)
    zt = T.scale(logits, 1.0 / temperature)
    loss = T.tsum(T.logsumexp(zt, axis=1) - T.tmax(zt, axis=1))
    loss.backward()
    grad = xt.grad
    for p in m.params:
        p.value.grad = None
    x_pert = xt.data - epsilon * np.sign(grad)
    with no_grad():
        logits, _, _ = nn.forward_score(m, Tensor(x_pert), normalize_at_scoring)
    return _max_softmax(logits.data / temperature)


def gradnorm_from_features(h: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """L1 norm of d KL(uniform || softmax(W h + b)) / dW for each row of ``h``."""
    scores = np.empty(len(h))
    c = weight.shape[0]
    for i, row in enumerate(np.atleast_2d(h)):
        w = Tensor(weight, requires_grad=True)
        z = T.matmul(Tensor(row[None, :]), T.transpose(w)) + Tensor(bias)
        kl = T.scale(T.tsum(T.log_softmax(z, axis=1)), -1.0 / c) - np.log(c)
        kl.backward()
        scores[i] = np.abs(w.grad).sum()
    return scores


def gradnorm(m: nn.ModelState, x, normalize_at_scoring: bool = False) -> np.ndarray:
    images = x.data if isinstance(x, Tensor) else np.asarray(x)
    _, _, h = score_outputs(m, images, normalize_at_scoring)
    return gradnorm_from_features(h, m.fc_weight.data, m.fc_bias.data)


# ----------------------------------------------------------------------
# DICE
# ----------------------------------------------------------------------
def dice_mask_from_contrib(contrib: np.ndarray, p: float) -> np.ndarray:
    """Keep the top round((1-p) * size) entries of ``contrib`` (ties: lower flat index)."""
    k = int(round((1.0 - p) * contrib.size))
    keep = np.argsort(-contrib.ravel(), kind="stable")[:k]
    mask = np.zeros(contrib.size, dtype=bool)
    mask[keep] = True
    return mask.reshape(contrib.shape)


def dice_precompute(m: nn.ModelState, id_sample, p: float = 0.9, normalize_at_scoring: bool = False) -> np.ndarray:
    """Boolean FC-weight mask from weight x mean-feature contributions on ID data."""
    images = id_sample.images if isinstance(id_sample, Dataset) else np.asarray(id_sample)
    if len(images) == 0:
        raise ValueError("DICE needs a non-empty ID sample")
    _, _, h = score_outputs(m, images, normalize_at_scoring)
    contrib = m.fc_weight.data * h.mean(axis=0)[None, :]
    return dice_mask_from_contrib(contrib, p)


def dice_logits(h: np.ndarray, weight: np.ndarray, bias: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if mask.shape != weight.shape:
        raise ValueError(f"mask shape {mask.shape} does not match FC weight {weight.shape}")
    return h @ (weight * mask).T + bias


def dice_score(m: nn.ModelState, x, mask: np.ndarray, normalize_at_scoring: bool = False) -> np.ndarray:
    images = x.data if isinstance(x, Tensor) else np.asarray(x)
    _, _, h = score_outputs(m, images, normalize_at_scoring)
    return energy(dice_logits(h, m.fc_weight.data, m.fc_bias.data, mask))


# ----------------------------------------------------------------------
def score_dataset(
    m: nn.ModelState,
    data: Dataset,
    spec: ScorerSpec,
    model_id: str = "model",
    dice_mask: Optional[np.ndarray] = None,
    temperature: Optional[float] = None,
) -> ScoreSet:
    """Apply one scorer to every sample of ``data``.

    ``dice_mask`` is required for DICE; ``temperature`` overrides
    ``spec.tempscale_T`` (e.g. a fitted value).
    """
    norm = spec.normalize_at_scoring
    parts = []
    for start in range(0, len(data), EVAL_CHUNK):
        xb = data.images[start : start + EVAL_CHUNK]
        try:
            if spec.kind == "odin":
                s = odin(m, xb, spec.odin_temperature, spec.odin_epsilon, norm)
            elif spec.kind == "gradnorm":
                s = gradnorm(m, xb, norm)
            elif spec.kind == "dice":
                if dice_mask is None:
                    raise ValueError("DICE scoring needs a mask from dice_precompute")
                s = dice_score(m, xb, dice_mask, norm)
            else:
                logits, _, _ = score_outputs(m, xb, norm)
                if spec.kind == "msp":
                    s = msp(logits)
                elif spec.kind == "energy":
                    s = energy(logits)
                else:
                    t = temperature if temperature is not None else spec.tempscale_T
                    if t is None:
                        raise ValueError("tempscale needs a temperature (fit one with fit_temperature)")
                    s = tempscale(logits, t)
            bad = np.nonzero(~np.isfinite(s))[0]
            if bad.size:
                raise FloatingPointError(f"non-finite score at sample {start + bad[0]}")
        except (FloatingPointError, ValueError) as exc:
            raise ScoringError(f"{spec.key} on {data.id}, samples {start}..{start + len(xb) - 1}: {exc}") from exc
        parts.append(s)
    scores = np.concatenate(parts) if parts else np.zeros(0)
    return ScoreSet(scores, data.id, spec, model_id)
