"""OOD evaluation metrics (ID is the positive class) and diagnostic statistics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
from scipy.stats import rankdata


def _check(id_scores, ood_scores) -> tuple:
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("ID and OOD score sets must both be non-empty")
    return a, b


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95) -> tuple:
    """Return ``(fpr, threshold)``.

    The threshold is the largest value whose ID true positive rate
    (fraction of ID scores >= threshold) reaches ``tpr_target``; the FPR is
    the fraction of OOD scores >= threshold.
    """
    ids, ood = _check(id_scores, ood_scores)
    if not 0 < tpr_target <= 1:
        raise ValueError("tpr_target must be in (0, 1]")
    asc = np.sort(ids)
    cand = np.unique(ids)
    tpr = (ids.size - np.searchsorted(asc, cand, side="left")) / ids.size
    lam = cand[tpr >= tpr_target].max()
    return float(np.mean(ood >= lam)), float(lam)


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney estimate: P(id > ood) + 0.5 P(id == ood)."""
    ids, ood = _check(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([ids, ood]))
    n1, n2 = ids.size, ood.size
    return float((ranks[:n1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n2))


def aupr(id_scores, ood_scores) -> float:
    """Step-wise area under precision-recall with ID positive.

    Thresholds are the distinct scores in descending order; each contributes
    (recall increase) x (precision at that threshold). No interpolation.
    """
    ids, ood = _check(id_scores, ood_scores)
    scores = np.concatenate([ids, ood])
    pos = np.concatenate([np.ones(ids.size), np.zeros(ood.size)])
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], pos[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1.0 - y)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / ids.size
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def aupr_out(id_scores, ood_scores) -> float:
    """AUPR with OOD as the positive class (scores negated)."""
    ids, ood = _check(id_scores, ood_scores)
    return aupr(-ood, -ids)


# ----------------------------------------------------------------------
@dataclass
class MetricsReport:
    fpr_at_95: float
    auroc: float
    aupr: float
    aupr_out: float
    threshold: float
    id_accuracy: Optional[float] = None
    separability_feature: Optional[float] = None
    separability_logit: Optional[float] = None
    id_feature_norm: Optional[float] = None
    ood_feature_norm: Optional[float] = None
    id_logit_norm: Optional[float] = None
    ood_logit_norm: Optional[float] = None

    def __post_init__(self):
        for name in ("fpr_at_95", "auroc", "aupr", "aupr_out"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not np.isfinite(self.threshold):
            raise ValueError("threshold must be finite")

    @classmethod
    def columns(cls) -> list:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        """Flat ``key=value`` lines in column order."""
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.as_dict().items())

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line)
        return cls(**{k: (None if v == "" else float(v)) for k, v in kv.items()})

    def csv_row(self) -> list:
        return [_fmt(v) for v in self.as_dict().values()]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def evaluate(id_scores, ood_scores, **extra) -> MetricsReport:
    fpr, lam = fpr_at_tpr(id_scores, ood_scores)
    return MetricsReport(
        fpr_at_95=fpr,
        auroc=auroc(id_scores, ood_scores),
        aupr=aupr(id_scores, ood_scores),
        aupr_out=aupr_out(id_scores, ood_scores),
        threshold=lam,
        **extra,
    )


# ----------------------------------------------------------------------
@dataclass
class WeightStats:
    class_mean: np.ndarray
    class_neg_mean: np.ndarray
    class_pos_mean: np.ndarray
    class_var: np.ndarray
    all_mean: float
    all_neg_mean: float
    all_pos_mean: float
    neg_undefined: np.ndarray = field(default=None)
    pos_undefined: np.ndarray = field(default=None)
    variance_ratio: Optional[float] = None


def _signed_mean(w: np.ndarray, sign: int) -> tuple:
    sel = w < 0 if sign < 0 else w > 0
    n = sel.sum()
    return (float(w[sel].mean()) if n else 0.0), not n


def fc_weight_stats(weights, reference=None) -> WeightStats:
    """Means of all/negative/positive FC weights per class row and overall.

    Accepts a ModelState or a C×D array. An empty sign group reports 0 and
    sets the matching ``*_undefined`` flag. ``variance_ratio`` is the mean
    per-class variance relative to ``reference``.
    """
    w = _weights(weights)
    neg = [_signed_mean(row, -1) for row in w]
    pos = [_signed_mean(row, 1) for row in w]
    all_neg, _ = _signed_mean(w, -1)
    all_pos, _ = _signed_mean(w, 1)
    var = w.var(axis=1)
    ratio = None
    if reference is not None:
        ref_var = _weights(reference).var(axis=1).mean()
        ratio = float(var.mean() / ref_var) if ref_var > 0 else float("inf")
    return WeightStats(
        class_mean=w.mean(axis=1),
        class_neg_mean=np.array([v for v, _ in neg]),
        class_pos_mean=np.array([v for v, _ in pos]),
        class_var=var,
        all_mean=float(w.mean()),
        all_neg_mean=all_neg,
        all_pos_mean=all_pos,
        neg_undefined=np.array([u for _, u in neg]),
        pos_undefined=np.array([u for _, u in pos]),
        variance_ratio=ratio,
    )


def _weights(obj) -> np.ndarray:
    if hasattr(obj, "fc_weight"):
        return obj.fc_weight.data
    w = np.asarray(obj, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("FC weights must be 2-D")
    return w


def msp_histogram(id_scores, ood_scores, bins: int = 20) -> dict:
    """Per-bin counts and masses over [0, 1] plus the overlap mass sum(min(id, ood))."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = {"edges": edges}
    for name, s in (("id", id_scores), ("ood", ood_scores)):
        s = np.clip(np.asarray(s, dtype=np.float64).ravel(), 0.0, 1.0)
        counts, _ = np.histogram(s, bins=edges)
        out[f"{name}_counts"] = counts
        out[f"{name}_mass"] = counts / s.size if s.size else counts.astype(float)
    out["overlap"] = float(np.minimum(out["id_mass"], out["ood_mass"]).sum())
    return out
