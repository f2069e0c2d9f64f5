"""Brute-force metric oracles and the random instance generator they are checked on."""
from __future__ import annotations

from fractions import Fraction

import numpy as np


def fpr_oracle(ids, ood, target=0.95):
    """Sweep every distinct score of either set as a threshold."""
    ids, ood = list(map(float, ids)), list(map(float, ood))
    best = None
    for t in sorted(set(ids) | set(ood)):
        tpr = Fraction(sum(1 for s in ids if s >= t), len(ids))
        if tpr >= Fraction(target).limit_denominator(10**6):
            best = t
    return sum(1 for s in ood if s >= best) / len(ood), best


def auroc_oracle(ids, ood):
    total = Fraction(0)
    for a in ids:
        for b in ood:
            total += 1 if a > b else Fraction(1, 2) if a == b else 0
    return float(total / (len(ids) * len(ood)))


def aupr_oracle(ids, ood):
    """Step-wise PR area, ID positive, enumerated over distinct thresholds (exact rationals)."""
    area, prev_recall = Fraction(0), Fraction(0)
    for t in sorted(set(ids) | set(ood), reverse=True):
        tp = sum(1 for s in ids if s >= t)
        fp = sum(1 for s in ood if s >= t)
        recall = Fraction(tp, len(ids))
        area += (recall - prev_recall) * Fraction(tp, tp + fp)
        prev_recall = recall
    return float(area)


def random_instances(n: int = 200, seed: int = 2024):
    """Score-set pairs of varied sizes; about half drawn from a coarse grid to force ties."""
    rng = np.random.default_rng(seed)
    for i in range(n):
        n_id, n_ood = int(rng.integers(1, 60)), int(rng.integers(1, 60))
        shift = rng.uniform(-1, 2)
        ids = rng.normal(shift, 1.0, n_id)
        ood = rng.normal(0.0, 1.0, n_ood)
        if i % 2:
            ids, ood = np.round(ids, 1), np.round(ood, 1)
        if i % 10 == 3:
            ood = np.concatenate([ood, rng.choice(ids, size=min(5, n_id))])
        yield ids, ood
