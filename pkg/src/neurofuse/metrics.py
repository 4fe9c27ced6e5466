"""Binary classification metrics and fold aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import InputError, MetricUndefinedError

METRICS = ("acc", "auc", "f1")


@dataclass
class Prediction:
    subject_id: str
    score: float        # softmax probability of class 1
    predicted: int
    label: int


def accuracy_f1(preds: Sequence[Prediction]) -> Tuple[float, float]:
    """Accuracy and binary F1 with class 1 (disorder) as the positive class."""
    if not preds:
        raise InputError("accuracy_f1 needs at least one prediction")
    y = np.array([p.label for p in preds])
    yhat = np.array([p.predicted for p in preds])
    acc = float(np.mean(y == yhat))
    tp = int(np.sum((yhat == 1) & (y == 1)))
    fp = int(np.sum((yhat == 1) & (y == 0)))
    fn = int(np.sum((yhat == 0) & (y == 1)))
    denom = 2 * tp + fp + fn
    return acc, (2 * tp / denom if denom else 0.0)


def auc(preds: Sequence[Prediction]) -> float:
    """Mann-Whitney AUC from midranks; ties count one half."""
    scores = np.array([p.score for p in preds], dtype=np.float64)
    y = np.array([p.label for p in preds])
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def auc_bruteforce(preds: Sequence[Prediction]) -> float:
    """O(n^2) pair counting; reference implementation for :func:`auc`."""
    pos = [p.score for p in preds if p.label == 1]
    neg = [p.score for p in preds if p.label == 0]
    if not pos or not neg:
        raise MetricUndefinedError("AUC needs both classes present")
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def mean_std(values: Iterable[float]) -> Tuple[float, float]:
    """Arithmetic mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise InputError("cannot aggregate an empty list")
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return float(np.mean(v)), std


def aggregate(folds: Sequence) -> Dict[str, Tuple[float, float]]:
    """Mean and sample std of acc/auc/f1 over fold reports (or metric mappings)."""
    if not folds:
        raise InputError("cannot aggregate zero folds")
    rows: List[Mapping[str, float]] = [
        f if isinstance(f, Mapping) else {m: getattr(f, m) for m in METRICS} for f in folds
    ]
    return {m: mean_std(r[m] for r in rows) for m in METRICS}


def write_metrics_csv(path, folds: Sequence) -> None:
    """``fold,acc,auc,f1`` rows, then ``mean`` and ``std`` rows, 4 decimals."""
    agg = aggregate(folds)
    lines = ["fold,acc,auc,f1"]
    for i, f in enumerate(folds):
        row = f if isinstance(f, Mapping) else {m: getattr(f, m) for m in METRICS}
        idx = row.get("fold", i) if isinstance(f, Mapping) else getattr(f, "fold", i)
        lines.append(f"{idx}," + ",".join(f"{row[m]:.4f}" for m in METRICS))
    lines.append("mean," + ",".join(f"{agg[m][0]:.4f}" for m in METRICS))
    lines.append("std," + ",".join(f"{agg[m][1]:.4f}" for m in METRICS))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
