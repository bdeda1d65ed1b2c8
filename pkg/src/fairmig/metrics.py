"""Utility and group-fairness metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, MetricUndefinedError
from .ssl import group_similarity_stats

REPORT_SCHEMA_VERSION = 1


def _select(mask, *arrays):
    if mask is None:
        return arrays
    mask = np.asarray(mask)
    return tuple(np.asarray(a)[mask] for a in arrays)


def auc(scores, y, mask=None):
    """ROC-AUC via the Mann-Whitney statistic; ties count one half."""
    scores, y = _select(mask, np.asarray(scores, dtype=np.float64), np.asarray(y))
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def binarize(scores, threshold=0.5):
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(scores) >= threshold).astype(np.int64)


def _rate(pred, cond):
    if not cond.any():
        raise MetricUndefinedError("empty group")
    return pred[cond].mean()


def delta_sp(pred, s, mask=None):
    pred, s = _select(mask, np.asarray(pred), np.asarray(s))
    return float(abs(_rate(pred, s == 0) - _rate(pred, s == 1)))


def delta_eo(pred, y, s, mask=None):
    pred, y, s = _select(mask, np.asarray(pred), np.asarray(y), np.asarray(s))
    return float(abs(_rate(pred, (y == 1) & (s == 0)) - _rate(pred, (y == 1) & (s == 1))))


@dataclass
class FairnessReport:
    auc: float
    delta_sp: float
    delta_eo: float
    group_stats: list
    threshold: float
    split: str

    def to_dict(self, **extra):
        out = {"schema_version": REPORT_SCHEMA_VERSION, **asdict(self)}
        out.update(extra)
        return out


def fairness_report(scores, y, s, mask, z=None, threshold=0.5, split="test"):
    pred = binarize(scores, threshold)
    stats = []
    if z is not None:
        gs = group_similarity_stats(z, s)
        stats = [{"group": k, "count": int(gs.count[k]), "mu": float(gs.mu[k]),
                  "sigma": float(gs.sigma[k])} for k in (0, 1)]
    return FairnessReport(
        auc=auc(scores, y, mask),
        delta_sp=delta_sp(pred, s, mask),
        delta_eo=delta_eo(pred, y, s, mask),
        group_stats=stats,
        threshold=threshold,
        split=split,
    )


def safe_metrics(scores, y, s, mask, threshold=0.5):
    """(auc, delta_sp, delta_eo) with NaN wherever a metric is undefined."""
    pred = binarize(scores, threshold)
    out = []
    for fn, args in ((auc, (scores, y, mask)), (delta_sp, (pred, s, mask)),
                     (delta_eo, (pred, y, s, mask))):
        try:
            out.append(fn(*args))
        except MetricUndefinedError:
            out.append(float("nan"))
    return tuple(out)
