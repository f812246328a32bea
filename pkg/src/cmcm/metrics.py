"""Ranking metrics, percentile bootstrap intervals and a paired bootstrap t-test."""
from __future__ import annotations

import logging
from collections import namedtuple

import numpy as np
from scipy import special, stats

from .errors import LengthMismatch, SingleClass

log = logging.getLogger(__name__)

Interval = namedtuple("Interval", "point lo hi")


def _scored(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise LengthMismatch(f"{scores.size} scores for {labels.size} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise SingleClass("both classes must be present")
    return scores, labels


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC, ties counted one half."""
    scores, labels = _scored(scores, labels)
    ranks = stats.rankdata(scores)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision with ties ordered by original index."""
    scores, labels = _scored(scores, labels)
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    return float(precision[hits].sum() / hits.sum())


METRICS = {"auroc": auroc, "aupr": aupr}


def _metric(metric):
    if callable(metric):
        return metric
    try:
        return METRICS[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}") from None


def _resample(rng, labels):
    """Row indices of one bootstrap draw; redraws until both classes appear."""
    n = labels.size
    redraws = 0
    while True:
        idx = rng.integers(0, n, size=n)
        picked = labels[idx]
        if picked.any() and not picked.all():
            return idx, redraws
        redraws += 1


def bootstrap_ci(metric, scores, labels, iters=1000, level=0.95, seed=None) -> Interval:
    """Point estimate and percentile interval over ``iters`` row resamples."""
    fn = _metric(metric)
    scores, labels = _scored(scores, labels)
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    point = fn(scores, labels)
    values = np.empty(int(iters))
    redraws = 0
    for b in range(values.size):
        idx, r = _resample(rng, labels)
        redraws += r
        values[b] = fn(scores[idx], labels[idx])
    if redraws:
        log.info("bootstrap redrew %d single-class resamples", redraws)
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(values, [tail, 100.0 - tail])
    return Interval(point, float(lo), float(hi))


def bootstrap_t_test(scores_a, scores_b, labels, metric="auroc", iters=1000, seed=None) -> float:
    """Two-sided p-value for metric(A) - metric(B) on paired rows.

    The observed difference is divided by the standard deviation of the
    bootstrap differences and referred to a standard normal.  Identical
    differences in every resample (e.g. A == B) give p = 1.
    """
    fn = _metric(metric)
    scores_a, labels = _scored(scores_a, labels)
    scores_b, _ = _scored(scores_b, labels)
    rng = np.random.default_rng(seed)
    observed = fn(scores_a, labels) - fn(scores_b, labels)
    diffs = np.empty(int(iters))
    for b in range(diffs.size):
        idx, _ = _resample(rng, labels)
        diffs[b] = fn(scores_a[idx], labels[idx]) - fn(scores_b[idx], labels[idx])
    se = diffs.std(ddof=1)
    if se == 0 or not np.isfinite(se):
        return 1.0 if observed == 0 else 0.0
    t = abs(observed) / se
    return float(min(1.0, 2.0 * special.ndtr(-t)))


def write_metrics(rows, stream):
    """Write ``task,metric,point,lo,hi`` rows with 9 significant digits."""
    stream.write("task,metric,point,lo,hi\n")
    for task, metric, point, lo, hi in rows:
        stream.write(f"{task},{metric},{point:.9g},{lo:.9g},{hi:.9g}\n")
