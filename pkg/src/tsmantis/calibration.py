"""Calibration metrics and post-hoc correctors.

Confidence bins are the ``m`` equal-width intervals ``(e_j, e_{j+1}]`` of
``[0, 1]`` with a confidence of exactly 0 placed in the first bin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import log_softmax
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .validation import check_labels, check_probabilities

LOG_T_BOUNDS = (math.log(0.05), math.log(20.0))
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
ISOTONIC_FLOOR = 1e-6


@dataclass
class BinStats:
    edges: np.ndarray
    counts: np.ndarray
    correct: np.ndarray
    confidence_sum: np.ndarray

    @property
    def accuracy(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.correct / np.maximum(self.counts, 1), 0.0)

    @property
    def mean_confidence(self) -> np.ndarray:
        return np.where(self.counts > 0, self.confidence_sum / np.maximum(self.counts, 1), 0.0)

    def to_tsv(self) -> str:
        rows = ["bin\tlower\tupper\tcount\taccuracy\tconfidence"]
        for j in range(len(self.counts)):
            rows.append(f"{j}\t{self.edges[j]:.2f}\t{self.edges[j + 1]:.2f}\t"
                        f"{int(self.counts[j])}\t{self.accuracy[j]:.6f}\t"
                        f"{self.mean_confidence[j]:.6f}")
        return "\n".join(rows) + "\n"


def bin_edges(m: int = 10) -> np.ndarray:
    # j / m is correctly rounded, unlike linspace's j * (1 / m)
    return np.arange(m + 1) / m


def bin_index(confidences, m: int = 10) -> np.ndarray:
    edges = bin_edges(m)
    idx = np.searchsorted(edges, np.asarray(confidences, dtype=np.float64), side="left") - 1
    return np.clip(idx, 0, m - 1)


def confidences_and_predictions(probs) -> Tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    return probs.max(axis=1), probs.argmax(axis=1)


def reliability_bins(probs, labels, m: int = 10) -> BinStats:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    counts = np.zeros(m)
    correct = np.zeros(m)
    conf_sum = np.zeros(m)
    if probs.size:
        conf, pred = confidences_and_predictions(probs)
        idx = bin_index(conf, m)
        np.add.at(counts, idx, 1.0)
        np.add.at(correct, idx, (pred == labels).astype(np.float64))
        np.add.at(conf_sum, idx, conf)
    return BinStats(bin_edges(m), counts, correct, conf_sum)


def ece(probs, labels, m: int = 10) -> float:
    """``(1/n) * sum_j |sum_{i in B_j} (1[pred_i == y_i] - conf_i)|``."""
    probs = check_probabilities(probs)
    labels = check_labels(labels, len(probs))
    stats = reliability_bins(probs, labels, m)
    total = 0.0
    for gap in np.abs(stats.correct - stats.confidence_sum):
        total += float(gap)  # fixed left-to-right order
    return total / len(probs)


def nll(logits, labels, temperature: float = 1.0) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    logp = log_softmax(logits / temperature, axis=1)
    return float(-logp[np.arange(len(labels)), labels].mean())


def softmax_np(logits) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64), axis=1))


def golden_section(f, lo: float, hi: float, tol: float = 1e-4) -> float:
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def fit_temperature(logits, labels, tol: float = 1e-4) -> float:
    """Temperature minimising validation NLL over ``T in [0.05, 20]``."""
    logits = check_array(logits, dtype=np.float64)
    labels = check_labels(labels, len(logits)).astype(np.int64)
    objective = lambda log_t: nll(logits, labels, math.exp(log_t))  # noqa: E731
    lo, hi = LOG_T_BOUNDS
    best = golden_section(objective, lo, hi, tol)
    if abs(best - lo) < 2 * tol or abs(hi - best) < 2 * tol:
        # minimum pinned to the bracket: fall back to a log-spaced scan
        grid = np.linspace(lo, hi, 200)
        best = float(grid[np.argmin([objective(g) for g in grid])])
    # T = 1 lies in the search domain, so never return anything worse
    if objective(best) > objective(0.0):
        best = 0.0
    return math.exp(best)


class TemperatureScaler(TransformerMixin, BaseEstimator):
    """Divide logits by a single fitted temperature before the softmax."""

    def __init__(self, tol: float = 1e-4):
        self.tol = tol

    def fit(self, logits, y):
        self.temperature_ = fit_temperature(logits, y, self.tol)
        return self

    def transform(self, logits):
        check_is_fitted(self, "temperature_")
        return apply_temperature(self.temperature_, logits)

    predict_proba = transform


def apply_temperature(temperature: float, logits) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return softmax_np(np.asarray(logits, dtype=np.float64) / temperature)


def pav(x, y, sample_weight=None) -> Tuple[np.ndarray, np.ndarray]:
    """Pool-adjacent-violators fit of ``y`` against ``x``.

    Returns ``(thresholds, values)``: the sorted distinct ``x`` values and the
    non-decreasing fitted value at each.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    x, y, w = x[order], y[order], w[order]
    # ties in x share one block from the start
    thresholds, start = np.unique(x, return_index=True)
    wsum = np.add.reduceat(w, start)
    ysum = np.add.reduceat(w * y, start)
    means, weights, sizes = [], [], []
    for k in range(len(thresholds)):
        means.append(ysum[k] / wsum[k])
        weights.append(wsum[k])
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            total = weights[-2] + weights[-1]
            merged = (means[-2] * weights[-2] + means[-1] * weights[-1]) / total
            size = sizes[-2] + sizes[-1]
            del means[-1], weights[-1], sizes[-1]
            means[-1], weights[-1], sizes[-1] = merged, total, size
    values = np.repeat(means, sizes)
    return thresholds, values


def step_lookup(thresholds: np.ndarray, values: np.ndarray, x) -> np.ndarray:
    """Evaluate the piecewise-constant map: the value of the last threshold <= x."""
    idx = np.searchsorted(thresholds, np.asarray(x, dtype=np.float64), side="right") - 1
    return values[np.clip(idx, 0, len(values) - 1)]


class IsotonicCalibrator(TransformerMixin, BaseEstimator):
    """One-vs-rest isotonic maps per class, renormalised onto the simplex.

    This approximates multi-class isotonic calibration: each class column is
    calibrated by PAV against its indicator, then rows are rescaled to sum to 1.
    """

    def fit(self, probs, y):
        probs = check_probabilities(probs)
        y = check_labels(y, len(probs)).astype(np.int64)
        if len(probs) < 2:
            raise ValueError("isotonic calibration needs at least two samples")
        self.maps_ = []
        for k in range(probs.shape[1]):
            target = (y == k).astype(np.float64)
            if target.sum() <= 1:
                self.maps_.append(None)  # too little evidence: identity
            else:
                self.maps_.append(pav(probs[:, k], target))
        self.n_classes_ = probs.shape[1]
        return self

    def class_scores(self, probs) -> np.ndarray:
        """Per-class corrected scores before renormalisation."""
        check_is_fitted(self, "maps_")
        probs = check_array(probs, dtype=np.float64)
        out = np.empty_like(probs)
        for k, fitted in enumerate(self.maps_):
            out[:, k] = probs[:, k] if fitted is None else step_lookup(*fitted, probs[:, k])
        return out

    def transform(self, probs):
        scores = np.clip(self.class_scores(probs), ISOTONIC_FLOOR, 1.0)
        return scores / scores.sum(axis=1, keepdims=True)

    predict_proba = transform


def fit_isotonic_multiclass(probs, labels) -> IsotonicCalibrator:
    return IsotonicCalibrator().fit(probs, labels)
