"""Mondrian inductive conformal prediction sets, unweighted and weighted.

Scores are ``1 - p_y(x)``. A label enters the prediction set when its score
is at most the class threshold, and the class threshold is the ``1 - alpha``
quantile of the class-conditional calibration scores with one extra atom at
``+inf``. Under covariate shift the calibration atoms carry likelihood-ratio
weights and the ``+inf`` atom carries the test point's own weight.

All comparisons are exact floating point comparisons. Weighted CDFs scale
their weights by the largest calibration weight and accumulate them
left-to-right in ascending score order; both the scalar and the vectorized
code paths use that exact arithmetic so their outputs agree bit-for-bit.
"""

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import DegenerateWeightsError, InputError, InsufficientCalibrationError

PROB_SUM_TOL = 1e-9

__all__ = [
    "CalibrationConfig",
    "PredictionSet",
    "StepCdf",
    "WeightedStepCdf",
    "check_probabilities",
    "conformal_sets",
    "empirical_cdf",
    "mondrian_thresholds_unweighted",
    "nonconformity_scores",
    "prediction_set_unweighted",
    "prediction_set_weighted",
    "quantile",
    "weighted_ecdf",
    "weighted_thresholds",
]


def check_probabilities(probs):
    """Validate a matrix of class probabilities and return it as float64."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim == 1:
        probs = probs[None, :]
    if probs.ndim != 2:
        raise InputError(f"probabilities must be 2-d, got shape {probs.shape}")
    if probs.shape[1] < 2:
        raise InputError("need at least two classes")
    if not np.all(np.isfinite(probs)):
        raise InputError("probabilities contain non-finite values")
    if np.any(probs < 0.0) or np.any(probs > 1.0):
        raise InputError("probabilities must lie in [0, 1]")
    bad = np.abs(probs.sum(axis=1) - 1.0) > PROB_SUM_TOL
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise InputError(f"probability row {row} does not sum to 1")
    return probs


def _check_labels(labels, n_classes, n_rows=None):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise InputError("labels must be 1-d")
    if n_rows is not None and len(labels) != n_rows:
        raise InputError(f"got {len(labels)} labels for {n_rows} rows")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise InputError("labels must be integers")
        labels = labels.astype(int)
    out = (labels < 0) | (labels >= n_classes)
    if np.any(out):
        i = int(np.flatnonzero(out)[0])
        raise InputError(f"label {labels[i]} at position {i} outside 0..{n_classes - 1}")
    return labels.astype(int)


def _check_scores(scores):
    scores = np.asarray(scores, dtype=float).ravel()
    if np.any(~np.isfinite(scores)) or np.any(scores < 0.0) or np.any(scores > 1.0):
        raise InputError("nonconformity scores must lie in [0, 1]")
    return scores


def nonconformity_scores(probs, labels):
    """Return ``1 - probs[i, labels[i]]`` for every row."""
    probs = check_probabilities(probs)
    labels = _check_labels(labels, probs.shape[1], probs.shape[0])
    return 1.0 - probs[np.arange(len(labels)), labels]


@dataclass(frozen=True)
class StepCdf:
    """Empirical CDF of a finite sample.

    ``support`` holds the distinct values in ascending order and ``cum_mass``
    the fraction of the sample at or below each of them.
    """

    support: np.ndarray
    cum_mass: np.ndarray

    def __call__(self, x):
        idx = np.searchsorted(self.support, x, side="right")
        out = np.where(idx > 0, self.cum_mass[np.maximum(idx - 1, 0)], 0.0)
        return out if np.ndim(out) else float(out)


def empirical_cdf(values):
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise InputError("empirical_cdf needs at least one value")
    if not np.all(np.isfinite(values)):
        raise InputError("empirical_cdf values must be finite")
    support, counts = np.unique(values, return_counts=True)
    return StepCdf(support=support, cum_mass=np.cumsum(counts) / values.size)


@dataclass(frozen=True)
class WeightedStepCdf:
    """Weighted empirical CDF with an atom at ``+inf``.

    ``support`` and ``point_weights`` are the calibration scores and their
    weights sorted by score (ties keep input order). ``infinity_mass`` is the
    weight of the test point, placed at ``+inf``.
    """

    support: np.ndarray
    point_weights: np.ndarray
    infinity_mass: float
    normalizer: float
    _cum: np.ndarray = field(repr=False, compare=False)
    _total: float = field(repr=False, compare=False)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.support, x, side="right")
        finite = np.where(idx > 0, self._cum[np.maximum(idx - 1, 0)], 0.0) / self._total
        out = np.where(np.isposinf(x), 1.0, finite)
        return out if np.ndim(out) else float(out)


def _check_weights(weights, name):
    weights = np.asarray(weights, dtype=float).ravel()
    if not np.all(np.isfinite(weights)):
        raise InputError(f"{name} must be finite")
    if np.any(weights < 0.0):
        raise InputError(f"{name} must be nonnegative")
    return weights


def _weight_scale(cal_weights):
    top = float(cal_weights.max()) if cal_weights.size else 0.0
    return top if top > 0.0 else 1.0


def weighted_ecdf(cal_scores, cal_weights, test_weight):
    """Build the weighted CDF of calibration scores plus the test atom at +inf."""
    scores = np.asarray(cal_scores, dtype=float).ravel()
    weights = _check_weights(cal_weights, "calibration weights")
    if scores.shape != weights.shape:
        raise InputError(f"{scores.size} scores but {weights.size} weights")
    if not np.all(np.isfinite(scores)):
        raise InputError("calibration scores must be finite")
    test_weight = float(test_weight)
    if not np.isfinite(test_weight) or test_weight < 0.0:
        raise InputError("test weight must be finite and nonnegative")

    order = np.argsort(scores, kind="stable")
    scores, weights = scores[order], weights[order]
    scale = _weight_scale(weights)
    cum = np.cumsum(weights / scale)
    total = (cum[-1] if cum.size else 0.0) + test_weight / scale
    if not total > 0.0:
        raise DegenerateWeightsError("all calibration and test weights are zero")
    return WeightedStepCdf(
        support=scores,
        point_weights=weights,
        infinity_mass=test_weight,
        normalizer=float(weights.sum() + test_weight),
        _cum=cum,
        _total=float(total),
    )


def quantile(beta, cdf: Union[StepCdf, WeightedStepCdf]):
    """Smallest ``x`` with ``cdf(x) >= beta``; ``inf`` if only the +inf atom reaches it."""
    beta = float(beta)
    if not 0.0 < beta <= 1.0:
        raise InputError(f"beta must be in (0, 1], got {beta}")
    if isinstance(cdf, WeightedStepCdf):
        mass = cdf._cum / cdf._total
    else:
        mass = cdf.cum_mass
    hit = np.flatnonzero(mass >= beta)
    if hit.size == 0:
        return float("inf")
    return float(cdf.support[hit[0]])


@dataclass(frozen=True)
class CalibrationConfig:
    alpha: float
    mondrian: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InputError(f"alpha must be in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class PredictionSet:
    labels: tuple
    per_label_threshold: np.ndarray

    def __contains__(self, label):
        return label in self.labels

    def __len__(self):
        return len(self.labels)


def _check_alpha(alpha):
    return CalibrationConfig(alpha=float(alpha)).alpha


def mondrian_thresholds_unweighted(scores_by_class: Sequence, alpha):
    """Per-class ``1 - alpha`` quantile of the class scores plus one ``+inf`` atom."""
    alpha = _check_alpha(alpha)
    thresholds = np.empty(len(scores_by_class))
    for label, scores in enumerate(scores_by_class):
        scores = _check_scores(scores)
        if scores.size == 0:
            raise InsufficientCalibrationError(label)
        cdf = weighted_ecdf(scores, np.ones_like(scores), 1.0)
        thresholds[label] = quantile(1.0 - alpha, cdf)
    return thresholds


def prediction_set_unweighted(test_probs, thresholds):
    probs = check_probabilities(test_probs)[0]
    thresholds = np.asarray(thresholds, dtype=float)
    if thresholds.shape != probs.shape:
        raise InputError(f"need {probs.size} thresholds, got {thresholds.size}")
    members = np.flatnonzero(1.0 - probs <= thresholds)
    return PredictionSet(labels=tuple(int(y) for y in members), per_label_threshold=thresholds)


def prediction_set_weighted(test_probs, test_weight, cal_scores_by_class,
                            cal_weights_by_class, alpha):
    """Weighted Mondrian prediction set for a single test point.

    Each candidate label ``y`` gets a threshold from the weighted CDF of the
    class-``y`` calibration scores, with ``test_weight`` at ``+inf``.
    Weights are normalized within each class.
    """
    probs = check_probabilities(test_probs)[0]
    alpha = _check_alpha(alpha)
    k = probs.size
    if len(cal_scores_by_class) != k or len(cal_weights_by_class) != k:
        raise InputError(f"need calibration data for all {k} classes")
    thresholds = np.empty(k)
    for label in range(k):
        scores = _check_scores(cal_scores_by_class[label])
        if scores.size == 0:
            raise InsufficientCalibrationError(label)
        cdf = weighted_ecdf(scores, cal_weights_by_class[label], test_weight)
        thresholds[label] = quantile(1.0 - alpha, cdf)
    return prediction_set_unweighted(probs, thresholds)


def weighted_thresholds(cal_scores, cal_weights, test_weights, beta, chunk=2048):
    """Vectorized ``quantile(beta, weighted_ecdf(cal_scores, cal_weights, t))``.

    Returns one threshold per entry of ``test_weights``. Only the ``+inf``
    atom changes between test points, so the calibration scores are sorted
    and accumulated once.
    """
    beta = float(beta)
    if not 0.0 < beta <= 1.0:
        raise InputError(f"beta must be in (0, 1], got {beta}")
    scores = np.asarray(cal_scores, dtype=float).ravel()
    weights = _check_weights(cal_weights, "calibration weights")
    test_weights = _check_weights(test_weights, "test weights")
    if scores.shape != weights.shape:
        raise InputError(f"{scores.size} scores but {weights.size} weights")
    order = np.argsort(scores, kind="stable")
    scores, weights = scores[order], weights[order]
    scale = _weight_scale(weights)
    cum = np.cumsum(weights / scale)
    cal_total = cum[-1] if cum.size else 0.0
    totals = cal_total + test_weights / scale
    if np.any(~(totals > 0.0)):
        raise DegenerateWeightsError("all calibration and test weights are zero")

    out = np.full(test_weights.size, np.inf)
    if scores.size == 0:
        return out
    for start in range(0, test_weights.size, chunk):
        stop = start + chunk
        reached = (cum[None, :] / totals[start:stop, None]) >= beta
        first = reached.argmax(axis=1)
        found = reached[np.arange(first.size), first]
        out[start:stop] = np.where(found, scores[first], np.inf)
    return out


def conformal_sets(test_probs, cal_scores, cal_labels, alpha, cal_weights=None,
                   test_weights=None, mondrian=True):
    """Prediction sets for a batch of test points.

    Parameters
    ----------
    test_probs : array of shape (n_test, K)
    cal_scores, cal_labels : arrays of shape (n_cal,)
        Calibration nonconformity scores and their true labels.
    alpha : float
        Miscoverage level.
    cal_weights, test_weights : arrays, optional
        Likelihood-ratio weights. Omitting both gives unweighted sets.
    mondrian : bool
        Calibrate each class separately (weights normalized per class). When
        False, a single threshold is computed from all calibration scores.

    Returns
    -------
    members : bool array of shape (n_test, K)
    thresholds : float array of shape (n_test, K)
    """
    probs = check_probabilities(test_probs)
    alpha = _check_alpha(alpha)
    n, k = probs.shape
    cal_scores = _check_scores(cal_scores)
    cal_labels = _check_labels(cal_labels, k, cal_scores.size)
    cal_weights = np.ones(cal_scores.size) if cal_weights is None else cal_weights
    test_weights = np.ones(n) if test_weights is None else test_weights
    cal_weights = _check_weights(cal_weights, "calibration weights")
    test_weights = _check_weights(test_weights, "test weights")
    if cal_weights.size != cal_scores.size or test_weights.size != n:
        raise InputError("weight arrays do not match the data")

    thresholds = np.empty((n, k))
    if mondrian:
        for label in range(k):
            mask = cal_labels == label
            if not mask.any():
                raise InsufficientCalibrationError(label)
            thresholds[:, label] = weighted_thresholds(
                cal_scores[mask], cal_weights[mask], test_weights, 1.0 - alpha)
    else:
        if cal_scores.size == 0:
            raise InputError("no calibration examples")
        shared = weighted_thresholds(cal_scores, cal_weights, test_weights, 1.0 - alpha)
        thresholds[:] = shared[:, None]
    members = (1.0 - probs) <= thresholds
    return members, thresholds
