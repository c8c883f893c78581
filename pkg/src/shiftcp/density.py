"""Gaussian kernel density estimates and likelihood-ratio weights.

Densities are evaluated in log space with log-sum-exp, so ratios for points
far from a sample set stay finite.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, logsumexp

from .errors import BandwidthSelectionError, InputError, NumericalError, ZeroDensityError

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
DEFAULT_GRID = np.logspace(-1.3, 1.0, 25)
DEFAULT_FOLDS = 10
# Ratios are saturated at exp(MAX_LOG_RATIO) so they stay finite; any weight
# this large already pushes the weighted quantile to +inf.
MAX_LOG_RATIO = 700.0


def _as_matrix(x, name="samples"):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise InputError(f"{name} must be a matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError(f"{name} contain non-finite values")
    return x


def _sq_distances(a, b):
    # exact differences rather than the |a|^2 - 2ab + |b|^2 expansion, which
    # cancels badly for nearby points
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _log_kernel_sum(sq_dist, h, d, n):
    """log of (n h^d)^-1 sum_i K(.) for each row of squared distances."""
    return logsumexp(-0.5 * sq_dist / (h * h), axis=1) - np.log(n) - d * np.log(h) - 0.5 * d * LOG_2PI


@dataclass(frozen=True)
class KdeModel:
    """Isotropic Gaussian KDE over ``samples`` with a single bandwidth."""

    samples: np.ndarray
    bandwidth: float

    @property
    def dim(self):
        return self.samples.shape[1]

    def log_density(self, x, chunk=1024):
        x = _as_matrix(x, "query points")
        if x.shape[1] != self.dim:
            raise InputError(f"query dimension {x.shape[1]} != model dimension {self.dim}")
        n = self.samples.shape[0]
        out = np.empty(x.shape[0])
        for start in range(0, x.shape[0], chunk):
            block = x[start:start + chunk]
            out[start:start + chunk] = _log_kernel_sum(
                _sq_distances(block, self.samples), self.bandwidth, self.dim, n)
        return out

    def density(self, x):
        return np.exp(self.log_density(x))


def fit_kde(samples, bandwidth):
    samples = _as_matrix(samples)
    if samples.shape[0] < 1:
        raise InputError("KDE needs at least one sample")
    bandwidth = float(bandwidth)
    if not (np.isfinite(bandwidth) and bandwidth > 0.0):
        raise InputError(f"bandwidth must be positive, got {bandwidth}")
    return KdeModel(samples=samples, bandwidth=bandwidth)


def kde_log_density(model: KdeModel, x):
    """Log density at a single point ``x`` (a d-vector)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if x.ndim != 1 or x.size != model.dim:
        raise InputError(f"expected a {model.dim}-vector, got shape {x.shape}")
    return float(model.log_density(x[None, :])[0])


@dataclass(frozen=True)
class BandwidthSearch:
    grid: np.ndarray = field(default_factory=lambda: DEFAULT_GRID.copy())
    folds: int = DEFAULT_FOLDS
    seed: int = 0

    def __post_init__(self):
        grid = np.atleast_1d(np.asarray(self.grid, dtype=float))
        if grid.size == 0 or np.any(~(grid > 0)) or not np.all(np.isfinite(grid)):
            raise InputError("bandwidth grid must be nonempty and positive")
        object.__setattr__(self, "grid", grid)
        if self.folds < 2:
            raise InputError("need at least 2 folds")


def fold_indices(n, k, seed):
    """Seeded shuffle, then contiguous chunks; earlier folds take the remainder."""
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, k)


def cv_scores(samples, search: BandwidthSearch):
    """Mean over folds of the held-out total log-likelihood, one value per grid point."""
    samples = _as_matrix(samples)
    n, d = samples.shape
    if n < search.folds:
        raise InputError(f"{n} samples cannot form {search.folds} folds")
    totals = np.zeros(search.grid.size)
    for held in fold_indices(n, search.folds, search.seed):
        mask = np.ones(n, dtype=bool)
        mask[held] = False
        sq = _sq_distances(samples[held], samples[mask])
        for j, h in enumerate(search.grid):
            totals[j] += _log_kernel_sum(sq, h, d, int(mask.sum())).sum()
    return totals / search.folds


def select_bandwidth(samples, search: Optional[BandwidthSearch] = None):
    """Grid bandwidth with the highest mean held-out log-likelihood (first on ties)."""
    search = search or BandwidthSearch()
    scores = cv_scores(samples, search)
    scores = np.where(np.isnan(scores), -np.inf, scores)
    if not np.any(np.isfinite(scores)):
        raise BandwidthSelectionError("every bandwidth candidate has -inf held-out likelihood")
    best = int(np.argmax(scores))
    logger.debug("selected bandwidth %.4g (cv score %.4g)", search.grid[best], scores[best])
    return float(search.grid[best])


@dataclass(frozen=True)
class RatioWeights:
    """Calibration weights plus a function computing the weight of new points."""

    cal_weights: np.ndarray
    weight_fn: Callable = field(repr=False)
    cap: Optional[float] = None
    converged: bool = True

    def test_weight_of(self, x):
        return _apply_cap(self.weight_fn(x), self.cap)


def _apply_cap(w, cap):
    w = np.asarray(w, dtype=float)
    if cap is not None:
        w = np.minimum(w, cap)
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise NumericalError("likelihood ratio is not a finite nonnegative number")
    return w


def _check_cap(cap):
    if cap is not None and not cap > 0:
        raise InputError(f"weight cap must be positive, got {cap}")


def ratio_weights(test_kde: KdeModel, cal_kde: KdeModel, cal_points, cap=None):
    """KDE likelihood ratio ``p_test(x) / p_cal(x)`` at every calibration point."""
    _check_cap(cap)
    if test_kde.dim != cal_kde.dim:
        raise InputError("test and calibration KDEs have different dimensions")

    def log_ratio(x):
        x = _as_matrix(x, "points")
        log_cal = cal_kde.log_density(x)
        bad = np.flatnonzero(~np.isfinite(log_cal))
        if bad.size:
            raise ZeroDensityError(f"calibration density is zero at point {int(bad[0])}")
        return test_kde.log_density(x) - log_cal

    def weight_fn(x):
        return np.exp(np.minimum(log_ratio(x), MAX_LOG_RATIO))

    cal_weights = _apply_cap(weight_fn(cal_points), cap)
    return RatioWeights(cal_weights=cal_weights, weight_fn=weight_fn, cap=cap)


@dataclass(frozen=True)
class LogisticConfig:
    learning_rate: float = 0.5
    max_iter: int = 2000
    tol: float = 1e-7
    cap: Optional[float] = None


def _fit_logistic(x, y, config):
    # Full-batch gradient descent on mean cross-entropy; features standardized
    # internally, which leaves the fitted linear model class unchanged.
    n, d = x.shape
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    z = np.hstack([(x - mean) / std, np.ones((n, 1))])
    theta = np.zeros(d + 1)
    best, best_loss = theta.copy(), np.inf
    converged = False
    for _ in range(config.max_iter):
        margin = z @ theta
        loss = np.mean(np.logaddexp(0.0, margin) - y * margin)
        if loss < best_loss:
            best, best_loss = theta.copy(), loss
        grad = z.T @ (expit(margin) - y) / n
        if np.max(np.abs(grad)) < config.tol:
            converged = True
            break
        theta = theta - config.learning_rate * grad
    if not converged:
        margin = z @ theta
        loss = np.mean(np.logaddexp(0.0, margin) - y * margin)
        if loss < best_loss:
            best = theta
    return best, mean, std, converged


def logistic_ratio_weights(cal_points, test_points, config: Optional[LogisticConfig] = None):
    """Weights ``p/(1-p)`` from a linear classifier separating test (1) from calibration (0)."""
    config = config or LogisticConfig()
    _check_cap(config.cap)
    cal = _as_matrix(cal_points, "calibration points")
    test = _as_matrix(test_points, "test points")
    if cal.shape[0] == 0 or test.shape[0] == 0:
        raise InputError("both point sets must be nonempty")
    if cal.shape[1] != test.shape[1]:
        raise InputError("calibration and test points differ in dimension")
    x = np.vstack([cal, test])
    y = np.concatenate([np.zeros(cal.shape[0]), np.ones(test.shape[0])])
    theta, mean, std, converged = _fit_logistic(x, y, config)
    if not converged:
        logger.warning("logistic ratio model did not converge in %d iterations", config.max_iter)

    def weight_fn(points):
        points = _as_matrix(points, "points")
        margin = ((points - mean) / std) @ theta[:-1] + theta[-1]
        # p / (1 - p) == exp(logit)
        return np.exp(np.minimum(margin, MAX_LOG_RATIO))

    cal_weights = _apply_cap(weight_fn(cal), config.cap)
    return RatioWeights(cal_weights=cal_weights, weight_fn=weight_fn, cap=config.cap,
                        converged=converged)
