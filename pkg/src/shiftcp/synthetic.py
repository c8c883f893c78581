"""Synthetic covariate-shift data with known densities.

Calibration and test inputs come from two isotropic Gaussian mixtures; labels
come from one shared rule, so ``P(Y | X)`` is identical in both. The exact
mixture densities give oracle likelihood-ratio weights.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp, ndtr

from .errors import InputError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of isotropic Gaussians: component ``j`` is ``N(means[j], scales[j]**2 I)``."""

    means: np.ndarray
    scales: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        scales = np.atleast_1d(np.asarray(self.scales, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if scales.shape != (means.shape[0],) or weights.shape != (means.shape[0],):
            raise InputError("mixture means, scales and weights must have matching lengths")
        if np.any(~(scales > 0)) or not np.all(np.isfinite(scales)):
            raise InputError("mixture scales must be positive (degenerate covariance)")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise InputError("mixture weights must be nonnegative and sum to 1")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def gaussian(cls, mean, scale=1.0):
        return cls(np.atleast_2d(mean), [scale], [1.0])

    @property
    def dim(self):
        return self.means.shape[1]

    def sample(self, n, rng):
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[comp] + self.scales[comp, None] * noise

    def log_pdf(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = self.dim
        sq = ((x[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        log_comp = (-0.5 * sq / self.scales ** 2 - d * np.log(self.scales) - 0.5 * d * LOG_2PI
                    + np.log(np.where(self.weights > 0, self.weights, 1.0)))
        log_comp = np.where(self.weights > 0, log_comp, -np.inf)
        return logsumexp(log_comp, axis=1)

    def pdf(self, x):
        return np.exp(self.log_pdf(x))


@dataclass(frozen=True)
class LabelRule:
    """``y = 1[s(x) + sigma(x) * eps > 0]`` with ``eps ~ N(0, 1)``.

    ``kind="linear"``: ``s(x) = direction . x - offset``.
    ``kind="radial"``: ``s(x) = |x| - offset``.
    ``sigma(x) = noise * exp(noise_gradient . x)``; constant when no gradient is given.
    """

    kind: str = "radial"
    offset: float = 1.5
    direction: Optional[tuple] = None
    noise: float = 0.3
    noise_gradient: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("linear", "radial"):
            raise InputError(f"unknown label rule {self.kind!r}")
        if self.noise < 0:
            raise InputError("label noise must be nonnegative")
        if self.kind == "linear" and self.direction is None:
            raise InputError("linear label rule needs a direction")

    def signal(self, x):
        x = np.atleast_2d(x)
        if self.kind == "radial":
            return np.linalg.norm(x, axis=1) - self.offset
        direction = np.asarray(self.direction, dtype=float)
        if direction.size != x.shape[1]:
            raise InputError("label rule direction has the wrong dimension")
        return x @ direction - self.offset

    def noise_scale(self, x):
        x = np.atleast_2d(x)
        if self.noise_gradient is None:
            return np.full(x.shape[0], float(self.noise))
        g = np.asarray(self.noise_gradient, dtype=float)
        if g.size != x.shape[1]:
            raise InputError("noise gradient has the wrong dimension")
        return self.noise * np.exp(x @ g)

    def prob_positive(self, x):
        s = self.signal(x)
        if self.noise == 0:
            return (s > 0).astype(float)
        return ndtr(s / self.noise_scale(x))

    def class_probs(self, x):
        p = self.prob_positive(x)
        return np.column_stack([1.0 - p, p])

    def sample(self, x, rng):
        s = self.signal(x)
        return (s + self.noise_scale(x) * rng.standard_normal(s.size) > 0).astype(int)


@dataclass(frozen=True)
class SyntheticSpec:
    cal_mixture: GaussianMixture
    test_mixture: GaussianMixture
    label_rule: LabelRule = field(default_factory=LabelRule)
    unlabeled_mixture: Optional[GaussianMixture] = None
    n_train: int = 2000
    n_cal: int = 500
    n_test: int = 500
    n_unlabeled: int = 2000
    seed: int = 0

    def __post_init__(self):
        mixtures = [self.cal_mixture, self.test_mixture]
        if self.unlabeled_mixture is not None:
            mixtures.append(self.unlabeled_mixture)
        if len({m.dim for m in mixtures}) != 1:
            raise InputError("all mixtures must share one dimension")
        if min(self.n_train, self.n_cal, self.n_test, self.n_unlabeled) < 0:
            raise InputError("sample sizes must be nonnegative")

    @property
    def dim(self):
        return self.cal_mixture.dim


def shift_label_rule():
    """Labels split by the sign of ``x2``; label noise grows along ``x1``, the shift axis.

    Test points therefore land where the classifier is least certain, which is
    exactly what breaks unweighted calibration.
    """
    return LabelRule(kind="linear", direction=(0.0, 1.0), offset=0.0, noise=0.2,
                     noise_gradient=(1.0, 0.0))


def shift_spec(shift=1.5, n_train=2000, n_cal=1000, n_test=1000, n_unlabeled=2000, seed=0,
               label_rule=None):
    """The standard 2-d fixture: calibration ``N(0, I)``, test ``N((shift, 0), I)``."""
    return SyntheticSpec(
        cal_mixture=GaussianMixture.gaussian([0.0, 0.0]),
        test_mixture=GaussianMixture.gaussian([shift, 0.0]),
        label_rule=label_rule or shift_label_rule(),
        n_train=n_train, n_cal=n_cal, n_test=n_test, n_unlabeled=n_unlabeled, seed=seed,
    )


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    train_x: np.ndarray
    train_y: np.ndarray
    cal_x: np.ndarray
    cal_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    unlabeled_x: np.ndarray

    def cal_density(self, x):
        return self.spec.cal_mixture.pdf(x)

    def test_density(self, x):
        return self.spec.test_mixture.pdf(x)

    def oracle_weights(self, x):
        return np.exp(self.spec.test_mixture.log_pdf(x) - self.spec.cal_mixture.log_pdf(x))


def sample_split(spec: SyntheticSpec, mixture, n, rng):
    x = mixture.sample(n, rng)
    return x, spec.label_rule.sample(x, rng)


def gen_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Draw train/cal/test/unlabeled sets; train and cal share the calibration mixture."""
    rng = np.random.default_rng(spec.seed)
    train_x, train_y = sample_split(spec, spec.cal_mixture, spec.n_train, rng)
    cal_x, cal_y = sample_split(spec, spec.cal_mixture, spec.n_cal, rng)
    test_x, test_y = sample_split(spec, spec.test_mixture, spec.n_test, rng)
    pool = spec.unlabeled_mixture or spec.test_mixture
    unlabeled_x = pool.sample(spec.n_unlabeled, rng)
    return SyntheticData(spec, train_x, train_y, cal_x, cal_y, test_x, test_y, unlabeled_x)


@dataclass
class InOutFixture:
    x: np.ndarray
    y: np.ndarray
    ood: np.ndarray


def in_out_fixture(seed=0, n=2000, centre=3.0, spread=0.5, ring_radius=0.5, ring_width=0.1):
    """Two labeled Gaussian blobs at ``(+-centre, 0)`` and an unlabeled ring between them."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, 2)) * spread + np.where(y[:, None] == 1, [centre, 0.0],
                                                         [-centre, 0.0])
    angle = rng.uniform(0.0, 2 * np.pi, n)
    radius = rng.normal(ring_radius, ring_width, n)
    ood = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])
    return InOutFixture(x=x, y=y, ood=ood)
