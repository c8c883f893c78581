"""Repeated-draw coverage experiments on synthetic data.

Each trial draws a fresh calibration set from the calibration mixture and a
fresh test set from the test mixture, then builds sets with every requested
weighting on the same draws, so methods are compared pairwise.
"""

from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

from .energy import EnergyMlp
from .evaluation import macd
from .pipeline import PipelineConfig, calibrate, model_outputs, predict
from .synthetic import SyntheticSpec, sample_split


@dataclass
class MonteCarloResult:
    alphas: tuple
    coverage: np.ndarray  # (trials, alphas), overall coverage per trial
    class_coverage: np.ndarray  # (trials, alphas, K); nan where a class has no test points
    set_size: np.ndarray  # (trials, alphas)

    def mean_coverage(self, alpha):
        return float(self.coverage[:, self.alphas.index(alpha)].mean())

    def macd(self, alpha):
        """Mean absolute deviation of the per-trial coverages from ``1 - alpha``."""
        return macd(self.coverage[:, self.alphas.index(alpha)], alpha)


def coverage_trials(spec: SyntheticSpec, model: EnergyMlp, weightings: Sequence[str] = ("none",),
                    alphas=(0.1,), n_trials=500, n_cal=500, n_test=500, seed=0,
                    **config_kwargs) -> Dict[str, MonteCarloResult]:
    """Run ``n_trials`` draws; extra keyword arguments go to :class:`PipelineConfig`."""
    alphas = tuple(float(a) for a in alphas)
    configs = {w: PipelineConfig(weighting=w, alphas=alphas, min_cal_per_class=0, **config_kwargs)
               for w in weightings}
    k = model.n_classes
    shape = (n_trials, len(alphas))
    out = {w: MonteCarloResult(alphas, np.empty(shape), np.full(shape + (k,), np.nan),
                               np.empty(shape)) for w in weightings}

    def oracle(x):
        return np.exp(spec.test_mixture.log_pdf(x) - spec.cal_mixture.log_pdf(x))

    ids = [str(i) for i in range(n_test)]
    for trial in range(n_trials):
        rng = np.random.default_rng([seed, trial])
        cal_x, cal_y = sample_split(spec, spec.cal_mixture, n_cal, rng)
        test_x, test_y = sample_split(spec, spec.test_mixture, n_test, rng)
        cal_out, test_out = model_outputs(model, cal_x), model_outputs(model, test_x)
        for w, config in configs.items():
            cal = calibrate(cal_out, cal_y, config.density_space, cal_x)
            result = predict(cal, test_out, config, ids, test_y, test_x, oracle)
            res = out[w]
            for j, ar in enumerate(result.alpha_results):
                res.coverage[trial, j] = ar.report.overall_coverage
                res.set_size[trial, j] = ar.report.mean_set_size
                for label, cov in ar.report.per_class_coverage.items():
                    res.class_coverage[trial, j, label] = cov
    return out
