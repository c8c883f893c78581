"""Coverage metrics for prediction sets."""

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import InputError, NumericalError


@dataclass(frozen=True)
class CoverageReport:
    """Coverage of one batch of prediction sets.

    Classes without test points are absent from ``per_class_coverage`` rather
    than reported as 0.
    """

    per_class_coverage: Dict[int, float]
    overall_coverage: float
    mean_set_size: float
    empty_set_rate: float
    counts: Dict[int, int]
    alpha: float
    macd: float
    tail_macd: Optional[float] = None
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "per_class_coverage": {str(k): v for k, v in sorted(self.per_class_coverage.items())},
            "overall_coverage": self.overall_coverage,
            "mean_set_size": self.mean_set_size,
            "empty_set_rate": self.empty_set_rate,
            "macd": self.macd,
            "counts": {str(k): v for k, v in sorted(self.counts.items())},
        }


def membership_matrix(sets, n_classes=None):
    """Boolean n x K matrix from a matrix or from a sequence of label collections."""
    if isinstance(sets, np.ndarray) and sets.ndim == 2:
        return sets.astype(bool)
    label_sets = [tuple(getattr(s, "labels", s)) for s in sets]
    if n_classes is None:
        n_classes = 1 + max((max(s) for s in label_sets if s), default=-1)
    out = np.zeros((len(label_sets), max(n_classes, 1)), dtype=bool)
    for i, s in enumerate(label_sets):
        for y in s:
            if not 0 <= y < out.shape[1]:
                raise InputError(f"set {i} contains label {y} outside 0..{out.shape[1] - 1}")
            out[i, y] = True
    return out


def macd(coverages, alpha):
    """Mean absolute deviation of realized coverages from ``1 - alpha``."""
    cov = np.asarray(coverages, dtype=float).ravel()
    if cov.size == 0:
        raise InputError("macd needs at least one coverage value")
    return float(np.mean(np.abs(cov - (1.0 - alpha))))


def tail_macd(coverages, alpha, fraction=0.25):
    """Mean of the worst ``fraction`` of absolute deviations (at least one value)."""
    dev = np.sort(np.abs(np.asarray(coverages, dtype=float).ravel() - (1.0 - alpha)))[::-1]
    if dev.size == 0:
        raise InputError("tail macd needs at least one coverage value")
    k = max(1, int(np.ceil(fraction * dev.size)))
    return float(dev[:k].mean())


def coverage_report(sets, labels, alpha, n_classes=None):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise InputError("coverage report needs at least one test point")
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")
    if n_classes is None and not (isinstance(sets, np.ndarray) and sets.ndim == 2):
        n_classes = int(labels.max()) + 1
    members = membership_matrix(sets, n_classes)
    if members.shape[0] != labels.size:
        raise InputError(f"{members.shape[0]} sets but {labels.size} labels")
    if labels.min() < 0 or labels.max() >= members.shape[1]:
        raise InputError("labels outside the class range of the sets")
    covered = members[np.arange(labels.size), labels]
    per_class, counts = {}, {}
    for y in np.unique(labels):
        mask = labels == y
        counts[int(y)] = int(mask.sum())
        per_class[int(y)] = float(covered[mask].mean())
    sizes = members.sum(axis=1)
    class_cov = list(per_class.values())
    return CoverageReport(
        per_class_coverage=per_class,
        overall_coverage=float(covered.mean()),
        mean_set_size=float(sizes.mean()),
        empty_set_rate=float(np.mean(sizes == 0)),
        counts=counts,
        alpha=float(alpha),
        macd=macd(class_cov, alpha),
        tail_macd=tail_macd(class_cov, alpha),
    )


def coverage_gap_reduction(method_macd, baseline_macd):
    """Percent of the baseline's coverage gap removed by the method."""
    if baseline_macd == 0:
        raise NumericalError("baseline coverage gap is zero; reduction is undefined")
    if baseline_macd < 0 or method_macd < 0:
        raise InputError("coverage gaps are nonnegative")
    return 100.0 * (baseline_macd - method_macd) / baseline_macd
