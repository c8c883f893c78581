"""End-to-end runs: split, train, estimate weights, build sets, report.

The order of operations is fixed: split the labeled data, train the
classifier on the training part (with the unlabeled pool as out-of-
distribution examples), score the calibration part, fit a density model on
calibration inputs and another on the full test set, weight calibration
points once, and then build sets for every alpha with only the test point's
own weight varying.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np

from .conformal import check_probabilities, conformal_sets, nonconformity_scores
from .datasets import Dataset, fmt
from .density import (
    BandwidthSearch,
    LogisticConfig,
    fit_kde,
    logistic_ratio_weights,
    ratio_weights,
    select_bandwidth,
)
from .energy import EnergyConfig, EnergyMlp, energy_score, softmax, train_ebm
from .errors import InputError, ShiftCPError
from .evaluation import CoverageReport, coverage_report
from .splits import fingerprint_split, filter_unlabeled, random_split, scaffold_split
from .synthetic import SyntheticData

logger = logging.getLogger(__name__)

WEIGHTINGS = ("none", "kde-energy", "kde-feature", "logistic", "oracle")
KDE_INPUTS = ("logits", "scalar-energy", "features")
SPLITS = ("random", "scaffold", "fingerprint")
FILTERS = ("none", "scaffold", "tanimoto")


@dataclass(frozen=True)
class PipelineConfig:
    weighting: str = "kde-energy"
    kde_input: str = "logits"
    alphas: Tuple[float, ...] = (0.1,)
    split: str = "random"
    test_frac: float = 0.15
    cal_frac: float = 0.15
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    bandwidth: Union[str, float] = "cv"
    folds: int = 10
    weight_cap: Optional[float] = None
    seed: int = 0
    min_cal_per_class: int = 10
    mondrian: bool = True
    unlabeled_filter: str = "none"

    def __post_init__(self):
        if self.weighting not in WEIGHTINGS:
            raise InputError(f"weighting must be one of {WEIGHTINGS}")
        if self.kde_input not in KDE_INPUTS:
            raise InputError(f"kde input must be one of {KDE_INPUTS}")
        if self.split not in SPLITS:
            raise InputError(f"split must be one of {SPLITS}")
        if self.unlabeled_filter not in FILTERS:
            raise InputError(f"unlabeled filter must be one of {FILTERS}")
        alphas = tuple(float(a) for a in self.alphas)
        if not alphas or any(not 0.0 < a < 1.0 for a in alphas):
            raise InputError("every alpha must lie in (0, 1)")
        object.__setattr__(self, "alphas", alphas)
        if self.bandwidth != "cv":
            try:
                bw = float(self.bandwidth)
            except (TypeError, ValueError):
                raise InputError(f"bandwidth must be 'cv' or a number, got {self.bandwidth!r}") from None
            if not bw > 0:
                raise InputError("bandwidth must be positive")
            object.__setattr__(self, "bandwidth", bw)
        if self.folds < 2:
            raise InputError("need at least 2 folds")
        if self.weight_cap is not None and not self.weight_cap > 0:
            raise InputError("weight cap must be positive")

    @property
    def density_space(self):
        """Space the density-ratio estimator works in."""
        return "features" if self.weighting == "kde-feature" else self.kde_input


@dataclass
class PipelineInputs:
    """Data for one run.

    ``ratio_oracle`` maps raw inputs to exact likelihood ratios and is only
    available for synthetic data. ``logits`` holds precomputed classifier
    outputs for ``cal`` and ``test`` (in that order) and bypasses training.
    """

    cal: Dataset
    test: Dataset
    train: Optional[Dataset] = None
    unlabeled: Optional[Dataset] = None
    ratio_oracle: Optional[Callable] = None
    logits: Optional[Tuple[np.ndarray, np.ndarray]] = None


def split_dataset(data: Dataset, config: PipelineConfig, test_frac=None):
    test_frac = config.test_frac if test_frac is None else test_frac
    n = len(data)
    if config.split == "random":
        return random_split(n, test_frac, config.cal_frac, config.seed)
    if config.split == "scaffold":
        if data.scaffolds is None:
            raise InputError("scaffold split needs a scaffold column")
        return scaffold_split(data.scaffolds, test_frac, config.cal_frac, config.seed)
    if data.fingerprints is None:
        raise InputError("fingerprint split needs an fp column")
    return fingerprint_split(data.fingerprints, test_frac, config.cal_frac, config.seed)


def inputs_from_labeled(data: Dataset, config: PipelineConfig, test: Optional[Dataset] = None,
                        unlabeled: Optional[Dataset] = None):
    """Split one labeled file; with an external test set only train/cal are carved out."""
    if not data.labeled:
        raise InputError("the labeled dataset has no labels")
    split = split_dataset(data, config, test_frac=0.0 if test is not None else None)
    return PipelineInputs(
        train=data.subset(split.train_idx),
        cal=data.subset(split.cal_idx),
        test=test if test is not None else data.subset(split.test_idx),
        unlabeled=unlabeled,
    )


def inputs_from_synthetic(data: SyntheticData):
    def ds(prefix, x, y=None):
        return Dataset(ids=[f"{prefix}{i}" for i in range(len(x))], x=x, y=y)

    return PipelineInputs(
        train=ds("train", data.train_x, data.train_y),
        cal=ds("cal", data.cal_x, data.cal_y),
        test=ds("test", data.test_x, data.test_y),
        unlabeled=ds("unl", data.unlabeled_x),
        ratio_oracle=data.oracle_weights,
    )


@dataclass
class ModelOutputs:
    """Classifier outputs for one set of inputs."""

    logits: np.ndarray
    probs: np.ndarray
    features: Optional[np.ndarray] = None
    temperature: float = 1.0

    def points(self, space):
        if space == "logits":
            return self.logits
        if space == "scalar-energy":
            return energy_score(self.logits, self.temperature)[:, None]
        if self.features is None:
            raise InputError("penultimate features are unavailable for precomputed logits")
        return self.features


def model_outputs(model: Optional[EnergyMlp], x=None, logits=None, temperature=1.0):
    if model is not None:
        features, logits = model.forward(x)
        return ModelOutputs(logits, model.predict_proba(x), features, model.temperature)
    logits = np.asarray(logits, dtype=float)
    return ModelOutputs(logits, softmax(logits, temperature), None, temperature)


@dataclass
class Weights:
    cal: Optional[np.ndarray]
    test: Optional[np.ndarray]
    bandwidth_cal: Optional[float] = None
    bandwidth_test: Optional[float] = None
    converged: bool = True


def _bandwidth(points, config: PipelineConfig):
    if config.bandwidth == "cv":
        return select_bandwidth(points, BandwidthSearch(folds=config.folds, seed=config.seed))
    return float(config.bandwidth)


def estimate_weights(config: PipelineConfig, cal_points, test_points, cal_x=None, test_x=None,
                     ratio_oracle=None):
    """Calibration weights (once) and one weight per test point."""
    if config.weighting == "none":
        return Weights(None, None)
    if config.weighting == "oracle":
        if ratio_oracle is None:
            raise InputError("oracle weighting needs synthetic data with known densities")
        cal_w, test_w = ratio_oracle(cal_x), ratio_oracle(test_x)
        if config.weight_cap is not None:
            cal_w, test_w = np.minimum(cal_w, config.weight_cap), np.minimum(test_w, config.weight_cap)
        return Weights(cal_w, test_w)
    if config.weighting == "logistic":
        rw = logistic_ratio_weights(cal_points, test_points, LogisticConfig(cap=config.weight_cap))
        return Weights(rw.cal_weights, rw.test_weight_of(test_points), converged=rw.converged)
    h_cal, h_test = _bandwidth(cal_points, config), _bandwidth(test_points, config)
    rw = ratio_weights(fit_kde(test_points, h_test), fit_kde(cal_points, h_cal), cal_points,
                       cap=config.weight_cap)
    return Weights(rw.cal_weights, rw.test_weight_of(test_points), h_cal, h_test)


@dataclass
class Calibration:
    """Everything about the calibration set that prediction needs."""

    scores: np.ndarray
    labels: np.ndarray
    points: np.ndarray
    n_classes: int
    x: Optional[np.ndarray] = None

    def to_dict(self, space):
        return {
            "n_classes": self.n_classes,
            "space": space,
            "labels": [int(v) for v in self.labels],
            "scores": [float(v) for v in self.scores],
            "points": [[float(v) for v in row] for row in self.points],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                scores=np.asarray(data["scores"], dtype=float),
                labels=np.asarray(data["labels"], dtype=int),
                points=np.asarray(data["points"], dtype=float).reshape(len(data["scores"]), -1),
                n_classes=int(data["n_classes"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed calibration file: {exc}") from None


def calibrate(outputs: ModelOutputs, labels, space, x=None):
    labels = np.asarray(labels, dtype=int)
    probs = check_probabilities(outputs.probs)
    return Calibration(
        scores=nonconformity_scores(probs, labels),
        labels=labels,
        points=outputs.points(space),
        n_classes=probs.shape[1],
        x=x,
    )


def calibration_warnings(cal: Calibration, minimum):
    counts = np.bincount(cal.labels, minlength=cal.n_classes)
    return [f"class {k} has {int(c)} calibration points (minimum {minimum})"
            for k, c in enumerate(counts) if c < minimum]


@dataclass
class AlphaResult:
    alpha: float
    members: np.ndarray
    thresholds: np.ndarray
    report: Optional[CoverageReport]


@dataclass
class PipelineResult:
    config: PipelineConfig
    test_ids: list
    test_labels: Optional[np.ndarray]
    weights: Weights
    alpha_results: list
    warnings: list
    model: Optional[EnergyMlp] = None

    def report_dict(self):
        out = {"alpha_results": []}
        for res in self.alpha_results:
            entry = {"alpha": res.alpha}
            if res.report is not None:
                r = res.report
                entry.update({
                    "per_class_coverage": {str(k): v for k, v in sorted(r.per_class_coverage.items())},
                    "overall_coverage": r.overall_coverage,
                    "mean_set_size": r.mean_set_size,
                    "empty_set_rate": r.empty_set_rate,
                    "macd": r.macd,
                })
            else:
                sizes = res.members.sum(axis=1)
                entry.update({"mean_set_size": float(sizes.mean()),
                              "empty_set_rate": float(np.mean(sizes == 0))})
            out["alpha_results"].append(entry)
        out["weighting"] = self.config.weighting
        out["kde_input"] = self.config.density_space
        out["kde"] = {"bandwidth_cal": self.weights.bandwidth_cal,
                      "bandwidth_test": self.weights.bandwidth_test}
        out["seeds"] = {"split": self.config.seed, "cv": self.config.seed,
                        "train": self.config.energy.seed}
        out["warnings"] = list(self.warnings)
        return out


def predict(cal: Calibration, test_outputs: ModelOutputs, config: PipelineConfig, test_ids,
            test_labels=None, test_x=None, ratio_oracle=None, warnings=()):
    """Weighted (or plain) sets for every configured alpha."""
    test_points = test_outputs.points(config.density_space)
    if test_points.shape[1] != cal.points.shape[1]:
        raise InputError("calibration and test density inputs differ in dimension")
    warnings = list(warnings) + calibration_warnings(cal, config.min_cal_per_class)
    for w in warnings:
        logger.warning(w)
    weights = _staged("weights", estimate_weights, config, cal.points, test_points, cal.x,
                      test_x, ratio_oracle)
    if not weights.converged:
        warnings.append("logistic ratio model did not converge")
    results = []
    for alpha in config.alphas:
        members, thresholds = _staged(
            "sets", conformal_sets, test_outputs.probs, cal.scores, cal.labels, alpha,
            weights.cal, weights.test, config.mondrian)
        report = None
        if test_labels is not None:
            report = coverage_report(members, test_labels, alpha)
        results.append(AlphaResult(alpha, members, thresholds, report))
    return PipelineResult(config, list(test_ids), test_labels, weights, results, warnings)


def _staged(stage, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ShiftCPError as exc:
        exc.stage = stage
        exc.args = (f"[{stage}] {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        raise


def train_classifier(inputs: PipelineInputs, config: PipelineConfig):
    if inputs.train is None or not inputs.train.labeled:
        raise InputError("training needs a labeled training split")
    pool = None
    if config.energy.lam > 0:
        if inputs.unlabeled is None or len(inputs.unlabeled) == 0:
            raise InputError("energy regularization needs an unlabeled pool (or --lambda 0)")
        pool = inputs.unlabeled
        if config.unlabeled_filter != "none":
            meta = "scaffolds" if config.unlabeled_filter == "scaffold" else "fingerprints"
            keep = filter_unlabeled(getattr(pool, meta), getattr(inputs.train, meta),
                                    mode=config.unlabeled_filter)
            if keep.size == 0:
                raise InputError("the unlabeled filter removed every point")
            pool = pool.subset(keep)
    n_classes = int(max(inputs.train.y.max(), inputs.cal.y.max())) + 1
    result = train_ebm(inputs.train.x, inputs.train.y, None if pool is None else pool.x,
                       config.energy, n_classes=n_classes)
    return result.model


def run_pipeline(config: PipelineConfig, inputs: PipelineInputs) -> PipelineResult:
    if not inputs.cal.labeled:
        raise InputError("the calibration split has no labels")
    if config.weighting == "oracle" and inputs.ratio_oracle is None:
        raise InputError("oracle weighting needs synthetic data with known densities")
    model = None
    if inputs.logits is None:
        model = _staged("train", train_classifier, inputs, config)
        cal_out = model_outputs(model, inputs.cal.x)
        test_out = model_outputs(model, inputs.test.x)
    else:
        t = config.energy.temperature
        cal_out = model_outputs(None, logits=inputs.logits[0], temperature=t)
        test_out = model_outputs(None, logits=inputs.logits[1], temperature=t)
    cal = _staged("calibrate", calibrate, cal_out, inputs.cal.y, config.density_space,
                  inputs.cal.x)
    result = predict(cal, test_out, config, inputs.test.ids, inputs.test.y, inputs.test.x,
                     inputs.ratio_oracle)
    result.model = model
    return result


def report_json(result: PipelineResult):
    return json.dumps(result.report_dict(), indent=2) + "\n"


def emit_report(result: PipelineResult, out_dir):
    """Write ``report.json`` and the per-point ``points.csv`` dump into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report_json(result), encoding="utf-8")
    k = result.alpha_results[0].members.shape[1]
    header = ["id", "label", "cal_weight_sum", "test_weight"]
    for res in result.alpha_results:
        header += [f"threshold_{res.alpha}_{j}" for j in range(k)]
        header += [f"member_{res.alpha}_{j}" for j in range(k)]
    w = result.weights
    cal_sum = "" if w.cal is None else fmt(np.sum(w.cal))
    with (out / "points.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, ident in enumerate(result.test_ids):
            label = "" if result.test_labels is None else str(int(result.test_labels[i]))
            row = [ident, label, cal_sum, "1.0" if w.test is None else fmt(w.test[i])]
            for res in result.alpha_results:
                row += [fmt(t) for t in res.thresholds[i]]
                row += [str(int(m)) for m in res.members[i]]
            writer.writerow(row)
    return out / "report.json", out / "points.csv"


def read_points(path):
    """Parse a ``points.csv`` dump into ids, labels and per-alpha membership matrices."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    alphas = []
    for name in header:
        if name.startswith("member_"):
            a = float(name.split("_")[1])
            if a not in alphas:
                alphas.append(a)
    members = {}
    for a in alphas:
        cols = [j for j, name in enumerate(header) if name.startswith(f"member_{a}_")]
        members[a] = np.array([[r[j] == "1" for j in cols] for r in body], dtype=bool)
    labels = (np.array([int(r[1]) for r in body]) if body and all(r[1] for r in body) else None)
    return [r[0] for r in body], labels, members


def config_to_dict(config: PipelineConfig):
    data = asdict(config)
    data["alphas"] = list(config.alphas)
    data["energy"]["hidden"] = list(config.energy.hidden)
    return data


def config_from_dict(data):
    data = dict(data)
    energy = dict(data.pop("energy", {}))
    if "hidden" in energy:
        energy["hidden"] = tuple(energy["hidden"])
    return PipelineConfig(energy=EnergyConfig(**energy), **data)


def with_overrides(config: PipelineConfig, **changes):
    return replace(config, **{k: v for k, v in changes.items() if v is not None})
