"""Train/calibration/test partitions and unlabeled-pool filtering.

Three strategies: a seeded random split, a scaffold split that sends the
rarest scaffold groups to test, and a greedy fingerprint split that sends the
points least similar to everything else to test. Ties always go to the lower
index (or the smaller key), so results are reproducible and easy to check by
brute force.
"""

from dataclasses import dataclass

import numpy as np

from .errors import CannotSplitError, InputError


@dataclass(frozen=True)
class SplitAssignment:
    train_idx: np.ndarray
    cal_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        for name in ("train_idx", "cal_idx", "test_idx"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=int))

    @property
    def n(self):
        return self.train_idx.size + self.cal_idx.size + self.test_idx.size

    def labels(self):
        """Per-point partition name, in index order."""
        out = np.empty(self.n, dtype=object)
        out[self.train_idx] = "train"
        out[self.cal_idx] = "cal"
        out[self.test_idx] = "test"
        return out


def _check_fracs(n, test_frac, cal_frac):
    if n < 3:
        raise InputError(f"need at least 3 points to split, got {n}")
    if not (0.0 <= test_frac < 1.0 and 0.0 <= cal_frac < 1.0 and test_frac + cal_frac < 1.0):
        raise InputError(f"invalid split fractions test={test_frac} cal={cal_frac}")


def quota(n, frac):
    # the epsilon keeps 0.15 * 100 from flooring to 14
    return int(np.floor(n * frac + 1e-9))


def _split_rest(rest, n, cal_frac, seed):
    rest = np.asarray(rest, dtype=int)
    perm = np.random.default_rng(seed).permutation(rest)
    n_cal = min(quota(n, cal_frac), rest.size)
    return np.sort(perm[n_cal:]), np.sort(perm[:n_cal])


def random_split(n, test_frac=0.15, cal_frac=0.15, seed=0):
    _check_fracs(n, test_frac, cal_frac)
    perm = np.random.default_rng(seed).permutation(n)
    n_test, n_cal = quota(n, test_frac), quota(n, cal_frac)
    return SplitAssignment(
        train_idx=np.sort(perm[n_test + n_cal:]),
        cal_idx=np.sort(perm[n_test:n_test + n_cal]),
        test_idx=np.sort(perm[:n_test]),
    )


def _as_bits(fingerprints):
    fps = np.asarray(fingerprints)
    if fps.ndim != 2 or fps.shape[1] < 1:
        raise InputError("fingerprints must be an n x L bit matrix with L >= 1")
    if not np.all((fps == 0) | (fps == 1)):
        raise InputError("fingerprints must be 0/1")
    return fps.astype(bool)


def jaccard(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InputError(f"fingerprint lengths differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def jaccard_matrix(a, b=None):
    """All pairwise Jaccard similarities between rows of ``a`` and ``b``."""
    a = _as_bits(a)
    b = a if b is None else _as_bits(b)
    if a.shape[1] != b.shape[1]:
        raise InputError("fingerprint lengths differ")
    ai, bi = a.astype(np.int64), b.astype(np.int64)
    inter = ai @ bi.T
    union = ai.sum(axis=1)[:, None] + bi.sum(axis=1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return sim


def fingerprint_split(fingerprints, test_frac=0.15, cal_frac=0.15, seed=0):
    """Greedy least-maximum-similarity selection of the test set.

    At each step the candidate whose largest similarity to the points still
    outside test is smallest moves to test. Removing a point can only lower
    the other points' maxima, so the row maxima are recomputed only for rows
    whose current maximum was attained at the removed point.
    """
    sim = jaccard_matrix(fingerprints)
    n = sim.shape[0]
    _check_fracs(n, test_frac, cal_frac)
    np.fill_diagonal(sim, -np.inf)
    outside = np.ones(n, dtype=bool)
    row_max = sim.max(axis=1) if n > 1 else np.full(n, -np.inf)
    chosen = []
    for _ in range(quota(n, test_frac)):
        # -inf (no other points left outside) sorts first, like an empty max
        cand = np.where(outside, row_max, np.inf)
        pick = int(np.argmin(cand))
        chosen.append(pick)
        outside[pick] = False
        stale = np.flatnonzero(outside & (sim[:, pick] == row_max))
        if stale.size:
            block = sim[np.ix_(stale, np.flatnonzero(outside))]
            row_max[stale] = block.max(axis=1) if block.shape[1] else -np.inf
    train, cal = _split_rest(np.flatnonzero(outside), n, cal_frac, seed)
    return SplitAssignment(train_idx=train, cal_idx=cal, test_idx=np.sort(chosen))


def scaffold_split(scaffold_ids, test_frac=0.15, cal_frac=0.15, seed=0):
    """Whole scaffold groups go to test, smallest first, until the quota is met."""
    keys = list(scaffold_ids)
    n = len(keys)
    _check_fracs(n, test_frac, cal_frac)
    groups = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    if len(groups) == 1:
        raise CannotSplitError("a single scaffold covers every point")
    order = sorted(groups, key=lambda k: (len(groups[k]), k))
    target = quota(n, test_frac)
    test = []
    for key in order:
        if len(test) >= target:
            break
        test.extend(groups[key])
    if len(test) == n:
        raise CannotSplitError("the test quota would take every scaffold")
    in_test = np.zeros(n, dtype=bool)
    in_test[test] = True
    train, cal = _split_rest(np.flatnonzero(~in_test), n, cal_frac, seed)
    return SplitAssignment(train_idx=train, cal_idx=cal, test_idx=np.flatnonzero(in_test))


def training_similarity_threshold(train_fps, statistic="per-point-max"):
    """Similarity cutoff derived from the training fingerprints.

    ``per-point-max``: smallest, over training points, of each point's largest
    similarity to another training point. ``all-pairs-min``: smallest
    similarity over all distinct pairs.
    """
    sim = jaccard_matrix(train_fps)
    if sim.shape[0] < 2:
        return None
    off = ~np.eye(sim.shape[0], dtype=bool)
    if statistic == "per-point-max":
        return float(np.where(off, sim, -np.inf).max(axis=1).min())
    if statistic == "all-pairs-min":
        return float(sim[off].min())
    raise InputError(f"unknown threshold statistic {statistic!r}")


def filter_unlabeled(unlabeled, train, mode="scaffold", statistic="per-point-max"):
    """Indices of unlabeled points kept after removing those too close to train.

    ``mode="scaffold"``: ``unlabeled`` and ``train`` are scaffold keys; points
    sharing a training scaffold are dropped.
    ``mode="tanimoto"``: they are fingerprint matrices; a point is kept when
    its largest similarity to any training point is below the training
    threshold.
    """
    if unlabeled is None or train is None:
        raise InputError(f"{mode} filtering needs metadata for both sets")
    if mode == "scaffold":
        seen = set(train)
        return np.array([i for i, key in enumerate(unlabeled) if key not in seen], dtype=int)
    if mode != "tanimoto":
        raise InputError(f"unknown filter mode {mode!r}")
    n_unl = len(unlabeled)
    if len(train) == 0 or n_unl == 0:
        return np.arange(n_unl)
    tau = training_similarity_threshold(train, statistic)
    if tau is None:
        return np.arange(n_unl)
    best = jaccard_matrix(unlabeled, train).max(axis=1)
    return np.flatnonzero(best < tau)
