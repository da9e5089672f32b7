"""Nonparametric comparisons: Wilcoxon signed-rank, stratified bootstrap, probability of improvement.

All randomness goes through an explicit seed. Rank ties get midranks.
"""
from __future__ import annotations

import csv
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import CamalError, InsufficientDataError, ShapeError

UNDEFINED = "undefined"
EXACT_MAX_N = 20
MIN_PAIRS = 5
SIGNIFICANCE = 0.05


@dataclass
class TrialMatrix:
    """``m`` strata (settings, environments) by ``k`` trials of one scalar metric."""

    values: np.ndarray
    row_labels: list = field(default_factory=list)
    col_labels: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        m, k = self.values.shape
        if m < 1 or k < 2:
            raise ShapeError(f"trial matrix needs m >= 1 and k >= 2, got {m}x{k}")
        if not np.isfinite(self.values).all():
            raise ShapeError("trial matrix contains non-finite values")
        self.row_labels = list(self.row_labels) or [str(i) for i in range(m)]
        self.col_labels = list(self.col_labels) or [str(j) for j in range(k)]

    @property
    def shape(self):
        return self.values.shape

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stratum", *self.col_labels])
            for label, row in zip(self.row_labels, self.values):
                w.writerow([label, *(repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], [r for r in rows[1:] if r]
        return cls(np.array([[float(v) for v in r[1:]] for r in body]),
                   [r[0] for r in body], header[1:])


@dataclass
class TestOutcome:
    statistic: float
    p_value: float
    method: str
    n: int
    alternative: str = "greater"
    details: dict = field(default_factory=dict)

    @property
    def significant(self):
        return self.p_value < SIGNIFICANCE

    def to_dict(self):
        return {"statistic": self.statistic, "p_value": self.p_value, "method": self.method,
                "n": self.n, "alternative": self.alternative, "significant": self.significant,
                **self.details}


class BootstrapError(CamalError):
    def __init__(self, index, cause):
        super().__init__(f"aggregator failed on resample {index}: {cause!r}")
        self.index = index


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


def signed_rank_sums(a, b):
    """Drop zero differences, midrank |d|, return (R+, R-, doubled ranks, n)."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    ranks = rankdata(np.abs(d), method="average")
    return float(ranks[d > 0].sum()), float(ranks[d < 0].sum()), np.rint(2 * ranks).astype(int), d


def _exact_upper_tail(doubled_ranks, observed_doubled):
    """P(R+ >= observed) over all 2^n equally likely sign patterns.

    Counts patterns by subset sum over doubled (integer) midranks.
    """
    total = int(doubled_ranks.sum())
    counts = [0] * (total + 1)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks:
        r = int(r)
        for s in range(reach, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
        reach += r
    hits = sum(counts[max(observed_doubled, 0):])
    return hits / 2 ** len(doubled_ranks)


def wsrt_one_tailed(a, b, alternative="greater", exact_max_n=EXACT_MAX_N):
    """One-tailed Wilcoxon signed-rank test of ``a`` against ``b``.

    ``alternative='greater'`` tests whether ``a`` tends to exceed ``b``.
    The statistic reported is T = min(R+, R-). Exact p-values up to
    ``exact_max_n`` nonzero pairs, normal approximation with continuity
    correction (and tie correction) beyond.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"paired inputs must be equal-length vectors, got {a.shape} and {b.shape}")
    if alternative not in ("greater", "less"):
        raise ValueError(f"alternative must be 'greater' or 'less', got {alternative!r}")
    r_plus, r_minus, doubled, d = signed_rank_sums(a, b)
    n = len(d)
    if n < MIN_PAIRS:
        raise InsufficientDataError(f"{n} nonzero paired differences; need at least {MIN_PAIRS}")
    # 'less' is 'greater' with the roles of R+ and R- exchanged
    tail_stat = r_plus if alternative == "greater" else r_minus
    if n <= exact_max_n:
        p = _exact_upper_tail(doubled, int(round(2 * tail_stat)))
        method = "exact"
    else:
        mean = n * (n + 1) / 4
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - ((tie_counts**3 - tie_counts).sum()) / 48
        z = (tail_stat - mean - 0.5) / math.sqrt(var)
        p = float(ndtr(-z))
        method = "normal"
    return TestOutcome(min(r_plus, r_minus), min(max(p, 0.0), 1.0), method, n, alternative,
                       {"r_plus": r_plus, "r_minus": r_minus})


# ---------------------------------------------------------------------------
# bootstrap and probability of improvement


def _values(x):
    return x.values if isinstance(x, TrialMatrix) else np.atleast_2d(np.asarray(x, dtype=np.float64))


def mean_aggregate(*matrices):
    return float(np.mean(matrices[0]))


def poi(x, y):
    """Probability that X beats Y, averaged over strata; ties count one half."""
    xv, yv = _values(x), _values(y)
    if xv.shape != yv.shape:
        raise ShapeError(f"trial matrices differ in shape: {xv.shape} vs {yv.shape}")
    m, k = xv.shape
    xi, yj = xv[:, :, None], yv[:, None, :]
    # doubled integer score keeps poi(X, Y) + poi(Y, X) == 1 in floating point
    doubled = int(2 * (xi > yj).sum() + (xi == yj).sum())
    return doubled / (2 * m * k * k)


def stratified_bootstrap(matrices, aggregator: Callable = mean_aggregate, n_resamples=10_000,
                         ci_level=0.95, seed=0):
    """Percentile bootstrap CI, resampling trials with replacement inside each stratum.

    ``matrices`` is one matrix or a sequence of matrices (resampled
    independently, e.g. the two arguments of :func:`poi`). Returns
    ``(point_estimate, ci_low, ci_high)``.
    """
    if n_resamples < 1000:
        raise ValueError("n_resamples must be at least 1000")
    if not 0 < ci_level < 1:
        raise ValueError("ci_level must lie in (0, 1)")
    if isinstance(matrices, (TrialMatrix, np.ndarray)):
        matrices = (matrices,)
    mats = [_values(mm) for mm in matrices]
    rng = np.random.default_rng(seed)
    draws = [rng.integers(0, v.shape[1], size=(n_resamples, *v.shape)) for v in mats]
    dist = np.empty(n_resamples)
    if aggregator is mean_aggregate:
        # same draws, same arithmetic order per resample, no Python loop
        dist = np.take_along_axis(mats[0][None], draws[0], axis=2).reshape(n_resamples, -1).mean(axis=1)
    for r in range(0 if aggregator is mean_aggregate else n_resamples):
        sample = [np.take_along_axis(v, idx[r], axis=1) for v, idx in zip(mats, draws)]
        try:
            dist[r] = aggregator(*sample)
        except Exception as exc:
            raise BootstrapError(r, exc) from exc
    tail = (1 - ci_level) / 2 * 100
    lo, hi = np.percentile(dist, [tail, 100 - tail])
    return float(aggregator(*mats)), float(lo), float(hi)


def poi_test(x, y, n_resamples=10_000, ci_level=0.95, seed=0):
    """POI with its bootstrap CI; significant iff POI > 0.5 and 0.5 lies outside the CI."""
    point, lo, hi = stratified_bootstrap((x, y), poi, n_resamples, ci_level, seed)
    significant = point > 0.5 and not (lo <= 0.5 <= hi)
    return {"poi": point, "ci_low": lo, "ci_high": hi, "significant": bool(significant)}


# ---------------------------------------------------------------------------
# correlations


@dataclass(frozen=True)
class Correlation:
    spearman: float | str
    pearson: float | str

    @property
    def defined(self):
        return self.spearman != UNDEFINED


def _pearson(x, y):
    xc, yc = x - x.mean(), y - y.mean()
    return float(np.clip((xc @ yc) / math.sqrt((xc @ xc) * (yc @ yc)), -1.0, 1.0))


def correlations(xs: Sequence[float], ys: Sequence[float]):
    """Spearman (Pearson on midranks) and Pearson; ``"undefined"`` when either series is constant."""
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ShapeError("correlations need two equal-length series of length >= 2")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return Correlation(UNDEFINED, UNDEFINED)
    return Correlation(_pearson(rankdata(x), rankdata(y)), _pearson(x, y))
