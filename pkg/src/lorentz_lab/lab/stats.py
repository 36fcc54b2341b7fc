"""Small statistics helpers shared by the estimators: Wilson intervals,
log-log slope fits with regression error, and a couple of goodness-of-fit
wrappers around scipy.stats."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass
class EstimateCI:
    """A point estimate with a 95% half-width and its trial count."""

    estimate: float
    half_width: float
    trials: int
    count: int = 0

    @property
    def lo(self) -> float:
        return self.estimate - self.half_width

    @property
    def hi(self) -> float:
        return self.estimate + self.half_width


def wilson(count: int, trials: int, z: float = 1.959963984540054) -> EstimateCI:
    """95% Wilson score interval for a binomial proportion."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    p = count / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = (z / denom) * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials ** 2))
    return EstimateCI(p, max(half, 1e-300), trials, count)


def mean_ci(xs: np.ndarray, z: float = 1.959963984540054) -> EstimateCI:
    xs = np.asarray(xs, dtype=float)
    se = xs.std(ddof=1) / math.sqrt(len(xs)) if len(xs) > 1 else math.inf
    return EstimateCI(float(xs.mean()), z * se, len(xs))


@dataclass
class SlopeFit:
    """Least-squares slope of log(p) against log(r)."""

    slope: float
    stderr: float
    intercept: float
    r_values: tuple
    p_values: tuple

    def in_band(self, lo: float, hi: float) -> bool:
        return lo <= self.slope <= hi


def fit_log_slope(r_values, p_values) -> SlopeFit:
    """Slope of log p vs log r over >= 3 grid points, with the usual
    regression standard error.  Zero or negative estimates are rejected."""
    r = np.asarray(r_values, dtype=float)
    p = np.asarray(p_values, dtype=float)
    if len(r) < 3:
        raise ValueError("need at least 3 grid points for a slope")
    if np.any(p <= 0.0):
        raise ValueError("cannot fit a log slope through zero estimates")
    x, y = np.log(r), np.log(p)
    res = stats.linregress(x, y)
    return SlopeFit(float(res.slope), float(res.stderr), float(res.intercept),
                    tuple(r), tuple(p))


def ks_uniform_cos(values: np.ndarray) -> float:
    """KS p-value for values against the uniform law on [-1, 1]."""
    return float(stats.kstest(values, stats.uniform(loc=-1.0, scale=2.0).cdf).pvalue)


def ks_exponential(values: np.ndarray) -> float:
    return float(stats.kstest(values, "expon").pvalue)


def ks_two_sample(a: np.ndarray, b: np.ndarray) -> float:
    return float(stats.ks_2samp(a, b).pvalue)


def chi2_counts_pvalue(counts_a: np.ndarray, counts_b: np.ndarray,
                       min_expected: float = 5.0) -> float:
    """Two-sample chi-square on integer count histograms (e.g. collision
    counts per trial).  Bins are pooled from the right until every expected
    cell count reaches ``min_expected``."""
    n = max(len(counts_a), len(counts_b))
    a = np.bincount(counts_a, minlength=n).astype(float)
    b = np.bincount(counts_b, minlength=n).astype(float)
    while len(a) > 2:
        expected = (a + b) * min(a.sum(), b.sum()) / (a.sum() + b.sum())
        if expected[-1] >= min_expected and expected[-2] >= min_expected:
            break
        a[-2] += a[-1]
        b[-2] += b[-1]
        a, b = a[:-1], b[:-1]
    table = np.vstack((a, b))
    keep = table.sum(axis=0) > 0
    return float(stats.chi2_contingency(table[:, keep])[1])


def normal_ks_pvalue(values: np.ndarray, sigma: float) -> float:
    """KS p-value against a centred normal with a *known* (oracle) sigma,
    so no Lilliefors correction is needed."""
    return float(stats.kstest(values, stats.norm(loc=0.0, scale=sigma).cdf).pvalue)
