"""Small distributional test kit used by the acceptance experiments.

All functions are pure.  KS p-values use the asymptotic Kolmogorov
distribution from :mod:`scipy.stats`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats as _st

from .errors import EstimationError, PreconditionError

__all__ = [
    "TestReport",
    "ecdf",
    "ks_one_sample",
    "ks_two_sample",
    "gamma_shape_moment",
    "poisson_dispersion",
    "correlation",
]

MIN_SAMPLES = 20


@dataclass(frozen=True)
class TestReport:
    """Outcome of one statistical test.

    ``verdict`` is True when the null hypothesis is *not* rejected at ``alpha``.
    ``interval`` holds a confidence interval where one makes sense.
    """

    __test__ = False  # keep pytest from collecting this class

    name: str
    statistic: float
    p_value: float
    n: int
    alpha: float = 0.01
    interval: tuple[float, float] | None = None

    @property
    def verdict(self) -> bool:
        return bool(self.p_value > self.alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = self.verdict
        if self.interval is not None:
            d["interval"] = list(self.interval)
        return d


def _clean(samples, name="samples") -> np.ndarray:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise PreconditionError(f"{name} is empty")
    if x.size < MIN_SAMPLES:
        raise PreconditionError(f"{name} needs at least {MIN_SAMPLES} values, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise PreconditionError(f"{name} contains non-finite values")
    return x


def ecdf(samples):
    """Sorted sample values and the empirical CDF evaluated at them."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    return x, np.arange(1, x.size + 1) / x.size


def ks_one_sample(samples, cdf, alpha: float = 0.01) -> TestReport:
    """Kolmogorov-Smirnov distance to a continuous CDF with the asymptotic p-value."""
    x = np.sort(_clean(samples))
    n = x.size
    F = np.clip(np.asarray(cdf(x), dtype=float), 0.0, 1.0)
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))
    p = float(_st.kstwobign.sf(math.sqrt(n) * d))
    return TestReport("ks_one_sample", d, min(max(p, 0.0), 1.0), n, alpha)


def ks_two_sample(a, b, alpha: float = 0.01) -> TestReport:
    """Two-sample KS statistic with the asymptotic p-value."""
    a = np.sort(_clean(a, "a"))
    b = np.sort(_clean(b, "b"))
    pts = np.concatenate((a, b))
    Fa = np.searchsorted(a, pts, side="right") / a.size
    Fb = np.searchsorted(b, pts, side="right") / b.size
    d = float(np.max(np.abs(Fa - Fb)))
    en = math.sqrt(a.size * b.size / (a.size + b.size))
    p = float(_st.kstwobign.sf(en * d))
    return TestReport("ks_two_sample", d, min(max(p, 0.0), 1.0), int(a.size + b.size), alpha)


def gamma_shape_moment(samples) -> float:
    """Method-of-moments Gamma shape ``mean**2 / variance``."""
    x = _clean(samples)
    var = float(np.var(x, ddof=1))
    if var <= 0:
        raise EstimationError("degenerate variance")
    return float(np.mean(x)) ** 2 / var


def poisson_dispersion(counts, alpha: float = 0.01) -> TestReport:
    """Variance-to-mean index of counts.

    The statistic is the index; the p-value is the two-sided chi-square
    dispersion test and ``interval`` the matching acceptance band for the
    index under a Poisson null.
    """
    c = _clean(counts, "counts")
    n = c.size
    mean = float(np.mean(c))
    var = float(np.var(c, ddof=1))
    if mean <= 0:
        raise EstimationError("counts have zero mean")
    index = var / mean
    chi2 = (n - 1) * index
    tail = float(_st.chi2.sf(chi2, n - 1))
    p = min(1.0, 2.0 * min(tail, 1.0 - tail))
    lo = float(_st.chi2.ppf(alpha / 2, n - 1)) / (n - 1)
    hi = float(_st.chi2.ppf(1 - alpha / 2, n - 1)) / (n - 1)
    return TestReport("poisson_dispersion", index, p, n, alpha, (lo, hi))


def correlation(x, y, method: str = "pearson", alpha: float = 0.01) -> TestReport:
    """Sample correlation with a Fisher-z confidence interval.

    ``method="spearman"`` correlates ranks, which keeps heavy-tailed inputs
    (excursion lifetimes) from being dominated by a few huge values.
    """
    x = _clean(x, "x")
    y = _clean(y, "y")
    if x.size != y.size:
        raise PreconditionError("x and y must have the same length")
    if method == "spearman":
        x, y = _st.rankdata(x), _st.rankdata(y)
    elif method != "pearson":
        raise PreconditionError(f"unknown method {method!r}")
    if np.std(x) == 0 or np.std(y) == 0:
        raise EstimationError("degenerate variance")
    r = float(np.corrcoef(x, y)[0, 1])
    n = x.size
    z = math.atanh(max(min(r, 1 - 1e-15), -1 + 1e-15))
    se = 1.0 / math.sqrt(n - 3)
    q = float(_st.norm.ppf(1 - alpha / 2))
    ci = (math.tanh(z - q * se), math.tanh(z + q * se))
    p = float(2 * _st.norm.sf(abs(z) / se))
    return TestReport(f"correlation_{method}", r, p, n, alpha, ci)
