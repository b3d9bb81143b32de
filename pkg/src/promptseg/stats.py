"""Wilcoxon signed-rank and Student/Welch t tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError

EXACT_MAX = 20
EXACT_MIN = 5


@dataclass
class TestResult:
    statistic: float
    pvalue: float
    method: str = ""
    df: float | None = None


def rank_with_ties(values):
    """1-based ranks; tied values share the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def signed_rank_null(ranks):
    """W+ for every one of the 2^m sign assignments of ``ranks``."""
    w = np.zeros(1, dtype=np.float64)
    for r in ranks:
        w = np.concatenate([w, w + r])
    return w


def _normal_sf(z):
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilcoxon_signed_rank(x, y, alternative="greater", mode="auto", correction=True):
    """Paired Wilcoxon signed-rank test of x against y.

    Zero differences are dropped and tied magnitudes get mid-ranks. The
    statistic is W+ (sum of ranks of positive differences). ``greater``
    tests H1: x tends to exceed y. With ``mode="auto"`` the p-value is exact
    (enumerating all sign assignments) for 5 to 20 non-zero differences
    and a tie-corrected normal approximation beyond. Fewer than 5 non-zero
    differences in exact mode is refused.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError("wilcoxon needs two paired 1-d samples of equal length")
    if alternative not in ("greater", "less", "two_sided"):
        raise ContractError(f"unknown alternative {alternative!r}")
    d = x - y
    d = d[d != 0]
    m = d.size
    if m == 0:
        raise DegenerateInputError("all paired differences are zero")
    ranks = rank_with_ties(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if mode == "auto":
        mode = "exact" if m <= EXACT_MAX else "normal"

    if mode == "exact":
        if m < EXACT_MIN:
            raise ContractError(f"exact mode needs at least {EXACT_MIN} non-zero differences, got {m}")
        if m > 26:
            raise ContractError(f"exact enumeration over 2^{m} assignments refused")
        null = signed_rank_null(ranks)
        total = null.size
        upper = np.count_nonzero(null >= w_plus - 1e-9) / total
        lower = np.count_nonzero(null <= w_plus + 1e-9) / total
    elif mode == "normal":
        mu = m * (m + 1) / 4.0
        _, counts = np.unique(ranks, return_counts=True)
        var = m * (m + 1) * (2 * m + 1) / 24.0 - float(np.sum(counts**3 - counts)) / 48.0
        sd = math.sqrt(var)
        cc = 0.5 if correction else 0.0
        upper = _normal_sf((w_plus - mu - cc) / sd)
        lower = 1.0 - _normal_sf((w_plus - mu + cc) / sd)
    else:
        raise ContractError(f"unknown mode {mode!r}")

    if alternative == "greater":
        p = upper
    elif alternative == "less":
        p = lower
    else:
        p = min(1.0, 2.0 * min(upper, lower))
    return TestResult(w_plus, float(min(max(p, 0.0), 1.0)), f"wilcoxon-{mode}")


# ---------------------------------------------------------------------------
# Student t distribution


def _betacf(a, b, x, max_iter=500, eps=1e-15):
    """Continued fraction for the regularised incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a, b, x):
    """Regularised incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t, df):
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom: I_{df/(df+t^2)}(df/2, 1/2)."""
    if df <= 0:
        raise ContractError("degrees of freedom must be positive")
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def t_test_two_tailed(x, y, paired=True):
    """Two-tailed paired t test, or Welch's unequal-variance test when ``paired=False``."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if paired:
        if x.shape != y.shape:
            raise ContractError("paired t test needs equal-length samples")
        d = x - y
        n = d.size
        if n < 2:
            raise ContractError("t test needs n >= 2")
        if not np.any(d):
            return TestResult(0.0, 1.0, "t-paired", n - 1)
        sd = d.std(ddof=1)
        if sd == 0:
            raise DegenerateInputError("paired differences have zero variance")
        t = d.mean() / (sd / math.sqrt(n))
        df = n - 1
        method = "t-paired"
    else:
        nx, ny = x.size, y.size
        if nx < 2 or ny < 2:
            raise ContractError("t test needs n >= 2 in each sample")
        vx, vy = x.var(ddof=1) / nx, y.var(ddof=1) / ny
        if vx + vy == 0:
            raise DegenerateInputError("both samples have zero variance")
        t = (x.mean() - y.mean()) / math.sqrt(vx + vy)
        df = (vx + vy) ** 2 / (vx**2 / (nx - 1) + vy**2 / (ny - 1))
        method = "t-welch"
    return TestResult(float(t), float(t_sf_two_sided(t, df)), method, float(df))
