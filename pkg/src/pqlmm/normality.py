"""Shapiro-Wilk W test using Royston's (1992, 1995) approximations.

Coefficients come from the polynomial correction to Blom-type normal scores;
the p-value uses Royston's normalising transformation of ``log(1 - W)``
(``n >= 12``) or the gamma-shifted form (``4 <= n <= 11``) and the exact
distribution for ``n = 3``.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.stats import norm

# polynomial coefficients, lowest order first
_C1 = (0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.544, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)

MIN_N = 3
MAX_N = 5000


class UnsupportedSizeError(ValueError):
    pass


def _poly(coefs, x):
    return sum(c * x**k for k, c in enumerate(coefs))


def _coefficients(n):
    nn2 = n // 2
    if n == 3:
        return np.array([math.sqrt(0.5)])
    i = np.arange(1, nn2 + 1)
    scores = norm.ppf((i - 0.375) / (n + 0.25))
    summ2 = 2.0 * np.sum(scores**2)
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a = np.empty(nn2)
    a1 = _poly(_C1, rsn) - scores[0] / ssumm2
    if n > 5:
        start = 2
        a2 = -scores[1] / ssumm2 + _poly(_C2, rsn)
        fac = math.sqrt((summ2 - 2 * scores[0] ** 2 - 2 * scores[1] ** 2)
                        / (1 - 2 * a1**2 - 2 * a2**2))
        a[1] = a2
    else:
        start = 1
        fac = math.sqrt((summ2 - 2 * scores[0] ** 2) / (1 - 2 * a1**2))
    a[0] = a1
    a[start:] = -scores[start:] / fac
    return a


def shapiro_wilk_statistic(sample):
    """Return ``(W, p_value)`` for a sample of size 3..5000."""
    x = np.sort(np.asarray(sample, dtype=float).ravel())
    n = x.size
    if not MIN_N <= n <= MAX_N:
        raise UnsupportedSizeError(f"Shapiro-Wilk needs {MIN_N} <= n <= {MAX_N}, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("sample contains non-finite values")
    spread = x[-1] - x[0]
    if spread < 1e-19 * max(1.0, abs(x[0])) or spread == 0:
        raise ValueError("sample has zero range; W is undefined")

    half = _coefficients(n)
    weights = np.zeros(n)
    k = half.size
    weights[:k] = -half
    weights[n - k:] = half[::-1]

    xs = x / spread
    wa = weights - weights.mean()
    xc = xs - xs.mean()
    ssa, ssx, sax = wa @ wa, xc @ xc, wa @ xc
    root = math.sqrt(ssa * ssx)
    w1 = (root - sax) * (root + sax) / (ssa * ssx)
    w = 1.0 - w1

    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.pi / 3.0)
        return w, max(p, 0.0)
    y = math.log(w1)
    if n <= 11:
        gamma = _poly(_G, n)
        if y >= gamma:
            return w, 1e-99
        y = -math.log(gamma - y)
        mean = _poly(_C3, n)
        sd = math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        mean = _poly(_C5, ln)
        sd = math.exp(_poly(_C6, ln))
    return w, float(norm.sf(y, loc=mean, scale=sd))


def shapiro_wilk(sample) -> float:
    """Shapiro-Wilk p-value."""
    return shapiro_wilk_statistic(sample)[1]
