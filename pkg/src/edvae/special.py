"""Log-gamma, digamma and trigamma for positive real arguments.

Each function shifts small arguments upward with the exact recurrence until
``x >= 10`` and then evaluates the asymptotic (Stirling-type) series. All
functions accept scalars or arrays and work elementwise.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["lgamma", "digamma", "trigamma", "EULER_GAMMA"]

EULER_GAMMA = 0.57721566490153286061

_SHIFT = 10.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# Bernoulli-number coefficients B_2k / (2k (2k-1)) of the log-gamma series.
_LGAMMA_COEF = (1 / 12, -1 / 360, 1 / 1260, -1 / 1680, 1 / 1188, -691 / 360360, 1 / 156)
# B_2k / (2k) for digamma.
_DIGAMMA_COEF = (1 / 12, -1 / 120, 1 / 252, -1 / 240, 1 / 132, -691 / 32760, 1 / 12)
# B_2k for trigamma.
_TRIGAMMA_COEF = (1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66, -691 / 2730, 7 / 6)


def _prepare(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~(arr > 0)):
        raise ValueError(f"{name} is defined here only for x > 0")
    return arr


def _finish(out, x):
    return float(out) if np.ndim(x) == 0 else out


def _poly(coef, inv2):
    acc = np.zeros_like(inv2)
    for c in reversed(coef):
        acc = acc * inv2 + c
    return acc


def lgamma(x):
    """Natural log of the gamma function."""
    arr = _prepare(x, "lgamma")
    z = arr.copy()
    prod = np.ones_like(z)
    shift = np.zeros_like(z)
    small = z < _SHIFT
    while np.any(small):
        prod = np.where(small, prod * z, prod)
        z = np.where(small, z + 1.0, z)
        small = z < _SHIFT
        # keep the running product in range for tiny starting values
        big = prod > 1e150
        if np.any(big):
            shift = np.where(big, shift + np.log(np.where(big, prod, 1.0)), shift)
            prod = np.where(big, 1.0, prod)
    inv = 1.0 / z
    series = (z - 0.5) * np.log(z) - z + _HALF_LOG_2PI + inv * _poly(_LGAMMA_COEF, inv * inv)
    out = series - np.log(prod) - shift
    # the two zeros of lgamma are exact
    out = np.where((arr == 1.0) | (arr == 2.0), 0.0, out)
    return _finish(out, x)


def digamma(x):
    """Derivative of log-gamma, psi(x)."""
    arr = _prepare(x, "digamma")
    z = arr.copy()
    acc = np.zeros_like(z)
    small = z < _SHIFT
    while np.any(small):
        acc = np.where(small, acc - 1.0 / z, acc)
        z = np.where(small, z + 1.0, z)
        small = z < _SHIFT
    inv2 = 1.0 / (z * z)
    out = acc + np.log(z) - 0.5 / z - inv2 * _poly(_DIGAMMA_COEF, inv2)
    return _finish(out, x)


def trigamma(x):
    """Second derivative of log-gamma, psi'(x)."""
    arr = _prepare(x, "trigamma")
    z = arr.copy()
    acc = np.zeros_like(z)
    small = z < _SHIFT
    while np.any(small):
        acc = np.where(small, acc + 1.0 / (z * z), acc)
        z = np.where(small, z + 1.0, z)
        small = z < _SHIFT
    inv = 1.0 / z
    inv2 = inv * inv
    out = acc + inv + 0.5 * inv2 + inv * inv2 * _poly(_TRIGAMMA_COEF, inv2)
    return _finish(out, x)
