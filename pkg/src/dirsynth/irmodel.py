"""Inversion-recovery magnitude signal model and two-point T1 estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq

from .errors import FitFailure, InvalidArgumentError

CSFN_TI = 1400.0
WMN_TI = 400.0

T1_BOUNDS = (1.0, 1e5)
BISECTION_TOL = 1e-10


@dataclass(frozen=True)
class IrSignalParams:
    m0: float
    t1: float
    ti: float

    def __post_init__(self):
        for name in ("m0", "t1", "ti"):
            value = float(getattr(self, name))
            if not (math.isfinite(value) and value > 0):
                raise InvalidArgumentError(f"{name} must be positive and finite, got {value}")
            object.__setattr__(self, name, value)


class T1Fit(NamedTuple):
    m0: float
    t1: float


def ir_signal(m0, t1=None, ti=None):
    """``m0 * |1 - 2 exp(-ti / t1)|``.

    Accepts an :class:`IrSignalParams` or the three values (scalars or
    broadcastable arrays).
    """
    if isinstance(m0, IrSignalParams):
        m0, t1, ti = m0.m0, m0.t1, m0.ti
    return m0 * np.abs(1.0 - 2.0 * np.exp(-np.divide(ti, t1)))


def null_ti(t1):
    """Inversion time at which a tissue with this T1 gives zero signal."""
    return t1 * math.log(2.0)


def _longitudinal(t1, ti):
    return 1.0 - 2.0 * math.exp(-ti / t1)


_BRANCHES = ("straddle", "post_null", "pre_null")


def _branch_interval(branch, ti_short, ti_long):
    lo_t1, hi_t1 = T1_BOUNDS
    a, b = ti_short / math.log(2.0), ti_long / math.log(2.0)
    if branch == "straddle":
        return max(lo_t1, a), min(hi_t1, b)
    if branch == "post_null":
        return lo_t1, min(hi_t1, a)
    return max(lo_t1, b), hi_t1


def _branch_residual(branch, s_short, s_long, ti_short, ti_long):
    # sign of the longitudinal magnetisation at each TI for the branch
    e_short = 1.0 if branch == "post_null" else -1.0
    e_long = -1.0 if branch == "pre_null" else 1.0

    def residual(t1):
        return s_long * e_short * _longitudinal(t1, ti_short) - s_short * e_long * _longitudinal(t1, ti_long)

    return residual


def estimate_ir_params(s1, ti1, s2, ti2, branch=None) -> T1Fit:
    """Recover ``(m0, t1)`` from magnitude signals at two inversion times.

    Magnitude data leave the sign of each sample ambiguous. Unless
    ``branch`` says otherwise, the shorter-TI sample is taken to be before
    the null point and the longer one after it ("straddle"); the other
    branches are tried only if that one has no root. ``t1`` is found by
    bracketed root finding on ``[1, 1e5]`` ms.
    """
    s1, s2, ti1, ti2 = float(s1), float(s2), float(ti1), float(ti2)
    if ti1 == ti2:
        raise InvalidArgumentError("inversion times must differ")
    if min(ti1, ti2) <= 0:
        raise InvalidArgumentError("inversion times must be positive")
    if s1 < 0 or s2 < 0 or not (math.isfinite(s1) and math.isfinite(s2)):
        raise InvalidArgumentError("magnitude signals must be finite and non-negative")
    if s1 == 0 and s2 == 0:
        raise FitFailure("both signals are zero; t1 is unidentifiable")
    if ti1 < ti2:
        ti_short, s_short, ti_long, s_long = ti1, s1, ti2, s2
    else:
        ti_short, s_short, ti_long, s_long = ti2, s2, ti1, s1

    # exact null-point inversions
    if s_short == 0:
        t1 = ti_short / math.log(2.0)
        return T1Fit(s_long / abs(_longitudinal(t1, ti_long)), t1)
    if s_long == 0:
        t1 = ti_long / math.log(2.0)
        return T1Fit(s_short / abs(_longitudinal(t1, ti_short)), t1)

    order = _BRANCHES if branch is None else (branch,)
    for name in order:
        if name not in _BRANCHES:
            raise InvalidArgumentError(f"unknown branch {name!r}; expected one of {_BRANCHES}")
        lo, hi = _branch_interval(name, ti_short, ti_long)
        if not lo < hi:
            continue
        residual = _branch_residual(name, s_short, s_long, ti_short, ti_long)
        f_lo, f_hi = residual(lo), residual(hi)
        if f_lo == 0.0:
            t1 = lo
        elif f_hi == 0.0:
            t1 = hi
        elif np.sign(f_lo) == np.sign(f_hi):
            continue
        else:
            t1 = brentq(residual, lo, hi, xtol=BISECTION_TOL, rtol=4 * np.finfo(float).eps, maxiter=500)
        z_short, z_long = abs(_longitudinal(t1, ti_short)), abs(_longitudinal(t1, ti_long))
        m0 = s_long / z_long if z_long >= z_short else s_short / z_short
        return T1Fit(m0, t1)
    raise FitFailure(f"no t1 in {T1_BOUNDS} ms reproduces signals {s1:g} at {ti1:g} ms and {s2:g} at {ti2:g} ms")
