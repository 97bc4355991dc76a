"""Quantization-aware polynomial replacement for ReLU: bounded integer
least squares over the fixed-point grid, plus multiplicative-depth bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np


class FitError(Exception):
    pass


@dataclass(frozen=True)
class FixedPointPoly:
    """p(x) = sum_k (int_coeffs[k] / 2^frac_bits) x^k, fitted on [-c, c]."""

    int_coeffs: Tuple[int, ...]   # a_0 .. a_d
    frac_bits: int
    interval_c: float

    def __post_init__(self):
        lo, hi = coeff_box(self.frac_bits)
        for k, a in enumerate(self.int_coeffs):
            if not (lo <= a <= hi):
                raise FitError(f"coefficient a_{k}={a} outside [{lo}, {hi}]")

    @property
    def degree(self) -> int:
        return len(self.int_coeffs) - 1

    def real_coeffs(self) -> List[float]:
        return [a / 2 ** self.frac_bits for a in self.int_coeffs]


@dataclass(frozen=True)
class FitReport:
    max_abs_error: float        # over the quantized domain, in value units
    sum_sq_error: float         # solver objective ||B a - y||^2 (targets at 2^b scale)
    truncated_terms: Tuple[int, ...]  # k with a_k = 0 but nonzero unconstrained coeff


def coeff_box(frac_bits: int) -> Tuple[int, int]:
    return -(2 ** (frac_bits - 1)), 2 ** (frac_bits - 1) - 1


def fit_relu_poly(d: int, c: float, b: int,
                  target: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                  ) -> Tuple[FixedPointPoly, FitReport]:
    """Integer least squares of degree d against ReLU (or a test-hook target)
    on the grid {k 2^-b} intersected with [-c, c], coefficients boxed to
    [-2^(b-1), 2^(b-1)-1].

    Solver: real LSQ -> round half-even -> clip -> +-1 coordinate descent.
    """
    if d < 1 or c <= 0 or b < 1:
        raise FitError(f"invalid fit configuration d={d}, c={c}, b={b}")
    kmax = int(np.floor(c * 2 ** b + 1e-12))
    x = np.arange(-kmax, kmax + 1, dtype=np.float64) / 2 ** b
    if x.size < d + 1:
        raise FitError(f"domain has {x.size} quantized points, need {d + 1}")
    f = target if target is not None else lambda v: np.maximum(v, 0.0)
    y = 2 ** b * np.asarray(f(x), dtype=np.float64)

    B = np.vander(x, d + 1, increasing=True)
    a_real, *_ = np.linalg.lstsq(B, y, rcond=None)

    lo, hi = coeff_box(b)
    a = np.clip(np.round(a_real), lo, hi).astype(np.int64)

    # objective via the normal-equation pieces, cheap enough to probe often
    G = B.T @ B
    h = B.T @ y
    yy = float(y @ y)

    def cost(v: np.ndarray) -> float:
        v = v.astype(np.float64)
        return float(v @ G @ v - 2.0 * v @ h + yy)

    best = cost(a)
    improved = True
    while improved:
        improved = False
        for k in range(d + 1):
            for step in (-1, 1):
                cand = a.copy()
                cand[k] += step
                if not (lo <= cand[k] <= hi):
                    continue
                cc = cost(cand)
                if cc < best - 1e-9:
                    a, best = cand, cc
                    improved = True

    resid = B @ a.astype(np.float64) - y
    truncated = tuple(k for k in range(d + 1)
                      if a[k] == 0 and abs(a_real[k]) > 1e-9)
    poly = FixedPointPoly(tuple(int(v) for v in a), b, float(c))
    report = FitReport(
        max_abs_error=float(np.max(np.abs(resid)) / 2 ** b),
        sum_sq_error=best,
        truncated_terms=truncated,
    )
    return poly, report


def eval_poly(p: FixedPointPoly, z):
    """Horner evaluation of the real-valued polynomial at z (scalar or array)."""
    coeffs = p.real_coeffs()
    acc = np.full_like(np.asarray(z, dtype=np.float64), coeffs[-1])
    for k in range(p.degree - 1, -1, -1):
        acc = acc * z + coeffs[k]
    if np.isscalar(z) or np.asarray(z).ndim == 0:
        return float(acc)
    return acc


def mult_depth(d: int, monic: bool = False) -> int:
    """Multiplicative depth of a degree-d polynomial: ceil(log2 d + 1), one
    less when the leading coefficient is 1 (no scaling on the top term)."""
    if d < 1:
        raise FitError(f"degree must be >= 1, got {d}")
    if monic:
        return (d - 1).bit_length()           # ceil(log2 d)
    return (2 * d - 1).bit_length()           # ceil(log2 d + 1)
