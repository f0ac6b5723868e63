"""Gaussian tail functions and standard-normal quadrature.

Notation used throughout the package::

    H(x) = P(u > x),  u ~ N(0, 1)
    A(x) = -d/dx log H(x) = phi(x) / H(x)

``A`` is the inverse Mills ratio.  Every routine here accepts scalars or
numpy arrays and is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

SQRT_2PI = math.sqrt(2.0 * math.pi)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

# log_gauss_tail switches to the asymptotic series above this point.
ASYMPTOTIC_CUTOFF = 8.0
DEFAULT_ORDER = 200


class QuadratureEvaluationError(ArithmeticError):
    """An integrand returned a non-finite value at a quadrature node."""

    def __init__(self, node: float, value: float):
        super().__init__(f"integrand is {value!r} at node u={node!r}")
        self.node = node
        self.value = value


def _check_finite(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"Gaussian tail functions need finite input, got {x!r}")
    return arr


def _scalar_or_array(out: np.ndarray, like):
    return float(out) if np.ndim(like) == 0 else out


def gauss_tail(x):
    """H(x), the standard-normal upper tail probability."""
    arr = _check_finite(x)
    return _scalar_or_array(special.ndtr(-arr), x)


def _log_tail_asymptotic(x: np.ndarray) -> np.ndarray:
    # H(x) = phi(x)/x * sum_n (-1)^n (2n-1)!! / x^(2n), summed to the smallest term.
    inv_x2 = 1.0 / (x * x)
    total = np.ones_like(x)
    term = np.ones_like(x)
    active = np.ones(x.shape, dtype=bool)
    for n in range(1, 200):
        new_term = -term * (2 * n - 1) * inv_x2
        shrinking = np.abs(new_term) < np.abs(term)
        active &= shrinking & (np.abs(new_term) > 1e-17 * np.abs(total))
        if not active.any():
            break
        term = np.where(active, new_term, term)
        total = total + np.where(active, new_term, 0.0)
    return -0.5 * x * x - np.log(x) - LOG_SQRT_2PI + np.log(total)


def log_gauss_tail(x):
    """log H(x) without underflow for any finite x.

    Negative arguments go through ``log1p`` so that values near zero keep
    full relative precision; arguments above ``ASYMPTOTIC_CUTOFF`` use the
    asymptotic series of the Gaussian tail.
    """
    arr = np.atleast_1d(_check_finite(x))
    out = np.empty_like(arr)
    neg = arr < 0
    mid = (~neg) & (arr <= ASYMPTOTIC_CUTOFF)
    far = arr > ASYMPTOTIC_CUTOFF
    out[neg] = np.log1p(-special.ndtr(arr[neg]))
    out[mid] = np.log(special.ndtr(-arr[mid]))
    if far.any():
        out[far] = _log_tail_asymptotic(arr[far])
    return _scalar_or_array(out.reshape(np.shape(x)), x)


def tail_ratio(x):
    """A(x) = phi(x) / H(x).

    For x >= 0 the ratio is formed from the scaled complementary error
    function, which never overflows; for x < 0 the denominator is >= 1/2.
    """
    arr = np.atleast_1d(_check_finite(x))
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = SQRT_2_OVER_PI / special.erfcx(arr[pos] / math.sqrt(2.0))
    xn = arr[~pos]
    out[~pos] = np.exp(-0.5 * xn * xn) / SQRT_2PI / special.ndtr(-xn)
    return _scalar_or_array(out.reshape(np.shape(x)), x)


def tail_ratio_prime(x):
    """A'(x) = A(x) (A(x) - x), computed analytically."""
    a = tail_ratio(x)
    return a * (a - np.asarray(x, dtype=float))


def normal_pdf(x):
    arr = np.asarray(x, dtype=float)
    return np.exp(-0.5 * arr * arr) / SQRT_2PI


@dataclass(frozen=True)
class GaussianQuadrature:
    """Quadrature rule for expectations against N(0, 1).

    ``nodes`` and ``weights`` are read-only arrays; the weights sum to one.
    """

    nodes: np.ndarray
    weights: np.ndarray
    order: int

    def expect(self, g: Callable[[np.ndarray], np.ndarray]) -> float:
        return gaussian_expect(g, self)


_RULE_CACHE: dict[int, GaussianQuadrature] = {}


def build_quadrature(order: int = DEFAULT_ORDER) -> GaussianQuadrature:
    """Gauss-Hermite rule rescaled to the standard normal.

    Nodes are symmetrised exactly and weights renormalised to sum to one, so
    odd moments vanish to rounding and the rule is exact for polynomials of
    degree <= 2*order - 1.
    """
    if int(order) != order or order < 2:
        raise ValueError(f"quadrature order must be an integer >= 2, got {order!r}")
    order = int(order)
    cached = _RULE_CACHE.get(order)
    if cached is not None:
        return cached
    x, w = np.polynomial.hermite.hermgauss(order)
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    nodes = math.sqrt(2.0) * x
    weights = w / w.sum()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    rule = GaussianQuadrature(nodes=nodes, weights=weights, order=order)
    _RULE_CACHE[order] = rule
    return rule


def gaussian_expect(g: Callable[[np.ndarray], np.ndarray], rule: GaussianQuadrature) -> float:
    """sum_i w_i g(u_i); ``g`` is called once on the whole node vector."""
    values = np.broadcast_to(np.asarray(g(rule.nodes), dtype=float), rule.nodes.shape)
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(np.argmax(bad))
        raise QuadratureEvaluationError(float(rule.nodes[i]), float(values[i]))
    return float(rule.weights @ values)
