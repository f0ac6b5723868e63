"""Replica-symmetric theory of the perceptron coupling volume.

Two functionals are evaluated here:

* the Gardner functional, ``min_q gardner_bracket(q, alpha, k)``, which is the
  limiting value of ``(1/N) log Theta`` for the hard-constraint volume;
* the regularised functional ``max_R min_q regularized_bracket(q, R, params)``
  for the smoothed Hamiltonian with parameters ``(alpha, k, h, z, eps)``.

The saddle point of the regularised functional is computed in the
coordinates ``s = q / (R + eps - q)`` where the stationarity system splits
into a monotone inner equation in ``s`` and a monotone outer equation in
``R``.  An independent nested max-min optimiser is shipped alongside so the
two routes can be cross-checked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import integrate, optimize

from .specfn import (
    DEFAULT_ORDER,
    GaussianQuadrature,
    build_quadrature,
    gauss_tail,
    log_gauss_tail,
    normal_pdf,
    tail_ratio,
)

Q_MAX = 1.0 - 1e-10
PIN_Q = 1.0 - 1e-6
DIVERGENCE_FLOOR = -50.0
ROOT_XTOL = 1e-14
RESIDUAL_TOL = 1e-9
MAX_OUTER_ITER = 200


class DivergingMinimumError(ArithmeticError):
    """The Gardner minimum runs off to q -> 1 (alpha at or above capacity)."""

    def __init__(self, alpha: float, k: float, q: float, value: float):
        super().__init__(
            f"Gardner functional diverges at alpha={alpha}, k={k}: "
            f"minimiser pinned at q={q:.12g} with value {value:.6g}"
        )
        self.alpha, self.k, self.q, self.value = alpha, k, q, value


class SaddleNonConvergence(ArithmeticError):
    def __init__(self, message: str, residuals: tuple[float, float] = (math.nan, math.nan)):
        super().__init__(f"{message} (last residuals f1={residuals[0]:.3g}, f2={residuals[1]:.3g})")
        self.residuals = residuals


@dataclass(frozen=True)
class ModelParams:
    """Control parameters of the smoothed Hamiltonian."""

    alpha: float
    k: float = 0.0
    h: float = 0.0
    z: float = 1.0
    eps: float = 0.05

    def __post_init__(self):
        if not (self.alpha >= 0 and self.k >= 0 and self.h >= 0):
            raise ValueError(f"alpha, k, h must be nonnegative: {self}")
        if not (self.z > 0 and self.eps > 0):
            raise ValueError(f"z and eps must be positive: {self}")

    def check_valid_range(self) -> None:
        """Raise unless alpha < 2 and z <= eps**(-1/3)."""
        if self.alpha >= 2:
            raise ValueError(f"regularised saddle needs alpha < 2, got {self.alpha}")
        if self.z > self.eps ** (-1.0 / 3.0) * (1 + 1e-12):
            raise ValueError(f"regularised saddle needs z <= eps^(-1/3) = {self.eps ** (-1 / 3):.6g}, got z={self.z}")

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class SaddlePoint:
    q: float
    R: float
    s: float
    residual_f1: float
    residual_f2: float
    iterations: int
    converged: bool
    boundary_pinned: bool = False
    eps: float = 0.0


@dataclass(frozen=True)
class CapacityCurve:
    entries: list[tuple[float, float]] = field(default_factory=list)

    @property
    def k(self) -> np.ndarray:
        return np.array([e[0] for e in self.entries])

    @property
    def alpha_c(self) -> np.ndarray:
        return np.array([e[1] for e in self.entries])


class RSIdentities(NamedTuple):
    tilde_q: float
    tilde_U: float
    delta: float
    q: float
    R: float


def _rule(rule: GaussianQuadrature | None) -> GaussianQuadrature:
    return build_quadrature(DEFAULT_ORDER) if rule is None else rule


# ---------------------------------------------------------------------------
# capacity


def critical_capacity(k: float) -> float:
    """alpha_c(k) = 1 / ((1 + k^2) Phi(k) + k phi(k))."""
    if not k >= 0:
        raise ValueError(f"critical capacity is defined for k >= 0, got {k}")
    big_phi = 1.0 - gauss_tail(k)
    return 1.0 / ((1.0 + k * k) * big_phi + k * float(normal_pdf(k)))


def critical_capacity_integral(k: float) -> float:
    """Same quantity by adaptive quadrature of the defining integral."""
    if not k >= 0:
        raise ValueError(f"critical capacity is defined for k >= 0, got {k}")
    f = lambda u: (u + k) ** 2 * normal_pdf(u)
    head, _ = integrate.quad(f, -k, 0.0, epsabs=1e-15, epsrel=1e-13)
    tail, _ = integrate.quad(f, 0.0, np.inf, epsabs=1e-15, epsrel=1e-13)
    return 1.0 / (head + tail)


def capacity_curve(k_grid) -> CapacityCurve:
    ks = [float(k) for k in k_grid]
    if any(b < a for a, b in zip(ks, ks[1:])):
        raise ValueError("k grid must be sorted ascending")
    return CapacityCurve([(k, critical_capacity(k)) for k in ks])


# ---------------------------------------------------------------------------
# Gardner functional


def gardner_bracket(q: float, alpha: float, k: float, rule: GaussianQuadrature | None = None) -> float:
    """alpha E log H((u sqrt(q) + k)/sqrt(1-q)) + q/(2(1-q)) + log(1-q)/2."""
    if not 0.0 <= q < 1.0:
        raise ValueError(f"gardner_bracket needs 0 <= q < 1, got {q}")
    rule = _rule(rule)
    sq, sd = math.sqrt(q), math.sqrt(1.0 - q)
    e_log = float(rule.weights @ log_gauss_tail((rule.nodes * sq + k) / sd))
    return alpha * e_log + 0.5 * q / (1.0 - q) + 0.5 * math.log1p(-q)


def _q_scan_grid() -> np.ndarray:
    return np.unique(np.concatenate([np.linspace(0.0, 0.9, 91), 1.0 - np.logspace(-1, -10, 181)]))


def gardner_free_energy(
    alpha: float,
    k: float,
    rule: GaussianQuadrature | None = None,
    floor: float = DIVERGENCE_FLOOR,
) -> tuple[float, float]:
    """Return ``(value, q_star)`` of the Gardner minimum over q in [0, 1 - 1e-10].

    Raises DivergingMinimumError at or above capacity, or whenever the
    minimiser is pinned beyond ``1 - 1e-6`` with value below ``floor``.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    rule = _rule(rule)
    if alpha >= critical_capacity(k):
        raise DivergingMinimumError(alpha, k, Q_MAX, gardner_bracket(Q_MAX, alpha, k, rule))
    grid = _q_scan_grid()
    vals = np.array([gardner_bracket(q, alpha, k, rule) for q in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = optimize.minimize_scalar(
        lambda q: gardner_bracket(q, alpha, k, rule), bounds=(lo, hi), method="bounded",
        options={"xatol": 1e-13, "maxiter": 500},
    )
    q_star, value = float(res.x), float(res.fun)
    if vals[i] < value:
        q_star, value = float(grid[i]), float(vals[i])
    if q_star > PIN_Q and value < floor:
        raise DivergingMinimumError(alpha, k, q_star, value)
    return value, q_star


# ---------------------------------------------------------------------------
# regularised functional


def regularized_bracket(q: float, R: float, params: ModelParams, rule: GaussianQuadrature | None = None) -> float:
    """The bracket maximised over R and minimised over q in the regularised free energy."""
    if not 0.0 <= q < R:
        raise ValueError(f"regularized_bracket needs 0 <= q < R, got q={q}, R={R}")
    rule = _rule(rule)
    p = params
    d = R - q
    e_log = float(rule.weights @ log_gauss_tail((rule.nodes * math.sqrt(q) + p.k) / math.sqrt(p.eps + d)))
    return p.alpha * e_log + 0.5 * q / d + 0.5 * math.log(d) - 0.5 * p.z * R + 0.5 * p.h**2 * d


def q_from_s(s: float, R: float, eps: float) -> float:
    return s * (R + eps) / (1.0 + s)


def s_from_q(q: float, R: float, eps: float) -> float:
    return q / (R + eps - q)


def transformed_bracket(s: float, R: float, params: ModelParams, rule: GaussianQuadrature | None = None) -> float:
    """The regularised bracket written in the (s, R) coordinates."""
    p = params
    if not (s >= 0 and R > p.eps * s):
        raise ValueError(f"need s >= 0 and R > eps*s, got s={s}, R={R}")
    rule = _rule(rule)
    x = rule.nodes * math.sqrt(s) + p.k * math.sqrt(1.0 + s) / math.sqrt(p.eps + R)
    w = R - p.eps * s
    return (
        p.alpha * float(rule.weights @ log_gauss_tail(x))
        + 0.5 * s * (R + p.eps) / w
        + 0.5 * math.log(w)
        - 0.5 * math.log1p(s)
        - 0.5 * p.z * R
        + 0.5 * p.h**2 * w / (1.0 + s)
    )


def _moments(s: float, R: float, p: ModelParams, rule: GaussianQuadrature) -> tuple[float, float]:
    x = rule.nodes * math.sqrt(s) + p.k * math.sqrt(1.0 + s) / math.sqrt(p.eps + R)
    a = tail_ratio(x)
    return float(rule.weights @ (a * a)), float(rule.weights @ a)


def saddle_residuals(
    s: float, R: float, params: ModelParams, rule: GaussianQuadrature | None = None
) -> tuple[float, float]:
    """Stationarity residuals (f1, f2) of the regularised functional in (s, R).

    f1 = 2 (1+s) / s * dF/ds and f2 = 2 dF/dR, where F is
    :func:`transformed_bracket`.
    """
    p = params
    if not s > 0:
        raise ValueError(f"saddle_residuals needs s > 0, got {s}")
    if not R > p.eps * s:
        raise ValueError(f"saddle_residuals needs R > eps*s, got R={R}, eps*s={p.eps * s}")
    rule = _rule(rule)
    ea2, ea = _moments(s, R, p, rule)
    w = R - p.eps * s
    re = R + p.eps
    f1 = -p.alpha / s * ea2 + re**2 / w**2 - p.h**2 * re / (s * (s + 1.0))
    f2 = (
        p.alpha * p.k * math.sqrt(1.0 + s) / re**1.5 * ea
        - p.eps * s * (s + 1.0) / w**2
        + 1.0 / w
        + p.h**2 / (s + 1.0)
        - p.z
    )
    return f1, f2


def rs_identities(q: float, R: float, params: ModelParams, rule: GaussianQuadrature | None = None) -> RSIdentities:
    """Evaluate q~, U~, Delta at (q, R) and the (q, R) they imply.

    At the saddle point the implied pair reproduces the input pair.
    """
    p = params
    rule = _rule(rule)
    U = R - q + p.eps
    v = (rule.nodes * math.sqrt(q) + p.k) / math.sqrt(U)
    a = tail_ratio(v)
    tilde_q = p.alpha / U * float(rule.weights @ (a * a))
    tilde_U = p.alpha / p.eps + p.alpha / U * float(rule.weights @ (v * a))
    delta = p.alpha / U * float(rule.weights @ (a * (a - v)))
    gap = 1.0 / (p.z + delta)
    q_impl = (tilde_q + p.h**2) * gap**2
    return RSIdentities(tilde_q, tilde_U, delta, q_impl, q_impl + gap)


def _inner_s(R: float, p: ModelParams, rule: GaussianQuadrature) -> tuple[float, int]:
    """Unique root of f1(., R) on (0, R/eps); f1 is increasing in s."""
    f = lambda s: saddle_residuals(s, R, p, rule)[0]
    s_max = R / p.eps
    lo = min(1e-8, 1e-3 * s_max)
    while f(lo) > 0:
        lo *= 1e-3
        if lo < 1e-300:
            raise SaddleNonConvergence(f"cannot bracket inner s-root at R={R}")
    delta = 1e-6
    hi = s_max * (1.0 - delta)
    while f(hi) < 0:
        delta *= 1e-2
        hi = s_max * (1.0 - delta)
        if delta < 1e-15:
            raise SaddleNonConvergence(f"cannot bracket inner s-root at R={R}")
    # s can be as small as O(alpha), so the tolerance has to be relative
    s, info = optimize.brentq(f, lo, hi, xtol=ROOT_XTOL * lo, rtol=1e-15, maxiter=MAX_OUTER_ITER, full_output=True)
    return s, info.iterations


def solve_saddle(params: ModelParams, rule: GaussianQuadrature | None = None, tol: float = RESIDUAL_TOL) -> SaddlePoint:
    """Saddle point (q*, R*) of the regularised functional by nested monotone root finding."""
    p = params
    p.check_valid_range()
    rule = _rule(rule)
    pinned = p.alpha >= critical_capacity(p.k)
    if p.alpha == 0 and p.h == 0:
        return SaddlePoint(0.0, 1.0 / p.z, 0.0, 0.0, 0.0, 0, True, False, p.eps)

    count = 0

    def outer(R):
        nonlocal count
        s, it = _inner_s(R, p, rule)
        count += it
        return saddle_residuals(s, R, p, rule)[1]

    r0 = 1.0 / p.z + (p.h / p.z) ** 2
    lo, hi = 0.5 * r0, 2.0 * r0
    for _ in range(80):
        if outer(lo) > 0:
            break
        lo *= 0.5
    else:
        raise SaddleNonConvergence("cannot bracket R from below")
    for _ in range(80):
        if outer(hi) < 0:
            break
        hi *= 2.0
    else:
        raise SaddleNonConvergence("cannot bracket R from above")
    R, info = optimize.brentq(outer, lo, hi, xtol=ROOT_XTOL, rtol=1e-15, maxiter=MAX_OUTER_ITER, full_output=True)
    s, _ = _inner_s(R, p, rule)
    f1, f2 = saddle_residuals(s, R, p, rule)
    if not (info.converged and max(abs(f1), abs(f2)) <= tol):
        raise SaddleNonConvergence("saddle residuals above tolerance", (f1, f2))
    return SaddlePoint(q_from_s(s, R, p.eps), R, s, f1, f2, info.iterations, True, pinned, p.eps)


def solve_saddle_direct(
    params: ModelParams, rule: GaussianQuadrature | None = None, xatol: float = 1e-11
) -> tuple[float, float, float]:
    """Return ``(q*, R*, value)`` from nested scalar max-min of :func:`regularized_bracket`.

    Independent of the residual system; used to cross-check :func:`solve_saddle`.
    """
    p = params
    rule = _rule(rule)

    def inner(R):
        res = optimize.minimize_scalar(
            lambda q: regularized_bracket(q, R, p, rule), bounds=(0.0, R * (1 - 1e-12)),
            method="bounded", options={"xatol": xatol * max(R, 1e-3), "maxiter": 500},
        )
        q0 = regularized_bracket(0.0, R, p, rule)
        return (0.0, q0) if q0 <= res.fun else (float(res.x), float(res.fun))

    r0 = 1.0 / p.z + (p.h / p.z) ** 2
    res = optimize.minimize_scalar(
        lambda R: -inner(R)[1], bounds=(1e-6, 20.0 * r0 + 10.0), method="bounded",
        options={"xatol": xatol, "maxiter": 500},
    )
    R = float(res.x)
    q, val = inner(R)
    return q, R, val


def regularized_free_energy(params: ModelParams, rule: GaussianQuadrature | None = None) -> float:
    sp = solve_saddle(params, rule)
    return regularized_bracket(sp.q, sp.R, params, rule)


def spherical_value(alpha: float, k: float, eps: float, rule: GaussianQuadrature | None = None) -> tuple[float, float]:
    """``(min_z [F(alpha, k, 0, z, eps) + z/2], z_min)``.

    The z-stationarity condition is R* = 1, so the inner s-equation is solved
    at R = 1 and the outer residual is solved for z in closed form.
    """
    if not 0 <= alpha < critical_capacity(k):
        raise ValueError(f"spherical_value needs 0 <= alpha < alpha_c(k), got alpha={alpha}")
    rule = _rule(rule)
    if alpha == 0:
        return 0.0, 1.0
    p = ModelParams(alpha=alpha, k=k, h=0.0, z=1.0, eps=eps)
    s, _ = _inner_s(1.0, p, rule)
    _, f2_at_unit_z = saddle_residuals(s, 1.0, p, rule)
    z_min = f2_at_unit_z + 1.0
    if not z_min > 0:
        raise SaddleNonConvergence(f"no positive z minimiser (z={z_min})")
    q = q_from_s(s, 1.0, eps)
    value = regularized_bracket(q, 1.0, p.with_(z=z_min), rule) + 0.5 * z_min
    return float(value), float(z_min)
