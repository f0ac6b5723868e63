"""Exact blocked Gibbs sampling of the smoothed perceptron Hamiltonian.

The soft constraint -log H((k - y)/sqrt(eps)), y = (xi, J)/sqrt(N), is the
marginal of a Gaussian coupling between y and an auxiliary x > k.  In the
joint (J, x) representation both conditionals are exactly sampleable:

* x | J is a normal with mean y and variance eps truncated to (k, inf);
* J | x is a normal with the instance-constant precision
  P = z I + Xi^T Xi / (N eps).

P is factored once per instance, so a sweep costs two triangular solves.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, special

from .replica import ModelParams, SaddlePoint, rs_identities
from .specfn import gauss_tail, log_gauss_tail, tail_ratio
from .streams import derive_stream, generator

log = logging.getLogger(__name__)

# Standardised truncation point above which the exponential-proposal
# rejection sampler replaces inverse-CDF sampling.
TAIL_SWITCH = 3.0
PATTERN_MODES = ("binary", "gaussian")


class ChainFault(ArithmeticError):
    """A sweep produced a non-finite value; carries the offending state."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class PatternSet:
    xi: np.ndarray
    p: int
    N: int
    seed: int
    mode: str = "binary"


def make_patterns(p: int, N: int, seed: int, mode: str = "binary") -> PatternSet:
    """Patterns drawn from the ``"pattern"`` stream of ``seed``."""
    if mode not in PATTERN_MODES:
        raise ValueError(f"mode must be one of {PATTERN_MODES}, got {mode!r}")
    if p < 0 or N < 1:
        raise ValueError(f"need p >= 0 and N >= 1, got p={p}, N={N}")
    rng = generator(derive_stream(seed, "pattern", 0))
    if mode == "binary":
        xi = 2.0 * rng.integers(0, 2, size=(p, N)) - 1.0
    else:
        xi = rng.standard_normal((p, N))
    xi.setflags(write=False)
    return PatternSet(xi=xi, p=p, N=N, seed=int(seed), mode=mode)


@dataclass(frozen=True)
class DisorderInstance:
    patterns: PatternSet
    field: np.ndarray
    params: ModelParams
    precision_factor: np.ndarray
    overlap_norm: float = math.nan
    overlap_warning: bool = False

    @property
    def N(self) -> int:
        return self.patterns.N

    @property
    def p(self) -> int:
        return self.patterns.p

    @property
    def xi(self) -> np.ndarray:
        return self.patterns.xi

    @property
    def alpha_n(self) -> float:
        return self.p / self.N


def pattern_count(N: int, alpha: float) -> int:
    """p = round(alpha N) with halves rounded up."""
    return int(math.floor(alpha * N + 0.5))


def make_instance(N: int, alpha: float, params: ModelParams, seed: int, mode: str = "binary") -> DisorderInstance:
    """One disorder realisation.

    Patterns use stream ``(seed, "pattern", 0)`` and the field
    ``(seed, "field", 0)``.  ``params.alpha`` is replaced by ``alpha``.
    """
    if N < 2:
        raise ValueError(f"N must be >= 2, got {N}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    params = params.with_(alpha=alpha)
    p = pattern_count(N, alpha)
    patterns = make_patterns(p, N, seed, mode)
    field_ = generator(derive_stream(seed, "field", 0)).standard_normal(N)
    field_.setflags(write=False)
    xi = patterns.xi
    prec = params.z * np.eye(N) + xi.T @ xi / (N * params.eps)
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - z > 0 makes this impossible
        raise AssertionError("J-conditional precision is not positive definite") from exc
    chol.setflags(write=False)
    if p:
        norm = float(np.linalg.eigvalsh(xi @ xi.T / N)[-1])
    else:
        norm = 0.0
    warn = norm > (math.sqrt(alpha) + 2.0) ** 2
    if warn:
        log.warning("overlap matrix norm %.4g exceeds (sqrt(alpha)+2)^2 for seed %d", norm, seed)
    return DisorderInstance(patterns, field_, params, chol, norm, warn)


def energy(J, instance: DisorderInstance) -> float:
    p = instance.params
    J = np.asarray(J, dtype=float)
    if J.shape != (instance.N,):
        raise ValueError(f"J must have length {instance.N}")
    y = instance.xi @ J / math.sqrt(instance.N)
    soft = -np.sum(log_gauss_tail((p.k - y) / math.sqrt(p.eps))) if instance.p else 0.0
    return float(soft + p.h * (instance.field @ J) + 0.5 * p.z * (J @ J))


def grad_energy(J, instance: DisorderInstance) -> np.ndarray:
    p = instance.params
    J = np.asarray(J, dtype=float)
    if J.shape != (instance.N,):
        raise ValueError(f"J must have length {instance.N}")
    g = p.h * instance.field + p.z * J
    if instance.p:
        y = instance.xi @ J / math.sqrt(instance.N)
        a = tail_ratio((p.k - y) / math.sqrt(p.eps))
        g = g - instance.xi.T @ a / math.sqrt(instance.N * p.eps)
    return g


def truncated_normal_sample(mean, sd, lower, rng: np.random.Generator):
    """Draw from N(mean, sd^2) conditioned on being above ``lower``.

    Inverse-CDF sampling for standardised bounds up to ``TAIL_SWITCH``,
    exponential-proposal rejection (Robert 1995) beyond.  Broadcasts over
    array arguments; returns a float for scalar input.
    """
    scalar = np.ndim(mean) == 0 and np.ndim(sd) == 0 and np.ndim(lower) == 0
    mean, sd, lower = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mean, sd, lower)))
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    a = ((lower - mean) / sd).ravel()
    z = np.empty_like(a)

    near = np.flatnonzero(a <= TAIL_SWITCH)
    if near.size:
        tail = gauss_tail(a[near])
        todo = np.arange(near.size)
        while todo.size:
            u = 1.0 - rng.random(todo.size)
            draw = -special.ndtri(u * tail[todo])
            z[near[todo]] = draw
            todo = todo[~(draw > a[near[todo]])]

    far = np.flatnonzero(a > TAIL_SWITCH)
    if far.size:
        af = a[far]
        lam = 0.5 * (af + np.sqrt(af * af + 4.0))
        todo = np.arange(far.size)
        while todo.size:
            cand = af[todo] + rng.standard_exponential(todo.size) / lam[todo]
            keep = rng.random(todo.size) <= np.exp(-0.5 * (cand - lam[todo]) ** 2)
            z[far[todo[keep]]] = cand[keep]
            todo = todo[~keep]

    out = mean.ravel() + sd.ravel() * z
    # rounding of mean + sd*z must not land on the boundary
    out = np.maximum(out, np.nextafter(lower.ravel(), np.inf))
    out = out.reshape(mean.shape)
    return float(out) if scalar else out


@dataclass(frozen=True)
class ChainState:
    J: np.ndarray
    x: np.ndarray
    sweep_count: int = 0
    stream_id: int = 0


def initial_state(instance: DisorderInstance, stream_id: int, rng: np.random.Generator) -> ChainState:
    """J drawn from the alpha = 0 Gaussian, x from its conditional given J."""
    p = instance.params
    J = -p.h / p.z * instance.field + rng.standard_normal(instance.N) / math.sqrt(p.z)
    y = instance.xi @ J / math.sqrt(instance.N)
    x = truncated_normal_sample(y, math.sqrt(p.eps), p.k, rng) if instance.p else np.empty(0)
    return ChainState(J, np.atleast_1d(x), 0, stream_id)


def _sweep_many(J: np.ndarray, instance: DisorderInstance, rngs: Sequence[np.random.Generator]):
    """One sweep for each row of J; returns (x, J_new).  Row c uses rngs[c]."""
    p = instance.params
    N, sqrt_n = instance.N, math.sqrt(instance.N)
    xi = instance.xi
    Y = J @ xi.T / sqrt_n
    x = np.empty_like(Y)
    W = np.empty_like(J)
    sd = math.sqrt(p.eps)
    for c, rng in enumerate(rngs):
        if instance.p:
            x[c] = truncated_normal_sample(Y[c], sd, p.k, rng)
        W[c] = rng.standard_normal(N)
    L = instance.precision_factor
    rhs = x @ xi / (p.eps * sqrt_n) - p.h * instance.field
    mean = linalg.cho_solve((L, True), rhs.T, check_finite=False)
    noise = linalg.solve_triangular(L.T, W.T, lower=False, check_finite=False)
    J_new = (mean + noise).T
    if not (np.all(np.isfinite(J_new)) and np.all(np.isfinite(x))):
        raise ChainFault("non-finite value in blocked sweep", {"J": J.copy(), "x": x, "J_new": J_new})
    return x, J_new


def blocked_sweep(state: ChainState, instance: DisorderInstance, rng: np.random.Generator) -> ChainState:
    """Draw x | J, then J | x.  Leaves the joint (J, x) measure invariant."""
    x, J = _sweep_many(state.J[None, :], instance, [rng])
    if instance.p and not np.all(x > instance.params.k):
        raise AssertionError("auxiliary variable fell on or below k")
    return ChainState(J[0], x[0], state.sweep_count + 1, state.stream_id)


@dataclass
class ChainSamples:
    """Post-burn-in draws of several independent chains.

    ``J`` has shape (chains, sweeps, N); ``t_sum`` and ``t2_sum`` are running
    sums over sweeps of t = y - x per pattern, with (x, J) taken from the same
    sweep (x drawn first, J drawn given x).
    """

    J: np.ndarray
    t_sum: np.ndarray
    t2_sum: np.ndarray
    n_sweeps: int
    stream_ids: list[int]
    final_states: list[ChainState] = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.J.shape[0]


def chain_stream_ids(instance: DisorderInstance, n_chains: int) -> list[int]:
    return [derive_stream(instance.patterns.seed, "chain", c) for c in range(n_chains)]


def run_chains(
    instance: DisorderInstance,
    n_chains: int,
    n_sweeps: int,
    burn_in: int,
    stream_ids: Sequence[int] | None = None,
) -> ChainSamples:
    if n_chains < 1 or n_sweeps <= burn_in or burn_in < 0:
        raise ValueError(f"need n_chains >= 1 and n_sweeps > burn_in >= 0, got {n_chains}, {n_sweeps}, {burn_in}")
    ids = list(stream_ids) if stream_ids is not None else chain_stream_ids(instance, n_chains)
    if len(ids) != n_chains:
        raise ValueError("one stream id per chain is required")
    rngs = [generator(s) for s in ids]
    J = np.stack([initial_state(instance, s, r).J for s, r in zip(ids, rngs)])
    kept = n_sweeps - burn_in
    traj = np.empty((n_chains, kept, instance.N))
    t_sum = np.zeros((n_chains, instance.p))
    t2_sum = np.zeros((n_chains, instance.p))
    sqrt_n = math.sqrt(instance.N)
    k = instance.params.k
    for sweep in range(n_sweeps):
        x, J = _sweep_many(J, instance, rngs)
        if instance.p and not np.all(x > k):
            raise AssertionError("auxiliary variable fell on or below k")
        if sweep >= burn_in:
            traj[:, sweep - burn_in] = J
            t = J @ instance.xi.T / sqrt_n - x
            t_sum += t
            t2_sum += t * t
    finals = [ChainState(J[c].copy(), x[c].copy(), n_sweeps, ids[c]) for c in range(n_chains)]
    return ChainSamples(traj, t_sum, t2_sum, kept, ids, finals)


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float

    def __iter__(self):
        yield self.value
        yield self.stderr


@dataclass(frozen=True)
class OrderParameterEstimate:
    R_N: Estimate
    q_N: Estimate
    tilde_U: Estimate
    tilde_q: Estimate
    factorization_stat: Estimate
    n_sweeps: int
    n_chains: int
    max_abs_J_over_sqrt_n: float = math.nan
    field_sq_mean: float = 1.0
    alpha_n: float = math.nan


def _jackknife(stat, n: int) -> float:
    """Delete-one jackknife standard error of stat(keep_mask) over n units."""
    full = np.ones(n, dtype=bool)
    vals = []
    for i in range(n):
        mask = full.copy()
        mask[i] = False
        vals.append(stat(mask))
    vals = np.asarray(vals)
    return float(math.sqrt((n - 1) / n * np.sum((vals - vals.mean()) ** 2)))


def _cross_mean(m: np.ndarray, mask: np.ndarray) -> float:
    """Mean over pairs a < b of the dot product m[a] . m[b] (selected rows)."""
    rows = m[mask]
    c = rows.shape[0]
    total = rows.sum(axis=0)
    pair_sum = 0.5 * (total @ total - np.sum(rows * rows))
    return float(pair_sum / (c * (c - 1) / 2))


def _cross_estimate(means: np.ndarray, scale: float, blocks: np.ndarray | None = None) -> Estimate:
    """Unbiased estimate of scale * |<v>|^2 from independent chains' means."""
    n = means.shape[0]
    full = np.ones(n, dtype=bool)
    value = scale * _cross_mean(means, full)
    if n >= 3:
        se = _jackknife(lambda m: scale * _cross_mean(means, m), n)
    elif blocks is not None:
        # two chains: delete-one jackknife over time blocks shared by both chains
        nb = blocks.shape[1]
        tot = blocks.sum(axis=1)

        def stat(mask):
            left = (tot - blocks[:, ~mask][:, 0]) / (nb - 1)
            return scale * _cross_mean(left, full)

        se = _jackknife(stat, nb)
    else:
        se = math.nan
    return Estimate(value, se)


def factorization_statistic(samples: ChainSamples) -> Estimate:
    """Two-replica estimate of (1/N^2) sum_ij <dJ_i dJ_j>^2.

    Each chain's sample covariance is an estimate of the Gibbs covariance C;
    products tr(C^a C^b) over distinct chains are unbiased for tr(C^2).
    Standard error by jackknife over chains.
    """
    n = samples.n_chains
    if n < 4:
        raise ValueError(f"factorization statistic needs >= 4 chains, got {n}")
    N = samples.J.shape[2]
    covs = []
    for c in range(n):
        d = samples.J[c] - samples.J[c].mean(axis=0)
        covs.append((d.T @ d / (d.shape[0] - 1)).ravel())
    covs = np.asarray(covs)
    scale = 1.0 / N**2
    value = scale * _cross_mean(covs, np.ones(n, dtype=bool))
    se = _jackknife(lambda m: scale * _cross_mean(covs, m), n)
    return Estimate(value, se)


BATCH_SIZE = 50


def summarize_chains(instance: DisorderInstance, samples: ChainSamples) -> OrderParameterEstimate:
    p = instance.params
    N, C, n = instance.N, samples.n_chains, samples.n_sweeps
    if C < 2:
        raise ValueError(f"order-parameter estimation needs >= 2 chains, got {C}")
    traj = samples.J
    r_chain = np.einsum("cti,cti->c", traj, traj) / (n * N)
    R = Estimate(float(r_chain.mean()), float(r_chain.std(ddof=1) / math.sqrt(C)))

    nb = max(2, min(20, n // BATCH_SIZE))
    usable = (n // nb) * nb
    blocks = traj[:, :usable].reshape(C, nb, usable // nb, N).mean(axis=2)
    q = _cross_estimate(traj.mean(axis=1), 1.0 / N, blocks)

    scale = 1.0 / (p.eps**2 * N)
    u_chain = scale * samples.t2_sum.sum(axis=1) / n
    U = Estimate(float(u_chain.mean()), float(u_chain.std(ddof=1) / math.sqrt(C)))
    if instance.p:
        tq = _cross_estimate(samples.t_sum / n, scale)
    else:
        tq = Estimate(0.0, 0.0)
    fact = factorization_statistic(samples) if C >= 4 else Estimate(math.nan, math.nan)
    max_j = float(np.max(np.abs(traj)) / math.sqrt(N))
    return OrderParameterEstimate(
        R, q, U, tq, fact, n, C, max_j, float(instance.field @ instance.field / N), instance.alpha_n
    )


def estimate_order_parameters(
    instance: DisorderInstance,
    n_chains: int = 4,
    n_sweeps: int = 2000,
    burn_in: int = 500,
    stream_ids: Sequence[int] | None = None,
) -> OrderParameterEstimate:
    """R_N, q_N, U~, q~ and the factorization statistic from independent chains.

    q_N and q~ use products of distinct chains' means, which removes the
    upward plug-in bias of squared Monte Carlo averages.
    """
    if n_chains < 2:
        raise ValueError(f"need at least 2 chains, got {n_chains}")
    samples = run_chains(instance, n_chains, n_sweeps, burn_in, stream_ids)
    return summarize_chains(instance, samples)


@dataclass(frozen=True)
class IdentityRow:
    name: str
    lhs: float
    rhs: float
    stderr: float

    @property
    def deviation(self) -> float:
        return self.lhs - self.rhs

    @property
    def flagged(self) -> bool:
        if self.stderr == 0 or not math.isfinite(self.stderr):
            return abs(self.deviation) > 1e-8 * max(1.0, abs(self.rhs))
        return abs(self.deviation) > 3.0 * self.stderr


@dataclass(frozen=True)
class ConsistencyReport:
    rows: tuple[IdentityRow, ...]

    @property
    def flagged(self) -> list[str]:
        return [r.name for r in self.rows if r.flagged]

    def as_dict(self) -> dict:
        return {r.name: {"lhs": r.lhs, "rhs": r.rhs, "stderr": r.stderr, "flagged": r.flagged} for r in self.rows}


def rs_consistency_report(
    estimate: OrderParameterEstimate, saddle: SaddlePoint, params: ModelParams
) -> ConsistencyReport:
    """Compare simulated order parameters with the replica identities.

    Simulation side: Delta = alpha/eps - U~ + q~ with alpha = p/N, and the
    implied q = (q~ + h^2 |h|^2/N) / (z + Delta)^2, R - q = 1/(z + Delta).
    The empirical field norm replaces its large-N limit 1.  Theory side: the
    closed forms for q~ and U~ at the saddle point.  Uncertainties are
    propagated linearly, treating the inputs as independent.
    """
    if not saddle.converged:
        raise ValueError("consistency report needs a converged saddle point")
    e = estimate
    alpha = e.alpha_n if math.isfinite(e.alpha_n) else params.alpha
    h2 = params.h**2 * e.field_sq_mean
    tq, tq_se = e.tilde_q
    tU, tU_se = e.tilde_U
    delta = alpha / params.eps - tU + tq
    d_se = math.hypot(tq_se, tU_se)
    zd = params.z + delta
    q_pred = (tq + h2) / zd**2
    # d q_pred / d tq and d q_pred / d delta
    q_pred_se = math.hypot(tq_se / zd**2, 2 * (tq + h2) / zd**3 * d_se)
    gap_pred = 1.0 / zd
    gap_pred_se = d_se / zd**2
    gap, gap_se = e.R_N.value - e.q_N.value, math.hypot(e.R_N.stderr, e.q_N.stderr)

    theory = rs_identities(saddle.q, saddle.R, params.with_(alpha=alpha))
    rows = (
        IdentityRow("q_identity", e.q_N.value, q_pred, math.hypot(e.q_N.stderr, q_pred_se)),
        IdentityRow("R_minus_q_identity", gap, gap_pred, math.hypot(gap_se, gap_pred_se)),
        IdentityRow("tilde_q_closed_form", tq, theory.tilde_q, tq_se),
        IdentityRow("tilde_U_closed_form", tU, theory.tilde_U, tU_se),
        IdentityRow("q_vs_saddle", e.q_N.value, saddle.q, e.q_N.stderr),
        IdentityRow("R_vs_saddle", e.R_N.value, saddle.R, e.R_N.stderr),
    )
    return ConsistencyReport(rows)
