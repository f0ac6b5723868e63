"""Monte Carlo estimate of the log fractional volume of the constrained sphere.

log Theta is written as a telescoping sum over constraints,

    log Theta = sum_mu log P(constraint mu | constraints 1..mu-1),

and each conditional probability is the hit rate of points drawn uniformly
from the body cut out by the earlier constraints.  Uniform points come from
geodesic hit-and-run: pick a random great circle through the current point
and jump to a uniform point of its feasible part.  On a great circle each
half-space with margin k >= 0 is an arc of length at most pi containing the
current point, so the feasible part is a single interval in angle.

Many walkers move in lockstep.  After a level is measured the walkers are
resampled from the points that satisfied the new constraint (these are
already uniform on the smaller body) and decorrelated by a warm-up walk.
"""

from __future__ import annotations

import logging
import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from .gibbs import PatternSet, make_patterns, pattern_count

log = logging.getLogger(__name__)

DEFAULT_M = 10.0


@dataclass(frozen=True)
class WalkConfig:
    """Hit-and-run schedule.  ``None`` step counts default to 5N and 50N."""

    steps_between_samples: int | None = None
    samples_per_level: int = 1000
    warmup_steps: int | None = None
    arc_tolerance: float = 1e-12
    n_walkers: int = 100

    def __post_init__(self):
        if not 0 < self.arc_tolerance <= 1e-9:
            raise ValueError(f"arc_tolerance must be in (0, 1e-9], got {self.arc_tolerance}")
        for name in ("steps_between_samples", "warmup_steps"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be positive, got {v}")
        if self.n_walkers < 1 or self.samples_per_level < self.n_walkers:
            raise ValueError("need n_walkers >= 1 and samples_per_level >= n_walkers")
        if self.samples_per_level < 100:
            log.warning("samples_per_level=%d is below the production minimum of 100", self.samples_per_level)

    def between(self, N: int) -> int:
        return self.steps_between_samples if self.steps_between_samples is not None else 5 * N

    def warmup(self, N: int) -> int:
        return self.warmup_steps if self.warmup_steps is not None else 50 * N

    @property
    def rounds(self) -> int:
        return max(1, self.samples_per_level // self.n_walkers)


@dataclass(frozen=True)
class VolumeInstance:
    patterns: PatternSet
    k: float = 0.0

    @property
    def xi(self) -> np.ndarray:
        return self.patterns.xi

    @property
    def N(self) -> int:
        return self.patterns.N

    @property
    def p(self) -> int:
        return self.patterns.p


def make_volume_instance(N: int, alpha: float, k: float, seed: int, mode: str = "binary") -> VolumeInstance:
    if k < 0:
        raise ValueError(f"margin k must be nonnegative, got {k}")
    return VolumeInstance(make_patterns(pattern_count(N, alpha), N, seed, mode), float(k))


def volume_instance_from_rows(rows, k: float = 0.0) -> VolumeInstance:
    xi = np.array(rows, dtype=float)
    if xi.ndim != 2:
        raise ValueError("patterns must be a 2-d array")
    xi.setflags(write=False)
    return VolumeInstance(PatternSet(xi, xi.shape[0], xi.shape[1], 0, "custom"), float(k))


@dataclass(frozen=True)
class LevelResult:
    p_hat: float
    stderr: float
    hits: int
    samples: int
    zero: bool = False


@dataclass(frozen=True)
class VolumeEstimate:
    level_log_acceptance: np.ndarray
    level_stderr: np.ndarray
    total: float
    clipped: bool
    M: float
    stderr: float
    N: int
    p: int
    zero_level: int | None = None
    extra: dict = field(default_factory=dict)


def _sphere_points(n: int, N: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((n, N))
    return g * (math.sqrt(N) / np.linalg.norm(g, axis=1, keepdims=True))


def _feasible(J: np.ndarray, xi: np.ndarray, k: float, tol: float = 0.0) -> np.ndarray:
    if xi.shape[0] == 0:
        return np.ones(J.shape[0], dtype=bool)
    return np.all(J @ xi.T / math.sqrt(J.shape[1]) >= k - tol, axis=1)


def _arc_interval(a: np.ndarray, b: np.ndarray, k: float) -> tuple[np.ndarray, np.ndarray]:
    """Feasible angle interval [lo, hi] around 0 of a cos(t) + b sin(t) >= k, per row.

    With t = tan(theta/2) each constraint reads -(a+k) t^2 + 2 b t + (a-k) >= 0,
    a downward parabola (a >= k >= 0 at a feasible point) whose roots bracket
    t = 0.  Roots are formed without cancellation; a+k = 0 gives an infinite
    root, i.e. theta = +-pi.
    """
    c = np.abs(b) + np.sqrt(np.maximum(b * b + (a * a - k * k), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        u = c / (a + k)
        v = np.maximum(a - k, 0.0) / c
    pos = b >= 0
    t_hi = np.where(pos, u, v)
    t_lo = -np.where(pos, v, u)
    t_lo[np.isnan(t_lo)] = 0.0
    t_hi[np.isnan(t_hi)] = 0.0
    return 2.0 * np.arctan(t_lo.max(axis=1)), 2.0 * np.arctan(t_hi.min(axis=1))


def _walk(J: np.ndarray, xi: np.ndarray, k: float, steps: int, tol: float, rng: np.random.Generator) -> np.ndarray:
    """``steps`` hit-and-run moves for every row of J (rows on the sqrt(N) sphere)."""
    W, N = J.shape
    sqrt_n = math.sqrt(N)
    m = xi.shape[0]
    xi_t = np.ascontiguousarray(xi.T)
    chunk = max(1, min(steps, 2**16 // max(1, W * N) + 1))
    done = 0
    while done < steps:
        n = min(chunk, steps - done)
        E = rng.standard_normal((n, W, N))
        U = rng.random((n, W))
        for j in range(n):
            e = E[j]
            e -= (np.einsum("wi,wi->w", e, J) / N)[:, None] * J
            e /= np.sqrt(np.einsum("wi,wi->w", e, e))[:, None]
            if m:
                lo, hi = _arc_interval(J @ xi_t / sqrt_n, e @ xi_t, k)
                lo = np.minimum(lo + tol, 0.0)
                hi = np.maximum(np.maximum(hi - tol, 0.0), lo)
                theta = lo + (hi - lo) * U[j]
            else:
                theta = np.pi * (2.0 * U[j] - 1.0)
            J = J * np.cos(theta)[:, None] + sqrt_n * np.sin(theta)[:, None] * e
            J *= (sqrt_n / np.sqrt(np.einsum("wi,wi->w", J, J)))[:, None]
        done += n
    return J


def geodesic_hit_and_run_step(J, xi, k: float, rng: np.random.Generator, arc_tolerance: float = 1e-12) -> np.ndarray:
    """One hit-and-run move from J (norm sqrt(N)) inside {(xi_mu, J)/sqrt(N) >= k}.

    ``xi`` holds the constraints already imposed, one per row (may be empty).
    """
    J = np.asarray(J, dtype=float)
    N = J.shape[-1]
    xi = np.asarray(xi, dtype=float).reshape(-1, N)
    if abs(np.linalg.norm(J) - math.sqrt(N)) > 1e-8 * math.sqrt(N):
        raise ValueError("J must lie on the sphere of radius sqrt(N)")
    if not _feasible(J[None, :], xi, k, 1e-9)[0]:
        raise ValueError("starting point violates a constraint")
    return _walk(J[None, :], xi, k, 1, arc_tolerance, rng)[0]


def _level_stderr(batch_rates: np.ndarray, hits: int, n: int) -> float:
    """Batch-means standard error of a hit rate, floored by the binomial value.

    The floor uses p~ = (hits + 1/2) / (n + 1) so that levels with all or no
    hits still carry an honest uncertainty.
    """
    R = batch_rates.size
    bm = float(batch_rates.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0
    pt = (hits + 0.5) / (n + 1.0)
    return max(bm, math.sqrt(pt * (1 - pt) / n))


class _LevelSampler:
    """Walkers that are uniform on the body cut out by the first ``level`` constraints."""

    def __init__(self, inst: VolumeInstance, config: WalkConfig, rng: np.random.Generator):
        self.inst, self.config, self.rng = inst, config, rng
        self.level = 0
        self.J = _sphere_points(config.n_walkers, inst.N, rng)

    def measure(self, mu: int) -> tuple[LevelResult, np.ndarray]:
        """Hit rate of constraint ``mu`` (0-based) from the current body."""
        inst, cfg = self.inst, self.config
        body = inst.xi[:mu]
        row = inst.xi[mu]
        rates, pool = [], []
        hits = total = 0
        for attempt, rounds in enumerate((cfg.rounds, 3 * cfg.rounds)):
            for _ in range(rounds):
                self.J = _walk(self.J, body, inst.k, cfg.between(inst.N), cfg.arc_tolerance, self.rng)
                ok = self.J @ row / math.sqrt(inst.N) >= inst.k
                rates.append(ok.mean())
                hits += int(ok.sum())
                total += ok.size
                if ok.any():
                    pool.append(self.J[ok])
            if hits:
                break
            if attempt == 0:
                log.info("level %d: no hits in %d samples, tripling", mu + 1, total)
        rates = np.asarray(rates)
        p_hat = hits / total
        res = LevelResult(p_hat, _level_stderr(rates, hits, total), hits, total, hits == 0)
        return res, (np.concatenate(pool) if pool else np.empty((0, inst.N)))

    def advance(self, mu: int, pool: np.ndarray) -> None:
        """Resample walkers from points satisfying constraint ``mu`` and warm up."""
        cfg = self.config
        idx = self.rng.integers(0, pool.shape[0], size=cfg.n_walkers)
        body = self.inst.xi[: mu + 1]
        self.J = _walk(pool[idx].copy(), body, self.inst.k, cfg.warmup(self.inst.N), cfg.arc_tolerance, self.rng)
        self.level = mu + 1


def level_acceptance(instance: VolumeInstance, mu: int, config: WalkConfig, rng: np.random.Generator) -> LevelResult:
    """Probability that a uniform point of the body with constraints 1..mu-1 satisfies constraint mu.

    ``mu`` is 1-based.  The body is reached by running the earlier levels.
    """
    if not 1 <= mu <= instance.p:
        raise ValueError(f"mu must be in 1..{instance.p}, got {mu}")
    sampler = _LevelSampler(instance, config, rng)
    sampler.J = _walk(sampler.J, instance.xi[:0], instance.k, config.warmup(instance.N), config.arc_tolerance, rng)
    for m in range(mu - 1):
        res, pool = sampler.measure(m)
        if res.zero:
            return LevelResult(0.0, 0.0, 0, 0, True)
        sampler.advance(m, pool)
    return sampler.measure(mu - 1)[0]


def estimate_log_theta(
    instance: VolumeInstance,
    M: float = DEFAULT_M,
    config: WalkConfig | None = None,
    rng: np.random.Generator | None = None,
) -> VolumeEstimate:
    """(1/N) log Theta, clipped below at -M, by the telescoping product of hit rates."""
    if not M > 0:
        raise ValueError(f"M must be positive, got {M}")
    config = config or WalkConfig()
    if rng is None:
        raise ValueError("an explicit random generator is required")
    N, p = instance.N, instance.p
    logs, errs = [], []
    zero_level = None
    if p:
        sampler = _LevelSampler(instance, config, rng)
        for mu in range(p):
            res, pool = sampler.measure(mu)
            if res.zero:
                zero_level = mu + 1
                logs.append(-math.inf)
                errs.append(0.0)
                break
            logs.append(math.log(res.p_hat))
            errs.append(res.stderr / res.p_hat)
            if mu + 1 < p:
                sampler.advance(mu, pool)
    logs_a = np.asarray(logs, dtype=float)
    errs_a = np.asarray(errs, dtype=float)
    raw = float(np.sum(logs_a)) if logs else 0.0
    clipped = raw < -M * N
    total = max(raw, -M * N) / N
    stderr = 0.0 if clipped else float(math.sqrt(np.sum(errs_a**2)) / N)
    return VolumeEstimate(logs_a, errs_a, total, clipped, float(M), stderr, N, p, zero_level)


def _arc_breakpoints(xi: np.ndarray, k: float) -> np.ndarray:
    angles = [0.0, 2 * math.pi]
    for row in xi:
        r = math.hypot(row[0], row[1])
        if r == 0 or k / r > 1:
            continue
        psi = math.atan2(row[1], row[0])
        w = math.acos(k / r)
        angles += [(psi - w) % (2 * math.pi), (psi + w) % (2 * math.pi)]
    return np.unique(angles)


def exact_theta_2d(instance: VolumeInstance) -> float:
    """Exact feasible fraction of the circle for N = 2 by arc intersection."""
    if instance.N != 2:
        raise ValueError(f"exact_theta_2d needs N = 2, got N = {instance.N}")
    xi, k = instance.xi, instance.k
    if xi.shape[0] == 0:
        return 1.0
    cuts = _arc_breakpoints(xi, k)
    mids = 0.5 * (cuts[:-1] + cuts[1:])
    pts = math.sqrt(2.0) * np.stack([np.cos(mids), np.sin(mids)], axis=1)
    ok = _feasible(pts, xi, k)
    return float(np.sum(np.diff(cuts)[ok]) / (2 * math.pi))


def direct_theta(instance: VolumeInstance, n_samples: int, rng: np.random.Generator) -> tuple[float, float]:
    """Plain rejection estimate of Theta from uniform sphere points, with binomial stderr."""
    hits = 0
    done = 0
    while done < n_samples:
        n = min(100_000, n_samples - done)
        hits += int(_feasible(_sphere_points(n, instance.N, rng), instance.xi, instance.k).sum())
        done += n
    theta = hits / n_samples
    return theta, math.sqrt(theta * (1 - theta) / n_samples)


def annealed_reference(N: int, p: int) -> float:
    """2^(1-p) sum_{i<N} C(p-1, i).

    For patterns in general position with a sign-symmetric law and k = 0
    this is the probability that the constrained region is non-empty.
    """
    if N < 1 or p < 1:
        raise ValueError("need N >= 1 and p >= 1")
    s = sum(math.comb(p - 1, i) for i in range(min(N, p)))
    return float(Fraction(s, 2 ** (p - 1)))
