import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from gardner.gibbs import (
    ChainState,
    blocked_sweep,
    energy,
    estimate_order_parameters,
    factorization_statistic,
    grad_energy,
    initial_state,
    make_instance,
    make_patterns,
    rs_consistency_report,
    run_chains,
    truncated_normal_sample,
)
from gardner.replica import ModelParams, solve_saddle
from gardner.streams import generator
from gardner.specfn import tail_ratio

BASE = ModelParams(alpha=0.3, k=0.0, h=0.3, z=1.0, eps=0.05)


def energy_oracle(J, inst):
    # scipy's log_ndtr and an explicit loop, no shared code with the package
    p = inst.params
    total = 0.0
    for mu in range(inst.p):
        y = sum(inst.xi[mu, i] * J[i] for i in range(inst.N)) / math.sqrt(inst.N)
        total -= float(special.log_ndtr(-(p.k - y) / math.sqrt(p.eps)))
    total += p.h * sum(inst.field[i] * J[i] for i in range(inst.N))
    total += 0.5 * p.z * sum(v * v for v in J)
    return total


def power_iteration_norm(X, iters=2000):
    v = np.ones(X.shape[0])
    for _ in range(iters):
        w = X @ v
        v = w / np.linalg.norm(w)
    return float(v @ X @ v)


class TestInstance:
    def test_pattern_count(self):
        assert make_instance(4, 0.5, BASE, seed=1).p == 2
        assert make_instance(200, 0.3, BASE, seed=1).p == 60
        assert make_instance(10, 0.25, BASE, seed=1).p == 3

    def test_deterministic(self):
        a = make_instance(30, 0.4, BASE, seed=7)
        b = make_instance(30, 0.4, BASE, seed=7)
        np.testing.assert_array_equal(a.xi, b.xi)
        np.testing.assert_array_equal(a.field, b.field)
        np.testing.assert_array_equal(a.precision_factor, b.precision_factor)
        c = make_instance(30, 0.4, BASE, seed=8)
        assert not np.array_equal(a.xi, c.xi)

    def test_pattern_modes(self):
        xi = make_patterns(20, 30, 3, "binary").xi
        assert set(np.unique(xi)) == {-1.0, 1.0}
        g = make_patterns(20, 30, 3, "gaussian").xi
        assert len(np.unique(g)) == g.size
        with pytest.raises(ValueError):
            make_patterns(2, 3, 0, "ternary")

    def test_precision_factor(self):
        inst = make_instance(25, 0.4, BASE, seed=2)
        L = inst.precision_factor
        P = BASE.z * np.eye(25) + inst.xi.T @ inst.xi / (25 * BASE.eps)
        np.testing.assert_allclose(L @ L.T, P, atol=1e-10)
        assert np.allclose(L, np.tril(L))

    def test_overlap_diagnostic(self):
        inst = make_instance(100, 0.3, BASE, seed=1)
        X = inst.xi @ inst.xi.T / 100
        np.testing.assert_allclose(np.diag(X), 1.0)
        assert inst.overlap_norm == pytest.approx(power_iteration_norm(X), rel=1e-8)
        assert inst.overlap_warning == (inst.overlap_norm > (math.sqrt(0.3) + 2) ** 2)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            make_instance(1, 0.3, BASE, seed=0)
        with pytest.raises(ValueError):
            make_instance(10, -0.1, BASE, seed=0)


class TestEnergy:
    def test_origin(self):
        p = ModelParams(alpha=0.5, k=0.7, h=0.0, z=1.0, eps=0.1)
        inst = make_instance(10, 0.5, p, seed=0)
        assert energy(np.zeros(10), inst) == pytest.approx(-5 * math.log(special.ndtr(-0.7 / math.sqrt(0.1))), rel=1e-13)
        inst = make_instance(10, 0.5, BASE.with_(h=0.8), seed=0)
        assert energy(np.zeros(10), inst) == pytest.approx(5 * math.log(2), rel=1e-13)

    def test_matches_oracle(self):
        inst = make_instance(10, 0.6, ModelParams(alpha=0.6, k=0.4, h=0.2, z=1.3, eps=0.07), seed=4)
        rng = np.random.default_rng(0)
        for _ in range(5):
            J = rng.standard_normal(10) * 2
            assert energy(J, inst) == pytest.approx(energy_oracle(J, inst), abs=1e-10)

    def test_finite_far_from_feasibility(self):
        inst = make_instance(10, 0.5, ModelParams(alpha=0.5, k=1.0, eps=0.01), seed=0)
        J = -50 * np.sign(inst.xi.sum(axis=0) + 0.5)
        assert np.isfinite(energy(J, inst))

    def test_wrong_length(self):
        inst = make_instance(10, 0.5, BASE, seed=0)
        with pytest.raises(ValueError):
            energy(np.zeros(9), inst)


class TestGradient:
    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        params = ModelParams(alpha=0.5, k=0.3, h=0.4, z=1.0, eps=0.05)
        inst = make_instance(20, 0.5, params, seed=seed)
        rng = np.random.default_rng(seed)
        for _ in range(10):
            J = rng.standard_normal(20)
            g = grad_energy(J, inst)
            for i in range(20):
                step = 1e-6 * max(1.0, abs(J[i]))
                e = np.zeros(20)
                e[i] = step
                fd = (energy(J + e, inst) - energy(J - e, inst)) / (2 * step)
                assert fd == pytest.approx(g[i], rel=1e-6, abs=1e-7)

    def test_origin_closed_form(self):
        inst = make_instance(12, 0.5, BASE.with_(h=0.0), seed=3)
        g = grad_energy(np.zeros(12), inst)
        expected = -tail_ratio(0.0) / math.sqrt(12 * BASE.eps) * inst.xi.sum(axis=0)
        np.testing.assert_allclose(g, expected, rtol=1e-14, atol=1e-14)

    def test_no_patterns(self):
        inst = make_instance(12, 0.0, BASE, seed=3)
        J = np.linspace(-1, 1, 12)
        np.testing.assert_array_equal(grad_energy(J, inst), BASE.h * inst.field + BASE.z * J)


class TestTruncatedNormal:
    def test_loose_bound_is_plain_gaussian(self):
        rng = generator(1)
        x = truncated_normal_sample(np.full(10**6, 1.5), 2.0, 1.5 - 100.0, rng)
        se = 2.0 / 1000
        assert abs(x.mean() - 1.5) < 3 * se
        assert abs(x.var() - 4.0) < 3 * 4.0 * math.sqrt(2 / 10**6)

    def test_half_normal(self):
        x = truncated_normal_sample(np.zeros(10**6), 1.0, 0.0, generator(2))
        se = x.std() / 1000
        assert abs(x.mean() - math.sqrt(2 / math.pi)) < 3 * se
        assert np.all(x > 0)

    @pytest.mark.parametrize("lower", [2.5, 5.0, 12.0, 40.0])
    def test_tail_mean_is_mills_ratio(self, lower):
        x = truncated_normal_sample(np.zeros(2 * 10**5), 1.0, lower, generator(3))
        assert np.all(x > lower)
        se = x.std() / math.sqrt(x.size)
        assert abs(x.mean() - tail_ratio(lower)) < 3 * se

    def test_shifted_and_scaled(self):
        x = truncated_normal_sample(np.full(2 * 10**5, -3.0), 0.5, 1.0, generator(4))
        se = x.std() / math.sqrt(x.size)
        assert abs(x.mean() - (-3.0 + 0.5 * tail_ratio(8.0))) < 3 * se

    def test_scalar_in_scalar_out(self):
        v = truncated_normal_sample(0.0, 1.0, 1.0, generator(5))
        assert isinstance(v, float) and v > 1.0

    def test_bad_sd(self):
        with pytest.raises(ValueError):
            truncated_normal_sample(0.0, 0.0, 1.0, generator(5))

    @settings(max_examples=200, deadline=None)
    @given(
        st.floats(-1e3, 1e3),
        st.floats(1e-3, 1e3),
        st.floats(-1e3, 1e3),
        st.integers(0, 2**32),
    )
    def test_always_above_bound(self, mean, sd, lower, seed):
        assert truncated_normal_sample(mean, sd, lower, generator(seed)) > lower


class TestSweep:
    def test_gaussian_case_moments(self):
        params = ModelParams(alpha=0.0, k=0.0, h=0.7, z=2.0, eps=0.05)
        inst = make_instance(5, 0.0, params, seed=11)
        rng = generator(5)
        state = initial_state(inst, 5, rng)
        draws = []
        for _ in range(20000):
            state = blocked_sweep(state, inst, rng)
            draws.append(state.J)
        draws = np.array(draws)
        mean = -params.h / params.z * inst.field
        se = math.sqrt(1 / params.z / len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 3.5 * se)
        cov = np.cov(draws.T)
        np.testing.assert_allclose(cov, np.eye(5) / params.z, atol=4 * math.sqrt(2 / len(draws)) / params.z)
        assert state.sweep_count == 20000

    def test_weak_coupling_auxiliary_mean(self):
        # with eps huge, x is approximately |N(0, 1 + eps)| truncated at 0
        params = ModelParams(alpha=0.5, k=0.0, h=0.0, z=1.0, eps=1e6)
        inst = make_instance(20, 0.5, params, seed=3)
        rng = generator(9)
        state = initial_state(inst, 9, rng)
        xs = []
        for _ in range(4000):
            state = blocked_sweep(state, inst, rng)
            xs.append(state.x)
        xs = np.concatenate(xs)
        se = xs.std() / math.sqrt(xs.size)
        assert abs(xs.mean() - math.sqrt(1 + params.eps) * math.sqrt(2 / math.pi)) < 3 * se

    def test_determinism_and_constraint(self):
        inst = make_instance(30, 0.5, BASE.with_(k=0.5), seed=2)
        s0 = initial_state(inst, 1, generator(1))
        a = blocked_sweep(s0, inst, generator(77))
        b = blocked_sweep(s0, inst, generator(77))
        np.testing.assert_array_equal(a.J, b.J)
        np.testing.assert_array_equal(a.x, b.x)
        state, rng = s0, generator(3)
        for _ in range(200):
            state = blocked_sweep(state, inst, rng)
            assert np.all(state.x > 0.5)

    def test_run_chains_reproducible(self):
        inst = make_instance(20, 0.3, BASE, seed=5)
        a = run_chains(inst, 3, 60, 10)
        b = run_chains(inst, 3, 60, 10)
        np.testing.assert_array_equal(a.J, b.J)
        np.testing.assert_array_equal(a.t2_sum, b.t2_sum)
        assert isinstance(a.final_states[0], ChainState)


class TestEstimates:
    def test_gaussian_no_field(self):
        params = ModelParams(alpha=0.0, k=0.0, h=0.0, z=1.5, eps=0.05)
        inst = make_instance(40, 0.0, params, seed=1)
        e = estimate_order_parameters(inst, 4, 1500, 100)
        assert abs(e.R_N.value - 1 / 1.5) < 3 * e.R_N.stderr + 1e-12
        assert abs(e.q_N.value) < 3 * e.q_N.stderr
        assert e.tilde_U.value == 0 and e.tilde_q.value == 0

    def test_gaussian_with_field(self):
        params = ModelParams(alpha=0.0, k=0.0, h=0.5, z=1.0, eps=0.05)
        inst = make_instance(40, 0.0, params, seed=2)
        e = estimate_order_parameters(inst, 4, 1500, 100)
        target = params.h**2 / params.z**2 * float(inst.field @ inst.field) / 40
        assert abs(e.q_N.value - target) < 3 * e.q_N.stderr

    def test_two_chain_errors_use_time_blocks(self):
        inst = make_instance(30, 0.3, BASE, seed=3)
        e = estimate_order_parameters(inst, 2, 600, 100)
        assert e.q_N.stderr > 0 and math.isfinite(e.q_N.stderr)
        assert math.isnan(e.factorization_stat.value)

    def test_ordering_and_positivity(self):
        inst = make_instance(60, 0.3, BASE, seed=4)
        e = estimate_order_parameters(inst, 4, 800, 200)
        assert e.q_N.value <= e.R_N.value + 3 * math.hypot(e.q_N.stderr, e.R_N.stderr)
        assert e.tilde_q.value <= e.tilde_U.value + 3 * math.hypot(e.tilde_q.stderr, e.tilde_U.stderr)
        assert e.R_N.value > 0 and e.q_N.value > 0
        assert 0 < e.max_abs_J_over_sqrt_n < 1

    def test_parameter_errors(self):
        inst = make_instance(20, 0.3, BASE, seed=1)
        with pytest.raises(ValueError):
            estimate_order_parameters(inst, 1, 100, 10)
        with pytest.raises(ValueError):
            estimate_order_parameters(inst, 2, 100, 100)
        with pytest.raises(ValueError):
            factorization_statistic(run_chains(inst, 3, 50, 10))


class TestFactorization:
    def test_gaussian_value(self):
        params = ModelParams(alpha=0.0, k=0.0, h=0.3, z=1.3, eps=0.05)
        inst = make_instance(24, 0.0, params, seed=6)
        f = factorization_statistic(run_chains(inst, 8, 1200, 100))
        assert abs(f.value - 1 / (24 * 1.3**2)) < 3 * f.stderr

    def test_stable_under_longer_runs(self):
        inst = make_instance(24, 0.3, BASE, seed=7)
        a = factorization_statistic(run_chains(inst, 6, 800, 200))
        b = factorization_statistic(run_chains(inst, 6, 1400, 200))
        assert abs(a.value - b.value) < 2 * math.hypot(a.stderr, b.stderr)


class TestConsistency:
    def test_gaussian_control(self):
        params = ModelParams(alpha=0.0, k=0.0, h=0.4, z=1.0, eps=0.05)
        inst = make_instance(40, 0.0, params, seed=8)
        e = estimate_order_parameters(inst, 4, 1500, 100)
        report = rs_consistency_report(e, solve_saddle(params), params)
        rows = {r.name: r for r in report.rows}
        assert rows["tilde_q_closed_form"].lhs == rows["tilde_q_closed_form"].rhs == 0
        assert rows["tilde_U_closed_form"].rhs == 0
        assert not rows["q_identity"].flagged
        assert not rows["R_minus_q_identity"].flagged
        assert set(report.as_dict()) == set(rows)

    def test_needs_converged_saddle(self):
        from dataclasses import replace

        params = BASE
        inst = make_instance(20, 0.3, params, seed=1)
        e = estimate_order_parameters(inst, 2, 200, 50)
        sp = replace(solve_saddle(params), converged=False)
        with pytest.raises(ValueError):
            rs_consistency_report(e, sp, params)
