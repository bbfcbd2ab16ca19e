import math

import numpy as np
import pytest
from numba import njit

from omdyn.integrator import (
    PAIR_ID, DeviationSet, IntegrationError, IntegratorConfig, TangentIntegrator, concat,
    integrate, integrate_with_deviations,
)
from omdyn.indicators import lyapunov_spectrum
from omdyn.model import SystemParams

from oracles import ORACLE_EIG_RE, ORACLE_FP


@njit(cache=True)
def linear_rhs(t, y, p, out):
    # dy_i = p_i y_i, for the flow and every tangent block
    for i in range(y.size):
        out[i] = p[i % 4] * y[i]


class TestFlow:
    def test_free_mechanical_decay(self):
        p = SystemParams(0.3, 0.1, 0.01, 0.0)
        tr = integrate(p, [0, 0, 1.0, 0.0], (0, 200), sample_dt=0.5)
        beta = tr.states[:, 2] + 1j * tr.states[:, 3]
        exact = np.exp((-1j - 0.005) * tr.times)
        np.testing.assert_allclose(beta, exact, rtol=1e-8, atol=1e-11)
        np.testing.assert_allclose(np.abs(beta), np.exp(-0.005 * tr.times), rtol=1e-8)

    def test_driven_cavity_limit(self):
        d, k = -0.4, 0.2
        p = SystemParams(d, k, 1e-4, 0.0)
        tr = integrate(p, np.zeros(4), (0, 100), sample_dt=1.0)
        lam = 1j * d - k / 2
        ss = -0.5 / lam
        alpha = tr.states[:, 0] + 1j * tr.states[:, 1]
        exact = ss * (1 - np.exp(lam * tr.times))
        np.testing.assert_allclose(alpha, exact, rtol=1e-8, atol=1e-11)

    def test_custom_linear_kernel(self):
        rates = np.array([-0.5, 0.1, -2.0, 0.0])
        y0 = np.array([1.0, 2.0, -1.0, 3.0])
        tr = integrate(rates, y0, (0, 10), sample_dt=0.25, rhs=linear_rhs)
        exact = y0 * np.exp(np.outer(tr.times, rates))
        np.testing.assert_allclose(tr.states, exact, rtol=1e-8)

    def test_sample_grid(self):
        tr = integrate(SystemParams(0.0, 0.1, 1e-4, 0.1), np.zeros(4), (5.0, 15.0), sample_dt=0.1)
        assert tr.states.shape == (101, 4)
        np.testing.assert_allclose(tr.times, 5.0 + 0.1 * np.arange(101))
        assert tr.meta["pair"] == PAIR_ID
        np.testing.assert_allclose(tr.Q, math.sqrt(2) * tr.states[:, 2])

    def test_deterministic(self):
        p = SystemParams(0.727, 0.1, 1e-4, 0.3)
        a = integrate(p, [0, 0, 1e-3, 0], (0, 500))
        b = integrate(p, [0, 0, 1e-3, 0], (0, 500))
        assert np.array_equal(a.states, b.states)

    def test_tolerance_convergence(self):
        p = SystemParams(0.5, 0.1, 1e-4, 0.2)
        loose = integrate(p, np.zeros(4), (0, 200), IntegratorConfig(rel_tol=1e-6, abs_tol=1e-10))
        tight = integrate(p, np.zeros(4), (0, 200), IntegratorConfig(rel_tol=1e-11, abs_tol=1e-14))
        err = np.max(np.abs(loose.states[-1] - tight.states[-1]))
        assert err < 1e-4

    def test_divergence_raises_with_partial(self):
        with pytest.raises(IntegrationError) as info:
            integrate(np.array([1.0, 1.0, 1.0, 1.0]), np.ones(4), (0, 100), rhs=linear_rhs)
        err = info.value
        assert err.kind == "divergence"
        assert 20 < err.tau < 35
        assert err.partial is not None and len(err.partial.times) > 1

    def test_bad_inputs(self):
        p = SystemParams(0.0, 0.1, 1e-4, 0.1)
        with pytest.raises(ValueError):
            integrate(p, np.zeros(4), (1.0, 1.0))
        with pytest.raises(ValueError):
            IntegratorConfig(rel_tol=0.0)
        with pytest.raises(ValueError):
            DeviationSet.canonical(5)


class TestTangent:
    def test_linear_growth_ledger(self):
        rates = np.array([0.3, -0.1, -0.2, -0.6])
        run = TangentIntegrator(rates, np.ones(4), DeviationSet.canonical(4), rhs=linear_rhs)
        tr = run.advance(50.0, sample_every=10)
        lam = tr.gs_log[-1] / tr.times[-1]
        np.testing.assert_allclose(lam, rates, rtol=1e-7, atol=1e-9)
        np.testing.assert_allclose(tr.log_norms[-1], rates * 50.0, rtol=1e-7, atol=1e-9)

    def test_fixed_point_exponents_match_eigenvalues(self):
        p = SystemParams(-1.0, 0.1, 1e-4, 0.05)
        spec = lyapunov_spectrum(p, ORACLE_FP, 1e4)
        np.testing.assert_allclose(np.sort(spec.lambdas), np.sort(ORACLE_EIG_RE), rtol=0.02)

    def test_sum_rule_is_exact_in_ledger(self):
        p = SystemParams(0.727, 0.1, 1e-4, 0.3)
        spec = lyapunov_spectrum(p, [0, 0, 1e-3, 0], 2000.0)
        assert spec.total == pytest.approx(-0.1001, rel=1e-6)

    def test_renorm_interval_invariance(self):
        p = SystemParams(-1.0, 0.1, 1e-4, 0.05)
        out = []
        for h in (0.5, 1.0, 4.0):
            cfg = IntegratorConfig(renorm_interval=h)
            out.append(lyapunov_spectrum(p, ORACLE_FP, 2000.0, cfg).lambdas)
        np.testing.assert_allclose(out[0], out[1], rtol=1e-6)
        np.testing.assert_allclose(out[2], out[1], rtol=1e-6)

    def test_chunked_equals_single(self):
        p = SystemParams(0.74, 0.1, 1e-4, 0.3)
        one = TangentIntegrator(p, [0, 0, 1e-3, 0]).advance(400.0)
        run = TangentIntegrator(p, [0, 0, 1e-3, 0])
        two = concat([run.advance(200.0), run.advance(200.0)])
        np.testing.assert_allclose(two.times, one.times)
        np.testing.assert_allclose(two.states, one.states, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(two.log_norms, one.log_norms, rtol=1e-9, atol=1e-9)

    def test_vectors_not_reorthogonalised(self):
        # at a stable focus every vector is pulled into the slowest eigenplane
        p = SystemParams(-1.0, 0.1, 1e-4, 0.05)
        tr = integrate_with_deviations(p, ORACLE_FP, DeviationSet.canonical(3), (0, 3000))
        v = tr.unit_vectors[-1]
        assert np.allclose(np.linalg.norm(v, axis=1), 1.0)
        assert tr.log_gali_volume[-1, 2] < -3

    def test_initial_gram_schmidt_of_user_vectors(self):
        w = DeviationSet(np.array([[1.0, 0, 0, 0], [1.0, 1.0, 0, 0], [0, 0, 2.0, 0]]), np.zeros(3))
        run = TangentIntegrator(SystemParams(0, 0.1, 1e-4, 0.0), np.zeros(4), w)
        cur = run.current()
        expect = w.vectors / np.linalg.norm(w.vectors, axis=1)[:, None]
        np.testing.assert_allclose(cur.vectors, expect, atol=1e-14)

    def test_random_orthonormal(self):
        d = DeviationSet.random_orthonormal(4, seed=3)
        np.testing.assert_allclose(d.vectors @ d.vectors.T, np.eye(4), atol=1e-14)
        assert np.array_equal(d.vectors, DeviationSet.random_orthonormal(4, seed=3).vectors)
