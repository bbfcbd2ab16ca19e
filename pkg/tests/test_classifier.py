import math

import numpy as np
import pytest

from omdyn.classifier import (
    AttractorClass, AttractorId, ClassificationError, ClassifierConfig, Kind, classify,
    detect_crossover, escape_time, fingerprint, fit_escape_time, quantize, sample_seeds,
    survivor_curve,
)
from omdyn.indicators import IndicatorSeries
from omdyn.model import SystemParams

from oracles import ORACLE_FP


def synthetic(times, log_w):
    n = len(times)
    z = np.zeros(n)
    return IndicatorSeries(np.asarray(times, float), np.asarray(log_w, float), z, z)


class TestCrossover:
    def test_growth_then_plateau(self):
        rng = np.random.default_rng(0)
        t = np.arange(10.0, 20001.0, 10.0)
        w = np.where(t < 5000, 0.005 * t, 25.0) + 0.05 * rng.standard_normal(t.size)
        tc = detect_crossover(synthetic(t, w))
        assert tc is not None
        assert abs(tc - 5000) <= 1000

    def test_growth_then_decay(self):
        t = np.arange(10.0, 20001.0, 10.0)
        w = np.where(t < 8000, 0.004 * t, 32.0 - 0.01 * (t - 8000))
        assert abs(detect_crossover(synthetic(t, w)) - 8000) <= 1000

    def test_regular_power_law_growth_is_no_crossover(self):
        t = np.arange(10.0, 1e5, 10.0)
        assert detect_crossover(synthetic(t, np.log(t))) is None

    def test_persistent_growth_is_no_crossover(self):
        t = np.arange(10.0, 20001.0, 10.0)
        assert detect_crossover(synthetic(t, 0.01 * t)) is None

    def test_unconfirmed_late_plateau(self):
        t = np.arange(10.0, 20001.0, 10.0)
        w = np.where(t < 17000, 0.005 * t, 85.0)
        assert detect_crossover(synthetic(t, w)) is None

    def test_empty(self):
        with pytest.raises(ValueError):
            detect_crossover(synthetic([], []))


class TestEscapeStatistics:
    def test_exponential_escape_recovered(self):
        rng = np.random.default_rng(11)
        times = rng.exponential(500.0, 400)
        horizon = 3000.0
        cens = times > horizon
        times[cens] = horizon
        tau, r2 = fit_escape_time(times, cens)
        assert tau == pytest.approx(500.0, rel=0.10)
        assert r2 > 0.95

    def test_survivor_curve(self):
        ev, n = survivor_curve([3.0, 1.0, 9.0, 2.0], [False, False, True, False])
        np.testing.assert_array_equal(ev, [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(n, [3, 2, 1])

    def test_too_few_escapes(self):
        assert fit_escape_time([1.0, 2.0, 5.0], [False] * 3) == (None, None)

    def test_escape_needs_ten_seeds(self):
        with pytest.raises(ValueError):
            escape_time(SystemParams(-1, 0.1, 1e-4, 0.05), np.zeros((3, 4)))

    def test_sample_seeds(self):
        p = SystemParams(0.3, 0.1, 1e-4, 0.02)
        s = sample_seeds(p, np.zeros(4), 5, 100.0, 200.0)
        assert s.shape == (5, 4)
        assert not np.allclose(s[0], s[1])
        with pytest.raises(ValueError):
            sample_seeds(p, np.zeros(4), 5, 200.0, 100.0)

    def test_regular_seeds_escape_at_zero(self):
        p = SystemParams(-1.0, 0.1, 1e-4, 0.05)
        seeds = ORACLE_FP + 1e-4 * np.random.default_rng(2).standard_normal((10, 4))
        rep = escape_time(p, seeds, horizon=6000.0)
        assert all(k is Kind.FIXED_POINT for k in rep.kinds)
        np.testing.assert_array_equal(rep.escape_times, 0.0)
        assert rep.n_escaped == 10


class TestClassify:
    def test_stable_focus(self):
        res = classify(SystemParams(-1.0, 0.1, 1e-4, 0.05), ORACLE_FP + 1e-3, horizon=2e4)
        assert res.kind is Kind.FIXED_POINT
        assert res.kind.regular
        assert res.final_state.shape == (4,)
        assert "rule" in res.diagnostics

    def test_zero_power_relaxes(self):
        res = classify(SystemParams(0.0, 0.1, 1e-4, 0.0), np.zeros(4), horizon=2e4)
        assert res.kind is Kind.FIXED_POINT

    def test_limit_cycle(self):
        res = classify(SystemParams(0.3, 0.1, 1e-4, 0.02), [0, 0, 1e-3, 0], horizon=2e4)
        assert res.kind is Kind.LIMIT_CYCLE

    def test_short_horizon_is_undetermined(self):
        res = classify(SystemParams(0.3, 0.1, 1e-4, 0.02), [0, 0, 1e-3, 0], horizon=3000)
        assert res.kind is Kind.UNDETERMINED
        assert res.t_escape is None

    def test_keep_series(self):
        res = classify(SystemParams(0.0, 0.1, 1e-4, 0.0), np.zeros(4), horizon=2e4, keep_series=True)
        assert res.series is not None and len(res.series) > 0

    def test_integration_failure_gives_partial(self, monkeypatch):
        from omdyn import classifier as mod
        from omdyn.integrator import IntegrationError

        def boom(self, duration, sample_every=10):
            raise IntegrationError("state diverged", 12.0, "divergence")

        monkeypatch.setattr(mod.TangentIntegrator, "advance", boom)
        with pytest.raises(ClassificationError) as info:
            classify(SystemParams(0.0, 0.1, 1e-4, 0.0), np.zeros(4), horizon=1e3)
        part = info.value.partial
        assert part.kind is Kind.UNDETERMINED
        assert "diverged" in part.diagnostics["error"]

    def test_bad_arguments(self):
        p = SystemParams(0.0, 0.1, 1e-4, 0.0)
        with pytest.raises(ValueError):
            classify(p, np.zeros(4), epsilon=2.0)
        with pytest.raises(ValueError):
            classify(p, np.zeros(4), horizon=0)
        with pytest.raises(ValueError):
            ClassifierConfig(chunk=0)


class TestFingerprint:
    dt = 0.1
    t = np.arange(2 ** 14) * 0.1

    def test_single_tone(self):
        q = 0.3 + 0.05 * np.sin(0.9 * self.t)
        fid = fingerprint(None, q)
        mean, amp, f0, m = fid.fingerprint
        assert mean == pytest.approx(0.3, abs=1e-3)
        assert amp == pytest.approx(0.05, rel=1e-3)
        assert f0 == pytest.approx(0.9, abs=1e-3)
        assert m == 1

    def test_period_doubled(self):
        q = 0.3 + 0.05 * np.sin(0.9 * self.t) + 0.01 * np.sin(0.45 * self.t + 0.3)
        assert fingerprint(None, q).fingerprint[3] == 2

    def test_period_four_weak_subharmonic(self):
        q = (0.05 * np.sin(0.9 * self.t) + 0.01 * np.sin(0.45 * self.t)
             + 0.0004 * np.sin(0.225 * self.t))
        assert fingerprint(None, q).fingerprint[3] == 4

    def test_slow_drift_ignored(self):
        q = 0.05 * np.sin(0.9 * self.t) + 0.002 * np.sin(0.001 * self.t)
        assert fingerprint(None, q).fingerprint[3] == 1

    def test_fixed_point(self):
        fid = fingerprint(SystemParams(-1.0, 0.1, 1e-4, 0.05), ORACLE_FP, Kind.FIXED_POINT)
        assert fid.fingerprint[1:] == (0.0, 0.0, 0)
        assert fid.fingerprint[0] == pytest.approx(math.sqrt(2) * ORACLE_FP[2], rel=1e-3)

    def test_matches_and_hash(self):
        q1 = 0.3 + 0.05 * np.sin(0.9 * self.t)
        q2 = 0.3003 + 0.05 * np.sin(0.9 * self.t)
        a, b = fingerprint(None, q1), fingerprint(None, q2)
        assert a.matches(b)
        assert not a.matches(AttractorId(Kind.LIMIT_TORUS_2D, a.fingerprint, a.raw))
        assert len({a, fingerprint(None, q1)}) == 1
        assert "LimitCycle" in a.label()

    def test_quantize(self):
        assert quantize(0.123456) == 0.1235
        assert quantize(-0.0456789) == -0.04568
        assert quantize(1234.4) == 1234.0
        assert quantize(0.0) == 0.0
