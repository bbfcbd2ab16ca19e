"""Attractor labelling from the dissipative GALI rules.

A run evolves three deviation vectors in chunks and tests, after a transient
window, the mean deviation norm ``<w>``, the mean ``GALI_2`` and ``GALI_3``
against ``epsilon`` and ``1/epsilon``.  All comparisons are done on natural
logs of the ledgers.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .indicators import IndicatorSeries
from .integrator import DeviationSet, IntegrationError, IntegratorConfig, TangentIntegrator, integrate
from .model import Stability, find_fixed_points
from .spectral import mechanical_spectrum


class Kind(str, enum.Enum):
    FIXED_POINT = "FixedPoint"
    LIMIT_CYCLE = "LimitCycle"
    LIMIT_TORUS_2D = "LimitTorus2D"
    CHAOTIC = "Chaotic"
    TRANSIENT_CHAOTIC = "TransientChaotic"
    UNDETERMINED = "Undetermined"

    def __str__(self):
        return self.value

    @property
    def regular(self) -> bool:
        return self in (Kind.FIXED_POINT, Kind.LIMIT_CYCLE, Kind.LIMIT_TORUS_2D)


@dataclass(frozen=True)
class ClassifierConfig:
    """Numerical knobs of the decision procedure (times in units of 1/Omega_m).

    ``transient`` is excluded from all threshold tests.  ``chunk`` is the
    stride at which rules are re-evaluated and crossovers checked.  When
    ``GALI_3`` fires first the run is extended to ``(1 + torus_extension)``
    times the firing time, and further while ``GALI_2`` is still falling fast
    enough to cross ``epsilon`` before the horizon.
    """

    transient: float = 2000.0
    chunk: float = 1000.0
    sample_every: int = 10
    torus_extension: float = 4.0
    slope_window: float = 1000.0
    slope_tol: float = 1e-4
    plateau_delta: float = 2.0
    confirm: float = 5000.0
    fixed_point_check: bool = True
    fixed_point_distance: float = 1e-3
    fixed_point_rate_rtol: float = 0.5

    def __post_init__(self):
        if self.transient < 0 or self.chunk <= 0 or self.sample_every < 1:
            raise ValueError("invalid classifier timing")
        if self.slope_window <= 0 or self.confirm <= 0 or self.torus_extension < 0:
            raise ValueError("invalid classifier windows")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class AttractorClass:
    kind: Kind
    t_escape: float | None = None
    diagnostics: dict = field(default_factory=dict)
    series: IndicatorSeries | None = field(default=None, repr=False, compare=False)

    @property
    def rule(self) -> str:
        return self.diagnostics.get("rule", "")

    @property
    def final_state(self) -> np.ndarray | None:
        fs = self.diagnostics.get("final_state")
        return None if fs is None else np.asarray(fs)


class ClassificationError(RuntimeError):
    def __init__(self, message, partial: AttractorClass):
        super().__init__(message)
        self.partial = partial


# ---------------------------------------------------------------------------
# helpers

def _slope(t, y):
    if t.size < 3:
        return 0.0
    return float(np.polyfit(t, y, 1)[0])


def _running_slopes(t, y, r0):
    """Least-squares slope of ``y`` over samples ``r0..i`` for every ``i`` (nan before r0)."""
    out = np.full(t.size, np.nan)
    tt = t[r0:] - t[r0]
    yy = y[r0:] - y[r0]
    n = np.arange(1, tt.size + 1)
    st, sy = np.cumsum(tt), np.cumsum(yy)
    stt, sty = np.cumsum(tt * tt), np.cumsum(tt * yy)
    den = n * stt - st * st
    with np.errstate(divide="ignore", invalid="ignore"):
        out[r0:] = np.where(den > 0, (n * sty - st * sy) / den, np.nan)
    return out


def _window(series_t, t0, t1):
    return (series_t >= t0) & (series_t <= t1)


def detect_crossover(series: IndicatorSeries, window: float = 1000.0, slope_tol: float = 1e-4,
                     plateau_delta: float = 2.0, confirm: float = 5000.0,
                     min_growth: float = math.log(1e6), start: float = 0.0) -> float | None:
    """Time at which ``log <w>`` stops growing and stays flat or falling.

    The candidate is the first time the running maximum of ``log <w>`` comes
    within ``plateau_delta`` of its final value.  It is accepted when the
    growth before it exceeds ``min_growth``, the slope over the preceding
    ``window`` exceeds ``slope_tol``, and the least-squares slope over the
    remainder, at least ``confirm`` long, is at most ``slope_tol``.
    """
    t = np.asarray(series.times)
    w = np.asarray(series.log_mean_norm)
    if t.size == 0:
        raise ValueError("empty series")
    sel = t >= start
    t, w = t[sel], w[sel]
    if t.size < 4:
        return None
    run_max = np.maximum.accumulate(w)
    i_c = int(np.argmax(run_max >= run_max[-1] - plateau_delta))
    tc = t[i_c]
    if t[-1] - tc < confirm:
        return None
    if w[i_c] - w[0] < min_growth:
        return None
    before = _window(t, tc - window, tc)
    if _slope(t[before], w[before]) <= slope_tol:
        return None
    after = t >= tc
    if _slope(t[after], w[after]) > slope_tol:
        return None
    return float(tc)


def _stable_fixed_points(params):
    out = []
    for rec in find_fixed_points(params):
        if rec.stability is Stability.STABLE:
            out.append((rec.state.to_real(), float(np.max(rec.eigenvalues.real))))
    return out


def _series_summary(series: IndicatorSeries) -> dict:
    ln10 = math.log(10.0)
    return {"log10_mean_norm": float(series.log_mean_norm[-1] / ln10),
            "log10_gali2_mean": float(series.log_gali2_mean[-1] / ln10),
            "log10_gali3": float(series.log_gali3[-1] / ln10)}


# ---------------------------------------------------------------------------
# classification

def classify(params, y0, epsilon: float = 1e-6, horizon: float = 1e5,
             config: IntegratorConfig = IntegratorConfig(),
             ccfg: ClassifierConfig = ClassifierConfig(),
             W0: DeviationSet | None = None, keep_series: bool = False) -> AttractorClass:
    """Label the attractor reached from ``y0``.

    Rules, tested in order at every sample after the transient window:
    ``<w> < eps`` is a fixed point; ``<w>`` in range with ``<GALI_2> < eps`` a
    limit cycle; ``<w>``, ``<GALI_2>`` in range with ``GALI_3 < eps`` a 2-torus
    (after an extended ``GALI_2`` check); ``<w> > 1/eps`` with either GALI
    below ``eps`` the chaotic signature.  A chaotic signature followed by a
    confirmed crossover of ``<w>`` is transient chaos; one that persists to
    the horizon is chaos.  When nothing fires the result is Undetermined.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must be in (0, 1)")
    if not horizon > 0:
        raise ValueError("horizon must be > 0")
    lo = math.log(epsilon)
    hi = -lo
    run = TangentIntegrator(params, y0, W0 if W0 is not None else DeviationSet.canonical(3), config)
    series: IndicatorSeries | None = None
    scanned = 0
    torus_t = None
    torus_until = None
    chaos_t = None
    stable_fps = None
    hard_stop = horizon * (1.0 + ccfg.torus_extension)

    def done(kind, rule, t_fire, t_escape=None, **extra):
        diag = {"rule": rule, "t_fire": t_fire, "tau_end": run.tau, "epsilon": epsilon,
                "horizon": horizon, "final_state": run.y[:4].tolist()}
        if torus_t is not None:
            diag["t_gali3"] = torus_t
        if chaos_t is not None:
            diag["t_chaos"] = chaos_t
        if series is not None and len(series):
            diag.update(_series_summary(series))
        diag.update(extra)
        return AttractorClass(kind, t_escape, diag, series if keep_series else None)

    while True:
        if torus_t is None and run.tau >= horizon - 1e-9:
            break
        if run.tau >= hard_stop - 1e-9:
            break
        step = min(ccfg.chunk, (hard_stop if torus_t is not None else horizon) - run.tau)
        try:
            chunk = IndicatorSeries.from_trajectory(run.advance(step, ccfg.sample_every))
        except IntegrationError as err:
            part = done(Kind.UNDETERMINED, "integration failure", None, error=str(err))
            raise ClassificationError(str(err), part) from err
        series = chunk if series is None else series.extend(chunk)

        t = series.times
        W, G2, G3 = series.log_mean_norm, series.log_gali2_mean, series.log_gali3
        r0 = int(np.searchsorted(t, ccfg.transient - 1e-9))
        if r0 >= len(t):
            scanned = len(t)
            continue
        # norm growth counts from the end of the transient window
        Wr = W - W[r0]
        growth = _running_slopes(t, W, r0)
        for i in range(max(scanned, r0), len(t)):
            if W[i] < lo or Wr[i] < lo:
                return done(Kind.FIXED_POINT, "mean norm < eps", float(t[i]))
            mid = Wr[i] < hi
            flat = t[i] - t[r0] >= ccfg.slope_window and growth[i] <= ccfg.slope_tol
            if mid and flat and G2[i] < lo:
                if torus_t is not None:
                    return done(Kind.LIMIT_CYCLE, "gali2 < eps (extended torus check)", float(t[i]))
                return done(Kind.LIMIT_CYCLE, "gali2 < eps", float(t[i]))
            if mid and flat and torus_t is None and chaos_t is None and G3[i] < lo:
                torus_t = float(t[i])
                torus_until = (1.0 + ccfg.torus_extension) * torus_t
            if not mid and chaos_t is None and (G2[i] < lo or G3[i] < lo):
                chaos_t = float(t[i])
                torus_t = None
        scanned = len(t)
        now = run.tau

        if chaos_t is not None:
            tc = detect_crossover(series, ccfg.slope_window, ccfg.slope_tol, ccfg.plateau_delta,
                                  ccfg.confirm, start=ccfg.transient)
            if tc is not None and tc < horizon:
                return done(Kind.TRANSIENT_CHAOTIC, "chaotic signature then crossover", chaos_t,
                            t_escape=tc)
            continue

        if torus_t is not None and now >= torus_until:
            # keep going while GALI_2 is on course to cross eps before the horizon
            sel = t >= torus_t
            g_slope = _slope(t[sel], G2[sel])
            projected = now + (G2[-1] - lo) / (-g_slope) if g_slope < -ccfg.slope_tol else math.inf
            if projected > horizon or now >= hard_stop - 1e-9:
                return done(Kind.LIMIT_TORUS_2D, "gali3 < eps, gali2 confirmed", torus_t,
                            gali2_slope=g_slope)

        if (ccfg.fixed_point_check and chaos_t is None and torus_t is None
                and now >= ccfg.transient + 2 * ccfg.chunk):
            if stable_fps is None:
                stable_fps = _stable_fixed_points(params) if hasattr(params, "kappa") else []
            x = run.y[:4]
            for xf, rate in stable_fps:
                if np.linalg.norm(x - xf) > ccfg.fixed_point_distance * (1 + np.linalg.norm(xf)):
                    continue
                sel = t >= now - max(2 * ccfg.chunk, ccfg.slope_window)
                w_slope = _slope(t[sel], W[sel])
                if w_slope < 0 and abs(w_slope - rate) <= ccfg.fixed_point_rate_rtol * abs(rate):
                    return done(Kind.FIXED_POINT, "converging to stable fixed point at linear rate",
                                float(now), mean_norm_slope=w_slope, eigen_rate=rate)

    if chaos_t is not None:
        return done(Kind.CHAOTIC, "mean norm > 1/eps with gali < eps to horizon", chaos_t)
    if torus_t is not None:
        return done(Kind.LIMIT_TORUS_2D, "gali3 < eps, gali2 confirmed", torus_t)
    return done(Kind.UNDETERMINED, "no rule fired", None)


# ---------------------------------------------------------------------------
# escape statistics

@dataclass
class EscapeReport:
    n0: int
    escape_times: np.ndarray
    censored: np.ndarray
    tau_esc: float | None
    fit_quality: float | None
    horizon: float
    kinds: list = field(default_factory=list)

    @property
    def n_escaped(self) -> int:
        return int(np.count_nonzero(~self.censored))


def survivor_curve(escape_times, censored):
    """Event times and the number ``N(t)`` still trapped just after each of them."""
    et = np.asarray(escape_times, dtype=float)
    cz = np.asarray(censored, dtype=bool)
    ev = np.sort(et[~cz])
    n0 = et.size
    return ev, n0 - np.arange(1, ev.size + 1)


def fit_escape_time(escape_times, censored, min_survivors: int = 5,
                    min_fraction: float = 0.05) -> tuple[float | None, float | None]:
    """Least-squares fit of ``log N(t) = log N0 - t / tau_esc``.

    Only points with ``N(t) >= max(min_survivors, min_fraction * N0)`` enter
    the fit.  Returns ``(tau_esc, r_squared)``, or ``(None, None)`` with fewer
    than five escapes.
    """
    ev, n = survivor_curve(escape_times, censored)
    if ev.size < 5:
        return None, None
    n0 = len(escape_times)
    keep = n >= max(min_survivors, min_fraction * n0)
    if np.count_nonzero(keep) < 3:
        keep = n >= 1
    t, y = ev[keep], np.log(n[keep])
    if np.ptp(t) == 0:
        # every escape at one instant (e.g. all seeds regular): no decay law
        return None, None
    slope, icpt = np.polyfit(t, y, 1)
    if not slope < 0:
        return None, None
    resid = y - (slope * t + icpt)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss if ss > 0 else 1.0
    return float(-1.0 / slope), r2


def sample_seeds(params, y0, n: int, t_start: float, t_stop: float,
                 config: IntegratorConfig = IntegratorConfig()) -> np.ndarray:
    """``n`` states taken at equal spacing in ``[t_start, t_stop]`` along one trajectory."""
    if not 0 <= t_start < t_stop:
        raise ValueError("need 0 <= t_start < t_stop")
    dt = (t_stop - t_start) / max(n - 1, 1)
    x = np.asarray(y0, dtype=float)
    if t_start > 0:
        x = integrate(params, x, (0.0, t_start), config, sample_dt=t_start).states[-1]
    if n == 1:
        return x[None, :].copy()
    tr = integrate(params, x, (t_start, t_stop), config, sample_dt=dt)
    return tr.states[:n].copy()


def escape_time(params, seeds, horizon: float = 1e5, epsilon: float = 1e-6,
                config: IntegratorConfig = IntegratorConfig(),
                ccfg: ClassifierConfig = ClassifierConfig(), workers: int = 1) -> EscapeReport:
    """Crossover times for seeds on a leaky chaotic set and the fitted mean escape time.

    Seeds whose run ends Chaotic (or Undetermined) are censored at the horizon.
    Seeds that settle without ever showing the chaotic signature escape at 0.
    """
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    if seeds.shape[0] < 10:
        raise ValueError("need at least 10 seeds")
    jobs = [(params, s, epsilon, horizon, config, ccfg) for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_classify_job, jobs))
    else:
        results = [_classify_job(j) for j in jobs]
    times = np.empty(len(results))
    cens = np.zeros(len(results), dtype=bool)
    kinds = []
    for i, res in enumerate(results):
        kinds.append(res.kind)
        if res.kind is Kind.TRANSIENT_CHAOTIC:
            times[i] = res.t_escape
        elif res.kind.regular:
            times[i] = 0.0
        else:
            times[i] = horizon
            cens[i] = True
    tau, r2 = fit_escape_time(times, cens)
    return EscapeReport(len(results), times, cens, tau, r2, horizon, kinds)


def _classify_job(job):
    params, y0, eps, horizon, config, ccfg = job
    try:
        return classify(params, y0, eps, horizon, config, ccfg)
    except ClassificationError as err:
        return err.partial


# ---------------------------------------------------------------------------
# fingerprints

@dataclass(frozen=True)
class AttractorId:
    """Kind plus rounded invariants ``(mean Q, amplitude, fundamental, multiplicity)``."""

    kind: Kind
    fingerprint: tuple
    raw: tuple = field(default=(), compare=False, hash=False)

    def matches(self, other: "AttractorId", rtol: float = 1e-2, atol: float = 1e-2) -> bool:
        """Tolerant comparison of the unrounded invariants."""
        if self.kind != other.kind or len(self.raw) != len(other.raw):
            return False
        if self.fingerprint[3] != other.fingerprint[3]:
            return False
        return all(abs(a - b) <= atol + rtol * max(abs(a), abs(b))
                   for a, b in zip(self.raw[:3], other.raw[:3]))

    def label(self) -> str:
        q, a, f, m = self.fingerprint
        return f"{self.kind.value}(Q={q:g},A={a:g},w={f:g},m={m})"


def quantize(x: float, rel: float = 1e-3) -> float:
    """Round to the grid of spacing ``rel`` relative to the leading decade of ``x``."""
    if x == 0 or not math.isfinite(x):
        return 0.0 if x == 0 else x
    step = rel * 10.0 ** math.floor(math.log10(abs(x)))
    return float(np.round(round(x / step) * step, 12))


def _peak_value(q, i):
    if 0 < i < q.size - 1:
        a, b, c = q[i - 1], q[i], q[i + 1]
        den = a - 2 * b + c
        if den != 0:
            d = 0.5 * (a - c) / den
            return b - 0.25 * (a - c) * d
    return q[i]


def fingerprint(params, source, kind: Kind = Kind.LIMIT_CYCLE, length: int = 2 ** 14,
                dt: float = 0.1, rel: float = 1e-3, significance: float = 1e-3,
                max_multiplicity: int = 16,
                config: IntegratorConfig = IntegratorConfig()) -> AttractorId:
    """Hashable identity of a regular attractor.

    ``source`` is a state on the attractor (integrated for ``length`` samples),
    a Q series sampled every ``dt`` or a trajectory.  The period multiplicity
    is ``round(fundamental / lowest peak)`` among spectral peaks above
    ``significance`` times the strongest; slower peaks than
    ``fundamental / max_multiplicity`` (residual drift) are ignored.
    """
    if hasattr(source, "Q"):
        q = np.asarray(source.Q)
    else:
        arr = np.asarray(source, dtype=float)
        if arr.shape == (4,):
            q = integrate(params, arr, (0.0, length * dt), config, sample_dt=dt).Q[1:]
        else:
            q = arr
    kind = Kind(kind)
    w = np.hanning(q.size)
    mean = float(np.sum(q * w) / np.sum(w))
    i_hi, i_lo = int(np.argmax(q)), int(np.argmin(q))
    amp = 0.5 * float(_peak_value(q, i_hi) - _peak_value(q, i_lo))
    if kind is Kind.FIXED_POINT or amp < 1e-6 * (1.0 + abs(mean)):
        raw = (mean, 0.0, 0.0, 0)
        return AttractorId(kind, (quantize(mean, rel), 0.0, 0.0, 0), raw)
    sl = mechanical_spectrum(q, dt)
    f0 = sl.fundamental
    strong = sl.peak_freqs[(sl.peak_mags >= significance * sl.peak_mags[0])
                           & (sl.peak_freqs >= f0 / (max_multiplicity + 0.5))]
    low = float(strong.min()) if strong.size else f0
    mult = max(1, int(round(f0 / low)))
    raw = (mean, amp, f0, mult)
    return AttractorId(kind, (quantize(mean, rel), quantize(amp, rel), quantize(f0, rel), mult), raw)
