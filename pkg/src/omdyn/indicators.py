"""Chaos indicators: Lyapunov spectrum, SALI and GALI_k.

All running quantities are kept as natural logarithms, so neither decaying
alignment indices nor growing deviation norms ever under- or overflow.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .integrator import DeviationSet, IntegratorConfig, TangentIntegrator, Trajectory, concat

LN2 = math.log(2.0)
LN3 = math.log(3.0)


def _unit_columns(vectors) -> np.ndarray:
    m = np.atleast_2d(np.asarray(vectors, dtype=float))
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero deviation vector")
    return (m / norms[:, None]).T


def log_gali_k(vectors) -> float:
    """Natural log of GALI_k, the sum of log singular values of the unit vectors."""
    m = _unit_columns(vectors)
    k = m.shape[1]
    if not 2 <= k <= m.shape[0]:
        raise ValueError("need 2 <= k <= dimension vectors")
    s = np.linalg.svd(m, compute_uv=False)
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(s)))


def gali_k(vectors) -> float:
    """Volume of the parallelepiped spanned by the normalised vectors, in [0, 1]."""
    return float(min(1.0, math.exp(log_gali_k(vectors))))


def sali(w1, w2) -> float:
    """Smaller alignment index ``min(|w1 + w2|, |w1 - w2|)`` of two unit vectors."""
    a = np.asarray(w1, dtype=float)
    b = np.asarray(w2, dtype=float)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return float(min(np.linalg.norm(a + b), np.linalg.norm(a - b)))


@dataclass
class IndicatorSeries:
    """Indicator time series (natural logs) sampled along one trajectory."""

    times: np.ndarray
    log_mean_norm: np.ndarray
    log_gali2_mean: np.ndarray
    log_gali3: np.ndarray
    log_gali4: np.ndarray | None = None
    mle: np.ndarray | None = None
    states: np.ndarray | None = None
    gs_log: np.ndarray | None = None

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "IndicatorSeries":
        k = traj.log_norms.shape[1]
        if k < 3:
            raise ValueError("indicator series need at least three deviation vectors")
        log_w = np.logaddexp.reduce(traj.log_norms[:, :3], axis=1) - LN3
        g2 = np.logaddexp(traj.log_gali2_first[:, 1], traj.log_gali2_first[:, 2]) - LN2
        g4 = traj.log_gali_volume[:, 3].copy() if k >= 4 else None
        with np.errstate(divide="ignore", invalid="ignore"):
            mle = traj.log_norms[:, 0] / traj.times
        return cls(traj.times.copy(), log_w, g2, traj.log_gali_volume[:, 2].copy(), g4, mle,
                   traj.states.copy(), traj.gs_log.copy())

    def __len__(self):
        return len(self.times)

    def extend(self, other: "IndicatorSeries") -> "IndicatorSeries":
        def cat(a, b):
            return None if a is None or b is None else np.concatenate([a, b])

        return IndicatorSeries(*(cat(getattr(self, f), getattr(other, f))
                                 for f in ("times", "log_mean_norm", "log_gali2_mean", "log_gali3",
                                           "log_gali4", "mle", "states", "gs_log")))

    def log10(self) -> dict:
        out = {"times": self.times,
               "log10_mean_norm": self.log_mean_norm / math.log(10),
               "log10_gali2_mean": self.log_gali2_mean / math.log(10),
               "log10_gali3": self.log_gali3 / math.log(10)}
        if self.log_gali4 is not None:
            out["log10_gali4"] = self.log_gali4 / math.log(10)
        return out


def indicator_series(params, y0, horizon: float, config: IntegratorConfig = IntegratorConfig(),
                     n_vectors: int = 3, sample_every: int = 10,
                     W0: DeviationSet | None = None) -> IndicatorSeries:
    """Evolve orthonormal deviation vectors and report mean norm, mean GALI_2, GALI_3 (and GALI_4)."""
    if not horizon > 0:
        raise ValueError("horizon must be > 0")
    if n_vectors not in (3, 4):
        raise ValueError("n_vectors must be 3 or 4")
    W0 = W0 if W0 is not None else DeviationSet.canonical(n_vectors)
    run = TangentIntegrator(params, y0, W0, config)
    return IndicatorSeries.from_trajectory(run.advance(horizon, sample_every))


@dataclass
class LyapunovSpectrum:
    lambdas: np.ndarray
    times: np.ndarray
    history: np.ndarray
    mle_series: np.ndarray

    @property
    def total(self) -> float:
        return float(np.sum(self.lambdas))


def spectrum_from_ledger(traj: Trajectory, discard: float = 0.0) -> LyapunovSpectrum:
    """Lyapunov exponents from the Gram-Schmidt ledger of a tangent run.

    Growth accumulated before ``discard`` is subtracted, so exponents describe
    the later part of the run only.
    """
    t = traj.times
    keep = t > discard + 1e-9
    if not np.any(keep):
        raise ValueError("discard leaves no samples")
    if discard > 0:
        i0 = np.searchsorted(t, discard - 1e-9)
        base_t, base = t[i0], traj.gs_log[i0]
        keep = t > base_t
    else:
        base_t, base = 0.0, np.zeros(traj.gs_log.shape[1])
    tt = t[keep]
    hist = (traj.gs_log[keep] - base) / (tt - base_t)[:, None]
    lam = np.sort(hist[-1])[::-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mle = traj.log_norms[:, 0] / t
    return LyapunovSpectrum(lam, tt, hist, mle)


def lyapunov_spectrum(params, y0, horizon: float, config: IntegratorConfig = IntegratorConfig(),
                      discard: float = 0.0, sample_every: int = 10, chunk: float = 1e4,
                      W0: DeviationSet | None = None) -> LyapunovSpectrum:
    """All four exponents by the re-orthonormalisation method.

    The first vector's norm ledger is reported as the finite-time mLE series.
    """
    W0 = W0 if W0 is not None else DeviationSet.canonical(4)
    run = TangentIntegrator(params, y0, W0, config)
    parts = []
    left = horizon
    while left > 1e-9:
        step = min(chunk, left)
        parts.append(run.advance(step, sample_every))
        left -= step
    return spectrum_from_ledger(concat(parts), discard)


def decay_rate(times, log_values, threshold: float | None = None, start: float = 0.0) -> float:
    """Exponential decay rate (positive when decaying) of a log series.

    Least squares over the final half of the samples in ``[start, t_cross)``,
    where ``t_cross`` is the first time the series drops below ``log(threshold)``
    (the end of the series if it never does).
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(log_values, dtype=float)
    sel = (t >= start) & np.isfinite(y)
    t, y = t[sel], y[sel]
    if threshold is not None:
        below = np.nonzero(y < math.log(threshold))[0]
        if below.size:
            t, y = t[:below[0]], y[:below[0]]
    if t.size < 4:
        raise ValueError("too few samples for a decay fit")
    half = t.size // 2
    slope = np.polyfit(t[half:], y[half:], 1)[0]
    return float(-slope)
