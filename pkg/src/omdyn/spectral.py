"""Mechanical position spectra, adiabatic ramps and sideband-comb analysis.

Frequencies are angular, in units of the mechanical frequency, so a signal
``sin(0.9 tau)`` peaks at 0.9.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.signal import find_peaks, get_window

from .integrator import IntegrationError, IntegratorConfig, integrate
from .model import SQRT2, SystemParams

DEFAULT_DT = 0.1
DEFAULT_SEGMENT = 2 ** 16
MIN_SEGMENT = 2 ** 12
DENSE_THRESHOLD = 25


@dataclass
class SpectrumSlice:
    freqs: np.ndarray
    magnitude: np.ndarray
    peak_freqs: np.ndarray
    peak_mags: np.ndarray
    window: str
    dt: float
    n_samples: int
    mean: float = 0.0
    control: float | None = None

    @property
    def bin_width(self) -> float:
        return 2.0 * math.pi / (self.n_samples * self.dt)

    @property
    def peaks(self) -> list[tuple[float, float]]:
        return list(zip(self.peak_freqs.tolist(), self.peak_mags.tolist()))

    @property
    def fundamental(self) -> float:
        return float(self.peak_freqs[0]) if self.peak_freqs.size else 0.0


def _refine(mag, k):
    """Quadratic interpolation of the log magnitude around bin ``k``."""
    if k <= 0 or k >= mag.size - 1:
        return float(k)
    a, b, c = np.log(mag[k - 1:k + 2] + 1e-300)
    den = a - 2 * b + c
    if den >= 0:
        return float(k)
    return k + 0.5 * (a - c) / den


def mechanical_spectrum(signal, dt: float = DEFAULT_DT, start: int = 0, length: int | None = None,
                        window: str = "hann", floor: float = 1e-3,
                        control: float | None = None) -> SpectrumSlice:
    """DFT magnitude of a position series over one windowed segment.

    ``signal`` is either an array of Q samples spaced ``dt`` or a
    :class:`~omdyn.integrator.Trajectory` (its Q column is used).  The
    segment mean is removed before windowing.  Peaks are local maxima above
    ``floor`` times the largest one, sorted by magnitude, with frequencies
    refined by log-parabolic interpolation.
    """
    q = signal.Q if hasattr(signal, "Q") else np.asarray(signal, dtype=float)
    if length is None:
        length = q.size - start
    if length < MIN_SEGMENT or start + length > q.size:
        raise ValueError(f"segment too short: need >= {MIN_SEGMENT} samples, have {min(length, q.size - start)}")
    seg = q[start:start + length]
    mean = float(seg.mean())
    w = get_window(window, length, fftbins=False) if window != "boxcar" else np.ones(length)
    mag = np.abs(np.fft.rfft((seg - mean) * w))
    freqs = 2.0 * math.pi * np.fft.rfftfreq(length, dt)
    inner = mag.copy()
    inner[0] = 0.0
    top = inner.max()
    if top > 0:
        idx, _ = find_peaks(inner, height=floor * top)
    else:
        idx = np.array([], dtype=int)
    order = np.argsort(-inner[idx], kind="stable")
    idx = idx[order]
    df = freqs[1] - freqs[0] if freqs.size > 1 else 0.0
    pf = np.array([_refine(mag, k) * df for k in idx])
    return SpectrumSlice(freqs, mag, pf, mag[idx], window, dt, length, mean, control)


def parseval_ratio(segment, window: str = "hann") -> float:
    """Spectral power over time-domain power of the windowed, demeaned segment (ideally 1)."""
    x = np.asarray(segment, dtype=float)
    x = x - x.mean()
    w = get_window(window, x.size, fftbins=False) if window != "boxcar" else np.ones(x.size)
    xw = x * w
    X = np.fft.rfft(xw)
    n = x.size
    p = np.abs(X) ** 2
    spec = p[0] + 2 * p[1:].sum()
    if n % 2 == 0:
        spec -= p[-1]
    spec /= n
    time = np.sum(xw ** 2)
    return float(spec / time)


# ---------------------------------------------------------------------------
# comb analysis

@dataclass
class CombResult:
    """``n_independent`` is 1, 2, 3 (three or more, not dense) or ``"dense"``."""

    n_independent: int | str
    commensurate: bool
    spacing: float | None
    base_frequencies: tuple = ()

    @property
    def has_sidebands(self) -> bool:
        return self.n_independent != 1


def _explained_1(freqs, base, tol):
    m = np.round(freqs / base)
    return bool(np.all(m >= 1) and np.all(np.abs(freqs - m * base) <= tol))


def _explained_2(freqs, b1, s, tol):
    # sidebands sit around the nearest harmonic of b1 (n1 = 0 for slow peaks)
    r = freqs - np.round(freqs / b1) * b1
    return bool(np.all(np.abs(r - np.round(r / s) * s) <= tol))


def comb_analysis(sl: SpectrumSlice, tol: float | None = None,
                  dense_threshold: int = DENSE_THRESHOLD, max_denominator: int = 12) -> CombResult:
    """Smallest set of base frequencies whose integer combinations give all peaks.

    One base means a cycle with harmonics; two a torus-like sideband comb.
    When no lattice of at most two bases explains the peaks and more than
    ``dense_threshold`` peaks sit within one fundamental interval around the
    dominant peak, the spectrum is reported as ``"dense"``.
    """
    if sl.peak_freqs.size == 0:
        raise ValueError("no peaks detected")
    tol = sl.bin_width if tol is None else tol
    # peaks within a few bins of DC are amplitude drift, not a resolvable frequency
    slow = sl.peak_freqs < 3 * tol
    if np.all(slow):
        raise ValueError("no peaks away from DC")
    pf = sl.peak_freqs[~slow]
    f = np.sort(pf)
    f0 = float(pf[0])
    if f.size == 1:
        return CombResult(1, True, f0, (f0,))

    # one base: the dominant peak or one of its subharmonics
    for m in range(1, 9):
        b = f0 / m
        if b < 3 * tol:
            break
        if _explained_1(f, b, tol):
            return CombResult(1, True, b, (b,))

    # two bases: dominant peak plus the offset of a satellite (strongest first)
    cands = []
    for x in pf[1:]:
        d = abs(x - f0)
        for m in (1, 2, 3, 4):
            if d / m >= 3 * tol and all(abs(d / m - c) > tol for c in cands):
                cands.append(d / m)
    for s in cands:
        for b1 in (f0, f0 / 2):
            if _explained_2(f, b1, s, tol):
                if s > 0.5 * b1:
                    s = abs(b1 - s) if abs(b1 - s) >= 3 * tol else s
                frac = Fraction(s / b1).limit_denominator(max_denominator)
                commensurate = bool(frac != 0 and abs(float(frac) * b1 - s) <= tol)
                return CombResult(2, commensurate, float(s), (float(b1), float(s)))

    near = np.count_nonzero(np.abs(f - f0) < 0.5 * f0)
    if near > dense_threshold:
        return CombResult("dense", False, None, ())
    return CombResult(3, False, None, ())


# ---------------------------------------------------------------------------
# ramps

@dataclass
class RampSpectrogram:
    controls: np.ndarray
    slices: list
    rate: float
    control: str
    direction: int
    combs: list = field(default_factory=list)

    def sideband_flags(self) -> np.ndarray:
        if not self.combs:
            self.combs = [comb_analysis(s) for s in self.slices]
        return np.array([c.has_sidebands for c in self.combs])

    def transitions(self) -> list[tuple[float, bool, bool]]:
        """Control values (midpoints between segments) where sidebands switch on or off."""
        flags = self.sideband_flags()
        out = []
        for i in range(1, flags.size):
            if flags[i] != flags[i - 1]:
                out.append((float(0.5 * (self.controls[i] + self.controls[i - 1])),
                            bool(flags[i - 1]), bool(flags[i])))
        return out

    def sideband_window(self) -> tuple[float | None, float | None]:
        """(onset, disappearance) control values in increasing-control order."""
        on = [c for c, a, b in self.transitions() if b and not a]
        off = [c for c, a, b in self.transitions() if a and not b]
        if self.direction > 0:
            return (on[0] if on else None), (off[-1] if off else None)
        # a decreasing ramp meets the upper edge first
        return (off[-1] if off else None), (on[0] if on else None)


def adiabatic_ramp(params: SystemParams, control: str, start: float, end: float,
                   rate: float = 1e-6, config: IntegratorConfig = IntegratorConfig(),
                   y0=None, relax: float = 2e4, segment: int = DEFAULT_SEGMENT,
                   hop: int | None = None, dt: float = DEFAULT_DT,
                   floor: float = 1e-3) -> RampSpectrogram:
    """Sweep ``delta`` or ``power`` linearly in time and record segment spectra.

    The system first relaxes for ``relax`` time units at the start value, then
    the control moves at ``rate`` per unit time.  Each slice is tagged with the
    control value at its segment centre.
    """
    if control not in ("delta", "power"):
        raise ValueError("control must be 'delta' or 'power'")
    if not 0 < rate <= 1e-5:
        raise ValueError("rate must be in (0, 1e-5] to stay adiabatic")
    if start == end:
        raise ValueError("start and end must differ")
    hop = segment if hop is None else int(hop)
    direction = 1 if end > start else -1
    base = params.replace(**{control: start})
    if y0 is None:
        y0 = np.zeros(4)
    x = np.asarray(y0, dtype=float)
    if relax > 0:
        x = integrate(base, x, (0.0, relax), config, sample_dt=min(relax, 10.0)).states[-1]

    signed = direction * rate
    total = abs(end - start) / rate
    parr = base.as_array(**({"ddelta": signed} if control == "delta" else {"dpower": signed}))
    n_total = int(total / dt)
    buf = np.empty(0)
    t0 = 0.0
    controls, slices = [], []
    pos = 0
    while pos + segment <= n_total:
        need = segment if not buf.size else hop
        try:
            tr = integrate(base, x, (t0, t0 + need * dt), config, sample_dt=dt, param_array=parr)
        except IntegrationError as err:
            raise IntegrationError(f"ramp diverged ({control}={start + signed * err.tau:.6g})",
                                   err.tau, err.kind) from err
        x = tr.states[-1]
        t0 += need * dt
        buf = np.concatenate([buf, SQRT2 * tr.states[1:, 2]])[-segment:]
        centre = t0 - 0.5 * segment * dt
        value = start + signed * centre
        slices.append(mechanical_spectrum(buf, dt, floor=floor, control=value))
        controls.append(value)
        pos += need
    return RampSpectrogram(np.array(controls), slices, rate, control, direction)
