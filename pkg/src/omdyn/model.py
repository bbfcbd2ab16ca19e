"""Classical two-mode optomechanical system in dimensionless form.

Time is measured in units of the inverse mechanical frequency. The optical
amplitude ``alpha`` and mechanical amplitude ``beta`` are rescaled so that the
dynamics depends only on the detuning, the two decay rates and the drive
``power``.  Real coordinates are ``x = (Re alpha, Im alpha, Re beta, Im beta)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

SQRT2 = math.sqrt(2.0)

# layout of the parameter vector handed to the jitted kernels
P_DELTA, P_KAPPA, P_GAMMA, P_POWER, P_DDELTA, P_DPOWER = range(6)
N_PARAMS = 6


@dataclass(frozen=True)
class SystemParams:
    """Dimensionless parameters, all in units of the mechanical frequency.

    ``g0`` is only needed to convert a thermal phonon number into the
    spread of the rescaled mechanical amplitude.
    """

    delta: float
    kappa: float
    gamma: float
    power: float
    g0: float | None = None

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not self.power >= 0:
            raise ValueError(f"power must be >= 0, got {self.power}")
        if self.g0 is not None and not self.g0 > 0:
            raise ValueError(f"g0 must be > 0, got {self.g0}")

    def replace(self, **changes) -> "SystemParams":
        kw = dict(delta=self.delta, kappa=self.kappa, gamma=self.gamma,
                  power=self.power, g0=self.g0)
        kw.update(changes)
        return SystemParams(**kw)

    def as_array(self, ddelta: float = 0.0, dpower: float = 0.0) -> np.ndarray:
        """Parameter vector for the kernels; ``ddelta``/``dpower`` are ramp rates per unit time."""
        return np.array([self.delta, self.kappa, self.gamma, self.power, ddelta, dpower])

    def to_dict(self) -> dict:
        d = {"delta": self.delta, "kappa": self.kappa, "gamma": self.gamma, "power": self.power}
        if self.g0 is not None:
            d["g0"] = self.g0
        return d


@dataclass(frozen=True)
class State:
    """Phase point as two complex amplitudes."""

    alpha: complex
    beta: complex

    @classmethod
    def from_real(cls, x) -> "State":
        x = np.asarray(x, dtype=float)
        return cls(complex(x[0], x[1]), complex(x[2], x[3]))

    def to_real(self) -> np.ndarray:
        return np.array([self.alpha.real, self.alpha.imag, self.beta.real, self.beta.imag])

    @property
    def Q(self) -> float:
        """Rescaled mechanical position ``(beta + beta*)/sqrt(2)``."""
        return SQRT2 * self.beta.real


def as_real_state(y0) -> np.ndarray:
    if isinstance(y0, State):
        x = y0.to_real()
    else:
        x = np.array(y0, dtype=float).reshape(-1)
    if x.shape != (4,) or not np.all(np.isfinite(x)):
        raise ValueError(f"state must be 4 finite reals, got {y0!r}")
    return x


# ---------------------------------------------------------------------------
# jitted kernels.  ``y`` holds the flow (4 reals) optionally followed by k
# tangent vectors stored column after column; ``out`` receives dy/dt.

@njit(cache=True)
def om_rhs_kernel(t, y, p, out):
    delta = p[0] + p[4] * t
    half_k = 0.5 * p[1]
    half_g = 0.5 * p[2]
    power = p[3] + p[5] * t
    x1 = y[0]
    x2 = y[1]
    x3 = y[2]
    x4 = y[3]
    d = delta + 2.0 * x3
    out[0] = -half_k * x1 - d * x2 + 0.5
    out[1] = d * x1 - half_k * x2
    out[2] = -half_g * x3 + x4
    out[3] = -x3 - half_g * x4 + 0.5 * power * (x1 * x1 + x2 * x2)
    k = (y.size - 4) // 4
    for j in range(k):
        o = 4 + 4 * j
        w1 = y[o]
        w2 = y[o + 1]
        w3 = y[o + 2]
        w4 = y[o + 3]
        out[o] = -half_k * w1 - d * w2 - 2.0 * x2 * w3
        out[o + 1] = d * w1 - half_k * w2 + 2.0 * x1 * w3
        out[o + 2] = -half_g * w3 + w4
        out[o + 3] = power * (x1 * w1 + x2 * w2) - w3 - half_g * w4


@njit(cache=True)
def om_jacobian_kernel(t, y, p, jac):
    delta = p[0] + p[4] * t
    half_k = 0.5 * p[1]
    half_g = 0.5 * p[2]
    power = p[3] + p[5] * t
    x1 = y[0]
    x2 = y[1]
    d = delta + 2.0 * y[2]
    jac[:, :] = 0.0
    jac[0, 0] = -half_k
    jac[0, 1] = -d
    jac[0, 2] = -2.0 * x2
    jac[1, 0] = d
    jac[1, 1] = -half_k
    jac[1, 2] = 2.0 * x1
    jac[2, 2] = -half_g
    jac[2, 3] = 1.0
    jac[3, 0] = power * x1
    jac[3, 1] = power * x2
    jac[3, 2] = -1.0
    jac[3, 3] = -half_g


def eom_rhs(state, params: SystemParams) -> np.ndarray:
    """Time derivative of the four real coordinates."""
    x = as_real_state(state)
    out = np.empty(4)
    om_rhs_kernel(0.0, x, params.as_array(), out)
    return out


def eom_jacobian(state, params: SystemParams) -> np.ndarray:
    """4x4 Jacobian of :func:`eom_rhs` in real coordinates."""
    x = as_real_state(state)
    jac = np.empty((4, 4))
    om_jacobian_kernel(0.0, x, params.as_array(), jac)
    return jac


# ---------------------------------------------------------------------------
# fixed points

class Stability(str, enum.Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"
    MARGINAL = "marginal"


MARGINAL_TOL = 1e-10


@dataclass
class FixedPointRecord:
    Q: float
    alpha: complex
    beta: complex
    eigenvalues: np.ndarray
    stability: Stability
    degenerate: bool = False
    residual: float = field(default=0.0)

    @property
    def state(self) -> State:
        return State(self.alpha, self.beta)


def steady_amplitudes(Q: float, params: SystemParams) -> tuple[complex, complex]:
    """Steady ``alpha`` and ``beta`` belonging to mechanical position ``Q``.

    ``alpha`` solves the optical equation with the drive term directly:
    ``alpha = 1 / (kappa - 2i(delta + sqrt2 Q))``.
    """
    alpha = 1.0 / (params.kappa - 2j * (params.delta + SQRT2 * Q))
    n = abs(alpha) ** 2
    beta = 0.5 * params.power * n * (1.0 + 0.5j * params.gamma) / (1.0 + 0.25 * params.gamma ** 2)
    return alpha, beta


def fixed_point_cubic(params: SystemParams) -> np.ndarray:
    """Coefficients (highest power first) of the cubic whose real roots are the steady ``Q``.

    ``Q (kappa^2 + 4 (delta + sqrt2 Q)^2) = P / (sqrt2 (1 + gamma^2/4))``
    """
    d, k = params.delta, params.kappa
    rhs = params.power / (SQRT2 * (1.0 + 0.25 * params.gamma ** 2))
    return np.array([8.0, 8.0 * SQRT2 * d, k * k + 4.0 * d * d, -rhs])


def _polish(coeffs, q):
    for _ in range(8):
        f = np.polyval(coeffs, q)
        df = np.polyval(np.polyder(coeffs), q)
        if df == 0.0:
            break
        dq = f / df
        q -= dq
        if abs(dq) <= 1e-16 * max(1.0, abs(q)):
            break
    return q


def classify_eigenvalues(eigs, tol: float = MARGINAL_TOL) -> Stability:
    re = np.real(eigs)
    if np.all(re < -tol):
        return Stability.STABLE
    if np.any(re > tol):
        return Stability.UNSTABLE
    return Stability.MARGINAL


def find_fixed_points(params: SystemParams, imag_tol: float = 1e-9,
                      degeneracy_tol: float = 1e-7) -> list[FixedPointRecord]:
    """All fixed points, sorted by ``Q`` ascending.

    The cubic is solved through companion-matrix eigenvalues and each real
    root is Newton-polished.  Roots closer than ``degeneracy_tol`` are merged
    and flagged ``degenerate`` (saddle-node point).
    """
    coeffs = fixed_point_cubic(params)
    roots = np.roots(coeffs)
    real = sorted(_polish(coeffs, r.real) for r in roots
                  if abs(r.imag) < imag_tol * max(1.0, abs(r)))
    # a double root may split into a complex pair with imag ~ sqrt(eps)
    if not real:
        real = [_polish(coeffs, roots[np.argmin(np.abs(roots.imag))].real)]

    merged: list[tuple[float, bool]] = []
    for q in real:
        if merged and abs(q - merged[-1][0]) < degeneracy_tol * max(1.0, abs(q)):
            merged[-1] = (merged[-1][0], True)
        else:
            merged.append((q, False))

    records = []
    for q, degenerate in merged:
        alpha, beta = steady_amplitudes(q, params)
        st = State(alpha, beta)
        eigs = np.linalg.eigvals(eom_jacobian(st, params))
        res = float(np.linalg.norm(eom_rhs(st, params)))
        records.append(FixedPointRecord(Q=float(q), alpha=alpha, beta=beta, eigenvalues=eigs,
                                        stability=classify_eigenvalues(eigs),
                                        degenerate=degenerate, residual=res))
    return records


def region_code(records: list[FixedPointRecord]) -> int:
    """``10 * n_fixed_points + n_stable``; e.g. 11 = one stable fixed point."""
    n_stable = sum(r.stability is Stability.STABLE for r in records)
    return 10 * len(records) + n_stable


def region_codes(kappa: float, gamma: float, deltas, powers, imag_tol: float = 1e-9,
                 degeneracy_tol: float = 1e-7) -> np.ndarray:
    """Vectorised :func:`region_code` for many (delta, power) pairs at once.

    Same steps as :func:`find_fixed_points` (companion roots, Newton polish,
    merging of near-equal roots, Jacobian eigenvalues) on whole arrays.
    """
    d = np.asarray(deltas, dtype=float).ravel()
    pw = np.asarray(powers, dtype=float).ravel()
    if d.shape != pw.shape:
        raise ValueError("deltas and powers must have the same size")
    m = d.size
    b2 = SQRT2 * d
    b1 = (kappa * kappa + 4.0 * d * d) / 8.0
    b0 = -pw / (SQRT2 * (1.0 + 0.25 * gamma ** 2)) / 8.0
    comp = np.zeros((m, 3, 3))
    comp[:, 0, 0], comp[:, 0, 1], comp[:, 0, 2] = -b2, -b1, -b0
    comp[:, 1, 0] = comp[:, 2, 1] = 1.0
    roots = np.linalg.eigvals(comp)
    real = np.abs(roots.imag) < imag_tol * np.maximum(1.0, np.abs(roots))
    none = ~real.any(axis=1)
    if none.any():
        pick = np.argmin(np.abs(roots.imag[none]), axis=1)
        real[np.nonzero(none)[0], pick] = True
    q = roots.real.copy()
    for _ in range(8):
        f = ((q + b2[:, None]) * q + b1[:, None]) * q + b0[:, None]
        df = (3.0 * q + 2.0 * b2[:, None]) * q + b1[:, None]
        safe = df != 0.0
        q = np.where(safe, q - np.where(safe, f, 0.0) / np.where(safe, df, 1.0), q)
    q = np.where(real, q, np.inf)
    q.sort(axis=1)
    valid = np.isfinite(q)
    dup = np.zeros_like(valid)
    with np.errstate(invalid="ignore"):
        gap = np.abs(q[:, 1:] - q[:, :-1])
    dup[:, 1:] = valid[:, 1:] & (gap < degeneracy_tol * np.maximum(1.0, np.abs(q[:, 1:])))
    keep = valid & ~dup

    qk = np.where(keep, q, 0.0)
    alpha = 1.0 / (kappa - 2j * (d[:, None] + SQRT2 * qk))
    x1, x2 = alpha.real, alpha.imag
    x3 = qk / SQRT2
    dd = d[:, None] + 2.0 * x3
    jac = np.zeros((m, 3, 4, 4))
    jac[..., 0, 0] = jac[..., 1, 1] = -0.5 * kappa
    jac[..., 0, 1] = -dd
    jac[..., 1, 0] = dd
    jac[..., 0, 2] = -2.0 * x2
    jac[..., 1, 2] = 2.0 * x1
    jac[..., 2, 2] = jac[..., 3, 3] = -0.5 * gamma
    jac[..., 2, 3] = 1.0
    jac[..., 3, 2] = -1.0
    jac[..., 3, 0] = pw[:, None] * x1
    jac[..., 3, 1] = pw[:, None] * x2
    eig = np.linalg.eigvals(jac)
    stable = keep & np.all(eig.real < -MARGINAL_TOL, axis=-1)
    return 10 * keep.sum(axis=1) + stable.sum(axis=1)


def stability_diagram(template: SystemParams, delta_range, power_range,
                      resolution) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed-point region codes on a (delta, power) grid.

    Returns ``(deltas, powers, codes)`` with ``codes[i, j]`` for
    ``powers[i]``, ``deltas[j]``.  See :func:`region_code`.
    """
    if np.isscalar(resolution):
        resolution = (int(resolution), int(resolution))
    nd, npw = resolution
    if nd < 2 or npw < 2:
        raise ValueError("resolution must be >= 2 per axis")
    deltas = np.linspace(delta_range[0], delta_range[1], nd)
    powers = np.linspace(power_range[0], power_range[1], npw)
    dg, pg = np.meshgrid(deltas, powers)
    codes = region_codes(template.kappa, template.gamma, dg, pg).reshape(npw, nd).astype(np.int64)
    return deltas, powers, codes


def code_transitions(powers, codes_column) -> list[tuple[float, int, int]]:
    """Power values where a fixed-delta scan changes region code."""
    out = []
    for i in range(1, len(codes_column)):
        if codes_column[i] != codes_column[i - 1]:
            out.append((0.5 * (powers[i] + powers[i - 1]), int(codes_column[i - 1]), int(codes_column[i])))
    return out


# ---------------------------------------------------------------------------
# conversions

def cooperativity(params: SystemParams) -> float:
    """Maximum cooperativity ``2 P / (kappa^3 gamma)``."""
    return 2.0 * params.power / (params.kappa ** 3 * params.gamma)


def power_from_cooperativity(c_max: float, kappa: float, gamma: float) -> float:
    if not (kappa > 0 and gamma > 0):
        raise ValueError("kappa and gamma must be > 0")
    return kappa ** 3 * gamma * c_max / 2.0


def thermal_sigma(g0: float, n_th: float) -> float:
    """Spread of the rescaled mechanical amplitude for ``n_th`` thermal phonons."""
    if not g0 > 0:
        raise ValueError("g0 must be > 0")
    if not n_th >= 0:
        raise ValueError("n_th must be >= 0")
    return g0 * math.sqrt(n_th)
