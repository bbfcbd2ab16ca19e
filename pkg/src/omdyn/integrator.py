"""Adaptive explicit Runge-Kutta integration of the flow and its tangent dynamics.

The stepper is the Dormand-Prince 8(5,3) pair (DOP853) written as a numba
kernel around scipy's coefficient tables.  Tangent vectors are co-integrated
in the same step loop as the flow so both share the accepted steps.

Deviation vectors are never re-orthogonalised as far as the caller is
concerned.  Internally the set ``W = [w_1 .. w_k]`` is held in factored form
``W = Qf * T * diag(exp(log_norms))`` where ``Qf`` is orthonormal (and is what
actually gets integrated), ``T`` is upper triangular with unit columns and is
stored as log-magnitudes plus signs.  This keeps the mutual alignment of the
vectors exact far below double-precision resolution, and the diagonal of the
Gram-Schmidt factors provides the Lyapunov ledger for free.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.integrate._ivp import dop853_coefficients as _dop

from .model import SystemParams, as_real_state, om_rhs_kernel

PAIR_ID = "DOP853 (Dormand-Prince 8(5,3))"
PAIR_ORDER = 8

_NS = _dop.N_STAGES
_A = np.ascontiguousarray(_dop.A[:_NS, :_NS])
_B = np.ascontiguousarray(_dop.B)
_C = np.ascontiguousarray(_dop.C[:_NS])
_E3 = np.ascontiguousarray(_dop.E3)
_E5 = np.ascontiguousarray(_dop.E5)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_ERR_EXP = -1.0 / 8.0

OK = 0
STEP_UNDERFLOW = 1
DIVERGED = 2

DIVERGENCE_BOUND = 1e12


class IntegrationError(RuntimeError):
    """Integration stopped early; ``tau`` is where it failed, ``partial`` any data so far."""

    def __init__(self, message, tau, kind, partial=None):
        super().__init__(f"{message} at tau={tau:.6g}")
        self.tau = tau
        self.kind = kind
        self.partial = partial


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-9
    abs_tol: float = 1e-13
    max_step: float | None = None
    method_order: int = PAIR_ORDER
    renorm_interval: float = 1.0

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be > 0")
        if not self.renorm_interval > 0:
            raise ValueError("renorm_interval must be > 0")
        if self.max_step is not None and not self.max_step > 0:
            raise ValueError("max_step must be > 0")
        if self.method_order > PAIR_ORDER or self.method_order < 8:
            raise ValueError(f"only an order-{PAIR_ORDER} pair is available")

    @property
    def pair(self) -> str:
        return PAIR_ID

    def to_dict(self) -> dict:
        return {"rel_tol": self.rel_tol, "abs_tol": self.abs_tol, "max_step": self.max_step,
                "method_order": self.method_order, "renorm_interval": self.renorm_interval,
                "pair": PAIR_ID}


# ---------------------------------------------------------------------------
# kernels

@njit(cache=True)
def _advance(fun, p, y, f, st, t_end, rtol, atol, max_step, K, ytmp, ynew, fnew):
    """Step from ``st[0]`` to exactly ``t_end``.

    ``st = [t, h_abs, n_accepted, n_rejected]`` is updated in place.
    Returns a status code.
    """
    n = y.size
    t = st[0]
    h_abs = st[1]
    while t < t_end:
        min_step = 10.0 * (np.nextafter(t, np.inf) - t)
        if h_abs > max_step:
            h_abs = max_step
        if h_abs < min_step:
            h_abs = min_step
        rejected = False
        while True:
            if h_abs < min_step:
                st[0] = t
                st[1] = h_abs
                return STEP_UNDERFLOW
            t_new = t + h_abs
            clipped = False
            if t_new >= t_end:
                t_new = t_end
                clipped = True
            h = t_new - t
            for i in range(n):
                K[0, i] = f[i]
            for s in range(1, _NS):
                for i in range(n):
                    acc = 0.0
                    for j in range(s):
                        acc += _A[s, j] * K[j, i]
                    ytmp[i] = y[i] + h * acc
                fun(t + _C[s] * h, ytmp, p, K[s])
            for i in range(n):
                acc = 0.0
                for j in range(_NS):
                    acc += _B[j] * K[j, i]
                ynew[i] = y[i] + h * acc
            fun(t_new, ynew, p, fnew)
            for i in range(n):
                K[_NS, i] = fnew[i]
            e5 = 0.0
            e3 = 0.0
            for i in range(n):
                sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
                a5 = 0.0
                a3 = 0.0
                for j in range(_NS + 1):
                    a5 += _E5[j] * K[j, i]
                    a3 += _E3[j] * K[j, i]
                a5 /= sc
                a3 /= sc
                e5 += a5 * a5
                e3 += a3 * a3
            if e5 == 0.0 and e3 == 0.0:
                err = 0.0
            else:
                err = h * e5 / math.sqrt((e5 + 0.01 * e3) * n)
            if not math.isfinite(err):
                h_abs *= _MIN_FACTOR
                rejected = True
                continue
            if err < 1.0:
                if err == 0.0:
                    factor = _MAX_FACTOR
                else:
                    factor = min(_MAX_FACTOR, _SAFETY * err ** _ERR_EXP)
                if rejected:
                    factor = min(1.0, factor)
                h_next = h * factor
                # a step shortened only to land on t_end does not shrink the next proposal
                if clipped and not rejected and h_abs > h_next:
                    h_next = h_abs
                h_abs = h_next
                break
            h_abs *= max(_MIN_FACTOR, _SAFETY * err ** _ERR_EXP)
            rejected = True
            st[3] += 1
        t = t_new
        big = 0.0
        for i in range(n):
            y[i] = ynew[i]
            f[i] = fnew[i]
        for i in range(4):
            big = max(big, abs(y[i]))
        st[2] += 1
        if not (big < DIVERGENCE_BOUND):
            st[0] = t
            st[1] = h_abs
            return DIVERGED
    st[0] = t
    st[1] = h_abs
    return OK


@njit(cache=True)
def _flow_samples(fun, p, y, st, dt, nsamp, rtol, atol, max_step, out):
    """Integrate and record ``nsamp`` samples spaced ``dt`` after the current time."""
    n = y.size
    f = np.empty(n)
    K = np.empty((_NS + 1, n))
    ytmp = np.empty(n)
    ynew = np.empty(n)
    fnew = np.empty(n)
    fun(st[0], y, p, f)
    t0 = st[0]
    for s in range(nsamp):
        status = _advance(fun, p, y, f, st, t0 + (s + 1) * dt, rtol, atol, max_step,
                          K, ytmp, ynew, fnew)
        if status != OK:
            return status, s
        for i in range(n):
            out[s, i] = y[i]
    return OK, nsamp


@njit(cache=True)
def _signed_logsumexp(lmags, signs, m):
    """log|sum_i signs_i exp(lmags_i)| and its sign over the first m entries."""
    top = -np.inf
    for i in range(m):
        if signs[i] != 0.0 and lmags[i] > top:
            top = lmags[i]
    if top == -np.inf:
        return -np.inf, 0.0
    s = 0.0
    for i in range(m):
        if signs[i] != 0.0:
            s += signs[i] * math.exp(lmags[i] - top)
    if s == 0.0:
        return -np.inf, 0.0
    return math.log(abs(s)) + top, (1.0 if s > 0 else -1.0)


@njit(cache=True)
def _renormalize(y, k, R, lmag, sgn, lnorm, gslog, tl, ts):
    """Gram-Schmidt the integrated frame and fold the factor into ``T``.

    ``tl``/``ts`` are scratch buffers of length ``k``.
    """
    for j in range(k):
        for i in range(k):
            R[i, j] = 0.0
    for j in range(k):
        oj = 4 + 4 * j
        for _ in range(2):
            for i in range(j):
                oi = 4 + 4 * i
                d = 0.0
                for c in range(4):
                    d += y[oi + c] * y[oj + c]
                R[i, j] += d
                for c in range(4):
                    y[oj + c] -= d * y[oi + c]
        nrm = 0.0
        for c in range(4):
            nrm += y[oj + c] * y[oj + c]
        nrm = math.sqrt(nrm)
        R[j, j] = nrm
        if nrm > 0.0:
            for c in range(4):
                y[oj + c] /= nrm
            gslog[j] += math.log(nrm)
        else:
            gslog[j] = -np.inf
    # T <- R T column by column; top row first, so rows below i still hold old values
    for j in range(k):
        for i in range(j + 1):
            m = 0
            for l in range(i, j + 1):
                r = R[i, l]
                if r != 0.0 and sgn[l, j] != 0.0:
                    tl[m] = math.log(abs(r)) + lmag[l, j]
                    ts[m] = sgn[l, j] * (1.0 if r > 0 else -1.0)
                    m += 1
            v, s = _signed_logsumexp(tl, ts, m)
            lmag[i, j] = v
            sgn[i, j] = s
        # normalise the column
        top = -np.inf
        for i in range(j + 1):
            if sgn[i, j] != 0.0 and lmag[i, j] > top:
                top = lmag[i, j]
        acc = 0.0
        for i in range(j + 1):
            if sgn[i, j] != 0.0:
                acc += math.exp(2.0 * (lmag[i, j] - top))
        c = top + 0.5 * math.log(acc)
        lnorm[j] += c
        for i in range(j + 1):
            lmag[i, j] -= c


@njit(cache=True)
def _record(y, k, lmag, sgn, lnorm, gslog, row, out_x, out_ln, out_gs, out_g2, out_vol, out_vec):
    for c in range(4):
        out_x[row, c] = y[c]
    for j in range(k):
        out_ln[row, j] = lnorm[j]
        out_gs[row, j] = gslog[j]
    vol = 0.0
    for j in range(k):
        vol += lmag[j, j]
        out_vol[row, j] = vol
        # component of unit vector j orthogonal to w_1
        top = -np.inf
        for i in range(1, j + 1):
            if sgn[i, j] != 0.0 and lmag[i, j] > top:
                top = lmag[i, j]
        if top == -np.inf:
            out_g2[row, j] = -np.inf
        else:
            acc = 0.0
            for i in range(1, j + 1):
                if sgn[i, j] != 0.0:
                    acc += math.exp(2.0 * (lmag[i, j] - top))
            out_g2[row, j] = top + 0.5 * math.log(acc)
        for c in range(4):
            v = 0.0
            for i in range(j + 1):
                if sgn[i, j] != 0.0:
                    v += y[4 + 4 * i + c] * sgn[i, j] * math.exp(lmag[i, j])
            out_vec[row, j, c] = v


@njit(cache=True)
def _tangent_chunk(fun, p, y, st, k, lmag, sgn, lnorm, gslog, renorm_dt, n_renorm,
                   sample_every, rtol, atol, max_step,
                   out_t, out_x, out_ln, out_gs, out_g2, out_vol, out_vec):
    """Advance ``n_renorm`` renormalisation intervals, recording every ``sample_every``.

    Returns ``(status, rows_written)``.
    """
    n = y.size
    f = np.empty(n)
    K = np.empty((_NS + 1, n))
    ytmp = np.empty(n)
    ynew = np.empty(n)
    fnew = np.empty(n)
    R = np.empty((k, k))
    tl = np.empty(k)
    ts = np.empty(k)
    fun(st[0], y, p, f)
    t0 = st[0]
    row = 0
    for r in range(1, n_renorm + 1):
        status = _advance(fun, p, y, f, st, t0 + r * renorm_dt, rtol, atol, max_step,
                          K, ytmp, ynew, fnew)
        if status != OK:
            return status, row
        _renormalize(y, k, R, lmag, sgn, lnorm, gslog, tl, ts)
        # the frame changed, so the cached derivative is stale
        fun(st[0], y, p, f)
        if r % sample_every == 0:
            out_t[row] = st[0]
            _record(y, k, lmag, sgn, lnorm, gslog, row, out_x, out_ln, out_gs, out_g2,
                    out_vol, out_vec)
            row += 1
    return OK, row


# ---------------------------------------------------------------------------
# Python surface

@dataclass
class DeviationSet:
    """k deviation vectors: unit directions plus accumulated log growth.

    ``log_norms[j]`` is the log of ``|w_j(t)| / |w_j(0)|``; ``gs_log`` the
    accumulated Gram-Schmidt diagonal (Lyapunov ledger).
    """

    vectors: np.ndarray
    log_norms: np.ndarray
    gs_log: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def canonical(cls, k: int) -> "DeviationSet":
        if not 1 <= k <= 4:
            raise ValueError("k must be in 1..4")
        return cls(np.eye(4)[:k].copy(), np.zeros(k))

    @classmethod
    def random_orthonormal(cls, k: int, seed: int) -> "DeviationSet":
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        return cls(q.T[:k].copy(), np.zeros(k))


@dataclass
class Trajectory:
    """Sampled integration output.

    For tangent runs the per-sample ledgers are filled:
    ``log_norms`` (n, k), ``gs_log`` (n, k), ``log_gali2_first`` (n, k) with
    column j the log GALI_2 of (w_1, w_j), ``log_gali_volume`` (n, k) with
    column m-1 the log GALI_m of (w_1..w_m), ``unit_vectors`` (n, k, 4).
    """

    times: np.ndarray
    states: np.ndarray
    log_norms: np.ndarray | None = None
    gs_log: np.ndarray | None = None
    log_gali2_first: np.ndarray | None = None
    log_gali_volume: np.ndarray | None = None
    unit_vectors: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def Q(self) -> np.ndarray:
        return math.sqrt(2.0) * self.states[:, 2]

    def deviation_set(self, i: int = -1) -> DeviationSet:
        return DeviationSet(self.unit_vectors[i].copy(), self.log_norms[i].copy(),
                            self.gs_log[i].copy())


def _resolve(params, rhs):
    if rhs is None:
        if not isinstance(params, SystemParams):
            raise TypeError("params must be SystemParams when no kernel is given")
        return om_rhs_kernel, params.as_array()
    return rhs, np.asarray(params, dtype=float)


def _max_step(config: IntegratorConfig) -> float:
    return np.inf if config.max_step is None else float(config.max_step)


def integrate(params, y0, tau_span, config: IntegratorConfig = IntegratorConfig(),
              sample_dt: float = 0.1, rhs=None, param_array=None) -> Trajectory:
    """Integrate the flow, sampling every ``sample_dt`` (step ends land on samples).

    ``param_array`` overrides the kernel parameter vector (used for ramps).
    """
    t0, t1 = map(float, tau_span)
    if not t0 < t1:
        raise ValueError("tau_span must be increasing")
    fun, p = _resolve(params, rhs)
    if param_array is not None:
        p = np.asarray(param_array, dtype=float)
    y = as_real_state(y0) if rhs is None else np.array(y0, dtype=float)
    first = y.copy()
    nsamp = int(round((t1 - t0) / sample_dt))
    out = np.empty((nsamp, y.size))
    st = np.array([t0, min(0.01, sample_dt), 0.0, 0.0])
    status, rows = _flow_samples(fun, p, y, st, sample_dt, nsamp, config.rel_tol,
                                 config.abs_tol, _max_step(config), out)
    times = t0 + sample_dt * np.arange(0, rows + 1)
    states = np.vstack([first[None, :], out[:rows]])
    traj = Trajectory(times, states, meta={"pair": PAIR_ID, "n_steps": int(st[2]),
                                            "n_rejected": int(st[3])})
    _raise_on_status(status, st[0], traj)
    return traj


def _raise_on_status(status, tau, partial):
    if status == STEP_UNDERFLOW:
        raise IntegrationError("step size underflow", tau, "underflow", partial)
    if status == DIVERGED:
        raise IntegrationError("state diverged", tau, "divergence", partial)


class TangentIntegrator:
    """Resumable co-integration of the flow and ``k`` deviation vectors.

    Call :meth:`advance` repeatedly; each call returns a :class:`Trajectory`
    chunk with the ledgers sampled every ``sample_every`` renormalisations.
    """

    def __init__(self, params, y0, W0: DeviationSet | None = None,
                 config: IntegratorConfig = IntegratorConfig(), tau0: float = 0.0,
                 rhs=None, param_array=None):
        self.fun, self.p = _resolve(params, rhs)
        if param_array is not None:
            self.p = np.asarray(param_array, dtype=float)
        self.config = config
        W0 = W0 if W0 is not None else DeviationSet.canonical(3)
        k = W0.k
        self.k = k
        x = as_real_state(y0)
        vecs = np.asarray(W0.vectors, dtype=float)
        if vecs.shape != (k, 4):
            raise ValueError("deviation vectors must have shape (k, 4)")
        q, r = np.linalg.qr(vecs.T)
        # positive diagonal convention
        sg = np.sign(np.diag(r))
        sg[sg == 0] = 1.0
        q = q * sg
        r = (r.T * sg).T
        self.y = np.concatenate([x, q.T.reshape(-1)])
        norms = np.linalg.norm(r, axis=0)
        if np.any(norms == 0):
            raise ValueError("deviation vectors must be nonzero")
        t = r / norms
        with np.errstate(divide="ignore"):
            self.lmag = np.log(np.abs(t))
        self.sgn = np.sign(t)
        self.lnorm = np.asarray(W0.log_norms, dtype=float).copy()
        self.gslog = np.zeros(k) if W0.gs_log is None else np.asarray(W0.gs_log, float).copy()
        self.gslog += np.log(np.abs(np.diag(r)))
        self.st = np.array([float(tau0), 0.01, 0.0, 0.0])

    @property
    def tau(self) -> float:
        return float(self.st[0])

    def current(self) -> DeviationSet:
        vec = np.empty((1, self.k, 4))
        x = np.empty((1, 4))
        ln = np.empty((1, self.k))
        gs = np.empty((1, self.k))
        g2 = np.empty((1, self.k))
        vol = np.empty((1, self.k))
        _record(self.y, self.k, self.lmag, self.sgn, self.lnorm, self.gslog, 0, x, ln, gs, g2, vol, vec)
        return DeviationSet(vec[0], ln[0], gs[0])

    def advance(self, duration: float, sample_every: int = 10) -> Trajectory:
        cfg = self.config
        n_renorm = int(round(duration / cfg.renorm_interval))
        if n_renorm < 1:
            raise ValueError("duration shorter than one renormalisation interval")
        sample_every = max(1, int(sample_every))
        nrows = n_renorm // sample_every
        k = self.k
        out_t = np.empty(nrows)
        out_x = np.empty((nrows, 4))
        out_ln = np.empty((nrows, k))
        out_gs = np.empty((nrows, k))
        out_g2 = np.empty((nrows, k))
        out_vol = np.empty((nrows, k))
        out_vec = np.empty((nrows, k, 4))
        status, rows = _tangent_chunk(self.fun, self.p, self.y, self.st, k, self.lmag, self.sgn,
                                      self.lnorm, self.gslog, cfg.renorm_interval, n_renorm,
                                      sample_every, cfg.rel_tol, cfg.abs_tol, _max_step(cfg),
                                      out_t, out_x, out_ln, out_gs, out_g2, out_vol, out_vec)
        traj = Trajectory(out_t[:rows], out_x[:rows], out_ln[:rows], out_gs[:rows],
                          out_g2[:rows], out_vol[:rows], out_vec[:rows],
                          meta={"pair": PAIR_ID, "n_steps": int(self.st[2])})
        _raise_on_status(status, self.st[0], traj)
        return traj


def concat(chunks: list[Trajectory]) -> Trajectory:
    chunks = [c for c in chunks if len(c.times)]
    if not chunks:
        raise ValueError("nothing to concatenate")

    def cat(name):
        parts = [getattr(c, name) for c in chunks]
        return None if parts[0] is None else np.concatenate(parts)

    return Trajectory(cat("times"), cat("states"), cat("log_norms"), cat("gs_log"),
                      cat("log_gali2_first"), cat("log_gali_volume"), cat("unit_vectors"),
                      meta=dict(chunks[-1].meta))


def integrate_with_deviations(params, y0, W0: DeviationSet | None = None, tau_span=(0.0, 1e3),
                              config: IntegratorConfig = IntegratorConfig(),
                              sample_every: int = 10, rhs=None) -> Trajectory:
    """Co-integrate ``k`` deviation vectors along the trajectory from ``y0``.

    Vectors are rescaled to unit length every ``config.renorm_interval`` and
    their log growth accumulated; their mutual alignment evolves freely.
    """
    t0, t1 = map(float, tau_span)
    if not t0 < t1:
        raise ValueError("tau_span must be increasing")
    run = TangentIntegrator(params, y0, W0, config, tau0=t0, rhs=rhs)
    return run.advance(t1 - t0, sample_every)
