"""Grid computations: attractor diagrams over (delta, power) and basin maps over beta0.

Every pixel is computed from its own inputs and a seed derived from
``(global seed, i, j)``, so results do not depend on worker count or on the
order in which pixels complete.  Finished pixels are appended to a JSON-lines
checkpoint by the parent process only; a resumed run skips them.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import (AttractorId, ClassificationError, ClassifierConfig, Kind, classify,
                         fingerprint)
from .integrator import PAIR_ID, IntegratorConfig
from .model import SystemParams

IC_SCHEME = "beta0=0 first, then isotropic gaussian per component, alpha0=0"
DEFAULT_SIGMA = 1e-3

_RANK = {Kind.FIXED_POINT: 0, Kind.LIMIT_CYCLE: 1, Kind.LIMIT_TORUS_2D: 2,
         Kind.UNDETERMINED: 2.5, Kind.TRANSIENT_CHAOTIC: 3, Kind.CHAOTIC: 4}


def complexity_rank(kind) -> float:
    return _RANK[Kind(kind)]


def complexity_order(a, b) -> int:
    """-1, 0 or 1 as ``a`` is less, equally or more complex than ``b``."""
    ra, rb = complexity_rank(a), complexity_rank(b)
    return (ra > rb) - (ra < rb)


def complexity_max(kinds) -> Kind:
    kinds = [Kind(k) for k in kinds]
    if not kinds:
        raise ValueError("no kinds to aggregate")
    return max(kinds, key=complexity_rank)


def initial_conditions(n_ic: int, seed: int, i: int, j: int,
                       sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """``n_ic`` states with alpha0 = 0; the first has beta0 = 0."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(i), int(j)]))
    ics = np.zeros((n_ic, 4))
    if n_ic > 1:
        ics[1:, 2:] = sigma * rng.standard_normal((n_ic - 1, 2))
    return ics


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return format(float(x), ".17g")


def _resolve_workers(workers) -> int:
    if workers in (None, 0, "max"):
        return os.cpu_count() or 1
    return max(1, int(workers))


@dataclass
class PixelResult:
    i: int
    j: int
    x: float
    y: float
    kind: str
    ic_kinds: list
    t_escape: list
    fingerprint: str = ""
    error: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class _Job:
    i: int
    j: int
    params: SystemParams
    ics: np.ndarray
    epsilon: float
    horizon: float
    config: IntegratorConfig
    ccfg: ClassifierConfig
    short_circuit: bool
    with_fingerprint: bool
    x: float
    y: float


def _run_job(job: _Job) -> tuple[PixelResult, AttractorId | None]:
    kinds, tesc, errors = [], [], []
    last = None
    for y0 in job.ics:
        try:
            res = classify(job.params, y0, job.epsilon, job.horizon, job.config, job.ccfg)
        except ClassificationError as err:
            res = err.partial
            errors.append(str(err))
        kinds.append(res.kind.value)
        tesc.append(res.t_escape)
        last = res
        if job.short_circuit and res.kind is Kind.CHAOTIC:
            break
    agg = complexity_max(kinds)
    aid = None
    fp = ""
    if job.with_fingerprint and last is not None and last.kind.regular and not errors:
        try:
            aid = fingerprint(job.params, last.final_state, last.kind, config=job.config)
            fp = aid.label()
        except Exception as err:  # noqa: BLE001 - recorded as a pixel failure marker
            errors.append(f"fingerprint: {err}")
    return PixelResult(job.i, job.j, job.x, job.y, agg.value, kinds, tesc, fp,
                       "; ".join(errors)), aid


@dataclass
class SweepGrid:
    """Per-pixel results over two axes.

    ``xs``/``ys`` are the axis values (delta/power for diagrams, Re/Im beta0
    for basins); ``pixels[(i, j)]`` holds the result at ``ys[i]``, ``xs[j]``.
    """

    xs: np.ndarray
    ys: np.ndarray
    pixels: dict
    meta: dict
    x_name: str = "delta"
    y_name: str = "power"
    ids: dict = field(default_factory=dict)

    @property
    def shape(self):
        return len(self.ys), len(self.xs)

    def kinds(self) -> np.ndarray:
        out = np.empty(self.shape, dtype=object)
        for (i, j), px in self.pixels.items():
            out[i, j] = px.kind
        return out

    def count(self, kind) -> int:
        k = Kind(kind).value
        return sum(px.kind == k for px in self.pixels.values())

    def check_aggregation(self) -> bool:
        return all(px.kind == complexity_max(px.ic_kinds).value for px in self.pixels.values())

    def to_csv(self, path) -> None:
        cols = ["i", "j", self.x_name, self.y_name, "kind", "ic_kinds", "fingerprint",
                "t_escape", "error"]
        lines = [",".join(cols)]
        for key in sorted(self.pixels):
            px = self.pixels[key]
            esc = [t for t in px.t_escape if t is not None]
            lines.append(",".join([str(px.i), str(px.j), _fmt(px.x), _fmt(px.y), px.kind,
                                   ";".join(px.ic_kinds), px.fingerprint,
                                   ";".join(_fmt(t) for t in esc), px.error.replace(",", " ")]))
        Path(path).write_text("\n".join(lines) + "\n", newline="\n")

    def write_metadata(self, path) -> None:
        meta = dict(self.meta)
        meta[f"{self.x_name}_values"] = [float(v) for v in self.xs]
        meta[f"{self.y_name}_values"] = [float(v) for v in self.ys]
        Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


class BasinGrid(SweepGrid):
    """Basin map: pixels carry an :class:`AttractorId` in ``ids`` when regular."""

    def distinct_attractors(self, rtol: float = 1e-2, atol: float = 1e-2) -> list[AttractorId]:
        """Representatives of tolerance clusters of the regular ids, in pixel order."""
        reps: list[AttractorId] = []
        for key in sorted(self.ids):
            aid = self.ids[key]
            if not any(aid.matches(r, rtol, atol) for r in reps):
                reps.append(aid)
        return reps

    def labels(self, rtol: float = 1e-2, atol: float = 1e-2) -> np.ndarray:
        """Integer attractor label per pixel; -1 for non-regular or failed pixels."""
        reps = self.distinct_attractors(rtol, atol)
        out = -np.ones(self.shape, dtype=int)
        for (i, j), aid in self.ids.items():
            for n, r in enumerate(reps):
                if aid.matches(r, rtol, atol):
                    out[i, j] = n
                    break
        return out


# ---------------------------------------------------------------------------
# execution

def _load_checkpoint(path) -> dict:
    done = {}
    if path is None or not Path(path).exists():
        return done
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                # a torn final line from an interrupted flush
                continue
            aid = rec.pop("attractor_id", None)
            px = PixelResult(**rec)
            done[(px.i, px.j)] = (px, _id_from_json(aid))
    return done


def _id_to_json(aid: AttractorId | None):
    if aid is None:
        return None
    return {"kind": aid.kind.value, "fingerprint": list(aid.fingerprint), "raw": list(aid.raw)}


def _id_from_json(rec) -> AttractorId | None:
    if rec is None:
        return None
    fp = rec["fingerprint"]
    raw = rec["raw"]
    return AttractorId(Kind(rec["kind"]), (fp[0], fp[1], fp[2], int(fp[3])),
                       (raw[0], raw[1], raw[2], int(raw[3])))


def _execute(jobs: list[_Job], workers, checkpoint, flush_every: int, stop_after: int | None):
    """Run jobs not already in ``checkpoint``; returns ``{(i, j): (PixelResult, id)}``."""
    done = _load_checkpoint(checkpoint)
    todo = [jb for jb in jobs if (jb.i, jb.j) not in done]
    if stop_after is not None:
        todo = todo[:stop_after]
    n = _resolve_workers(workers)
    buffer = []

    def flush():
        if checkpoint is not None and buffer:
            with open(checkpoint, "a") as fh:
                fh.write("".join(buffer))
                fh.flush()
                os.fsync(fh.fileno())
        buffer.clear()

    def collect(result):
        px, aid = result
        done[(px.i, px.j)] = (px, aid)
        rec = asdict(px)
        rec["attractor_id"] = _id_to_json(aid)
        buffer.append(json.dumps(rec, sort_keys=True) + "\n")
        if len(buffer) >= flush_every:
            flush()

    try:
        if n == 1 or len(todo) <= 1:
            for jb in todo:
                collect(_run_job(jb))
        else:
            with ProcessPoolExecutor(max_workers=n) as pool:
                for result in pool.map(_run_job, todo, chunksize=1):
                    collect(result)
    finally:
        flush()
    return done


def _common_meta(kind, params, epsilon, horizon, config, ccfg, seed, extra):
    meta = {"grid": kind, "params": params.to_dict(), "epsilon": epsilon, "horizon": horizon,
            "integrator": config.to_dict(), "classifier": ccfg.to_dict(), "seed": seed,
            "tool_version": __version__, "integrator_pair": PAIR_ID}
    meta.update(extra)
    return meta


def attractor_diagram(template: SystemParams, delta_range, power_range, resolution,
                      n_ic: int = 10, seed: int = 0, horizon: float = 2e4,
                      epsilon: float = 1e-6, config: IntegratorConfig = IntegratorConfig(),
                      ccfg: ClassifierConfig = ClassifierConfig(), workers=1,
                      checkpoint=None, flush_every: int = 256, sigma: float = DEFAULT_SIGMA,
                      short_circuit: bool = True, stop_after: int | None = None) -> SweepGrid:
    """Most complex attractor over ``n_ic`` initial conditions per (delta, power) pixel.

    With ``short_circuit`` the remaining initial conditions of a pixel are
    skipped once one of them is Chaotic, since nothing can outrank it.
    ``stop_after`` limits the number of new pixels computed (used to test
    interruption and resume).
    """
    if np.isscalar(resolution):
        resolution = (int(resolution), int(resolution))
    nd, npw = resolution
    if nd < 2 or npw < 2:
        raise ValueError("resolution must be >= 2 per axis")
    if n_ic < 1:
        raise ValueError("n_ic must be >= 1")
    deltas = np.linspace(delta_range[0], delta_range[1], nd)
    powers = np.linspace(power_range[0], power_range[1], npw)
    jobs = []
    for i, pw in enumerate(powers):
        for j, d in enumerate(deltas):
            p = template.replace(delta=float(d), power=float(pw))
            jobs.append(_Job(i, j, p, initial_conditions(n_ic, seed, i, j, sigma), epsilon,
                             horizon, config, ccfg, short_circuit, False, float(d), float(pw)))
    done = _execute(jobs, workers, checkpoint, flush_every, stop_after)
    meta = _common_meta("attractor_diagram", template, epsilon, horizon, config, ccfg, seed,
                        {"delta_range": list(map(float, delta_range)),
                         "power_range": list(map(float, power_range)),
                         "resolution": [nd, npw], "n_ic": n_ic, "ic_scheme": IC_SCHEME,
                         "ic_sigma": sigma, "short_circuit": short_circuit})
    pixels = {k: v[0] for k, v in done.items()}
    return SweepGrid(deltas, powers, pixels, meta, "delta", "power")


def basin_map(params: SystemParams, beta0_window, resolution, horizon: float = 1e5,
              epsilon: float = 1e-6, config: IntegratorConfig = IntegratorConfig(),
              ccfg: ClassifierConfig = ClassifierConfig(), workers=1, checkpoint=None,
              flush_every: int = 256, with_fingerprint: bool = True,
              stop_after: int | None = None) -> BasinGrid:
    """Classify and fingerprint trajectories from ``alpha0 = 0``, ``beta0`` on a grid.

    ``beta0_window`` is ``((re_min, re_max), (im_min, im_max))``.
    """
    if np.isscalar(resolution):
        resolution = (int(resolution), int(resolution))
    nr, ni = resolution
    if nr < 2 or ni < 2:
        raise ValueError("resolution must be >= 2 per axis")
    (r0, r1), (i0, i1) = beta0_window
    res_ = np.linspace(r0, r1, nr)
    ims = np.linspace(i0, i1, ni)
    jobs = []
    for i, bi in enumerate(ims):
        for j, br in enumerate(res_):
            y0 = np.array([[0.0, 0.0, br, bi]])
            jobs.append(_Job(i, j, params, y0, epsilon, horizon, config, ccfg, False,
                             with_fingerprint, float(br), float(bi)))
    done = _execute(jobs, workers, checkpoint, flush_every, stop_after)
    meta = _common_meta("basin_map", params, epsilon, horizon, config, ccfg, None,
                        {"beta0_window": [list(map(float, beta0_window[0])),
                                          list(map(float, beta0_window[1]))],
                         "resolution": [nr, ni]})
    pixels = {k: v[0] for k, v in done.items()}
    ids = {k: v[1] for k, v in done.items() if v[1] is not None}
    return BasinGrid(res_, ims, pixels, meta, "beta_re", "beta_im", ids)


def rerun_with_cutoff(grid: SweepGrid, new_horizon: float, workers=1,
                      checkpoint=None) -> tuple[SweepGrid, dict]:
    """Re-classify Chaotic and Undetermined runs at a longer horizon.

    Returns the updated grid and migration counts keyed ``"A->B"`` (pixel
    kinds).  Other pixels are copied unchanged.
    """
    old_h = grid.meta["horizon"]
    if not new_horizon > old_h:
        raise ValueError("new_horizon must exceed the original horizon")
    params = SystemParams(**grid.meta["params"])
    config = IntegratorConfig(**{k: v for k, v in grid.meta["integrator"].items() if k != "pair"})
    ccfg = ClassifierConfig(**grid.meta["classifier"])
    eps = grid.meta["epsilon"]
    basin = isinstance(grid, BasinGrid)
    redo = {Kind.CHAOTIC.value, Kind.UNDETERMINED.value}
    jobs = []
    for key in sorted(grid.pixels):
        px = grid.pixels[key]
        if px.kind not in redo:
            continue
        if basin:
            ics = np.array([[0.0, 0.0, px.x, px.y]])
            p = params
        else:
            ics = initial_conditions(grid.meta["n_ic"], grid.meta["seed"], px.i, px.j,
                                     grid.meta["ic_sigma"])
            p = params.replace(delta=px.x, power=px.y)
        jobs.append(_Job(px.i, px.j, p, ics, eps, new_horizon, config, ccfg,
                         grid.meta.get("short_circuit", False), basin, px.x, px.y))
    done = _execute(jobs, workers, checkpoint, 256, None)
    pixels = dict(grid.pixels)
    ids = dict(grid.ids)
    migrations: dict[str, int] = {}
    for key, (px, aid) in done.items():
        old = grid.pixels[key].kind
        pixels[key] = px
        if aid is not None:
            ids[key] = aid
        if px.kind != old:
            tag = f"{old}->{px.kind}"
            migrations[tag] = migrations.get(tag, 0) + 1
    meta = dict(grid.meta)
    meta["horizon"] = new_horizon
    meta["previous_horizon"] = old_h
    meta["migrations"] = migrations
    cls = type(grid)
    return cls(grid.xs, grid.ys, pixels, meta, grid.x_name, grid.y_name, ids), migrations
