"""Command-line interface.

Configuration is an INI file whose ``[section]`` / ``key`` pairs are flattened
to dotted keys (``system.delta``, ``classifier.horizon`` ...).  Unknown keys
are rejected and every default is written to the metadata sidecar, so an
artifact can be regenerated from its sidecar alone::

    omdyn classify --config run.ini --out results/
    omdyn diagram --config results/diagram.meta.json --out again/
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import math
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import (ClassificationError, ClassifierConfig, Kind, classify, escape_time,
                         fingerprint, sample_seeds, survivor_curve)
from .integrator import PAIR_ID, IntegrationError, IntegratorConfig, integrate
from .indicators import indicator_series
from .model import SystemParams, find_fixed_points, stability_diagram
from .spectral import adiabatic_ramp, comb_analysis, mechanical_spectrum
from .sweep import attractor_diagram, basin_map, rerun_with_cutoff

COMMANDS = ("fixed-points", "simulate", "classify", "diagram", "basin", "spectrum", "ramp",
            "escape")

EXIT_CONFIG = 2
EXIT_INTEGRATION = 3
EXIT_IO = 4

# dotted key -> default; the default's type is the parsed type (None means optional float)
DEFAULTS: dict[str, object] = {
    "system.delta": 0.74,
    "system.kappa": 0.1,
    "system.gamma": 1e-4,
    "system.power": 0.3,
    "system.g0": None,
    "initial.alpha_re": 0.0,
    "initial.alpha_im": 0.0,
    "initial.beta_re": 0.0,
    "initial.beta_im": 0.0,
    "integrator.rel_tol": 1e-9,
    "integrator.abs_tol": 1e-13,
    "integrator.max_step": None,
    "integrator.method_order": 8,
    "integrator.renorm_interval": 1.0,
    "classifier.epsilon": 1e-6,
    "classifier.horizon": 1e5,
    "classifier.transient": 2000.0,
    "classifier.chunk": 1000.0,
    "classifier.sample_every": 10,
    "classifier.torus_extension": 4.0,
    "classifier.slope_window": 1000.0,
    "classifier.slope_tol": 1e-4,
    "classifier.plateau_delta": 2.0,
    "classifier.confirm": 5000.0,
    "classifier.fixed_point_check": True,
    "classifier.fixed_point_distance": 1e-3,
    "classifier.fixed_point_rate_rtol": 0.5,
    "run.seed": 0,
    "run.threads": 1,
    "output.dir": "omdyn-out",
    "fixed_points.grid": False,
    "fixed_points.delta_min": -2.0,
    "fixed_points.delta_max": 2.0,
    "fixed_points.power_min": 0.0,
    "fixed_points.power_max": 1.0,
    "fixed_points.points": 200,
    "simulate.duration": 1000.0,
    "simulate.sample_dt": 0.1,
    "simulate.indicators": False,
    "diagram.delta_min": -1.0,
    "diagram.delta_max": 1.0,
    "diagram.power_min": 0.0,
    "diagram.power_max": 0.4,
    "diagram.delta_points": 100,
    "diagram.power_points": 100,
    "diagram.n_ic": 10,
    "diagram.ic_sigma": 1e-3,
    "diagram.short_circuit": True,
    "diagram.flush_every": 256,
    "basin.re_min": -0.01,
    "basin.re_max": 0.01,
    "basin.im_min": -0.01,
    "basin.im_max": 0.01,
    "basin.re_points": 20,
    "basin.im_points": 20,
    "basin.fingerprint": True,
    "basin.rerun_horizon": 0.0,
    "spectrum.settle": 2e4,
    "spectrum.segment": 65536,
    "spectrum.sample_dt": 0.1,
    "spectrum.window": "hann",
    "spectrum.floor": 1e-3,
    "ramp.control": "delta",
    "ramp.start": 0.70,
    "ramp.end": 0.95,
    "ramp.rate": 1e-6,
    "ramp.relax": 3e4,
    "ramp.segment": 65536,
    "ramp.hop": 0,
    "ramp.max_omega": 3.0,
    "escape.n_seeds": 50,
    "escape.seed_start": 3000.0,
    "escape.seed_stop": 8000.0,
}


class ConfigError(ValueError):
    pass


def _coerce(key, raw):
    default = DEFAULTS[key]
    if isinstance(raw, str):
        text = raw.strip()
    else:
        text = raw
    try:
        if default is None:
            if text in (None, "", "none", "None"):
                return None
            return float(text)
        if isinstance(default, bool):
            if isinstance(text, bool):
                return text
            low = str(text).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            val = float(text)
            if val != int(val):
                raise ValueError(text)
            return int(val)
        if isinstance(default, float):
            return float(text)
        return str(text)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


class RunConfig:
    """Flat, validated configuration with every default materialised."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, raw in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            self.values[key] = _coerce(key, raw)
        self._validate()

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def updated(self, **dotted) -> "RunConfig":
        vals = dict(self.values)
        vals.update({k: v for k, v in dotted.items() if v is not None})
        return RunConfig(vals)

    # construction helpers
    @classmethod
    def from_ini_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as err:
            raise ConfigError(f"cannot parse config: {err}") from None
        flat = {f"{sec}.{key}": val for sec in cp.sections() for key, val in cp[sec].items()}
        return cls(flat)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        if path.suffix == ".json":
            try:
                meta = json.loads(text)
            except json.JSONDecodeError as err:
                raise ConfigError(f"bad metadata file {path}: {err}") from None
            if "config" not in meta:
                raise ConfigError(f"{path} has no 'config' block")
            return cls(meta["config"])
        return cls.from_ini_text(text)

    def to_ini(self) -> str:
        sections: dict[str, dict] = {}
        for key, val in self.values.items():
            sec, name = key.split(".", 1)
            sections.setdefault(sec, {})[name] = "none" if val is None else (
                repr(val) if isinstance(val, float) else str(val))
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_dict(sections)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    # typed views
    def system(self) -> SystemParams:
        v = self.values
        try:
            return SystemParams(v["system.delta"], v["system.kappa"], v["system.gamma"],
                                v["system.power"], v["system.g0"])
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def y0(self) -> np.ndarray:
        v = self.values
        return np.array([v["initial.alpha_re"], v["initial.alpha_im"], v["initial.beta_re"],
                         v["initial.beta_im"]])

    def integrator(self) -> IntegratorConfig:
        v = self.values
        try:
            return IntegratorConfig(v["integrator.rel_tol"], v["integrator.abs_tol"],
                                    v["integrator.max_step"], v["integrator.method_order"],
                                    v["integrator.renorm_interval"])
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def classifier(self) -> ClassifierConfig:
        v = self.values
        try:
            return ClassifierConfig(
                transient=v["classifier.transient"], chunk=v["classifier.chunk"],
                sample_every=v["classifier.sample_every"],
                torus_extension=v["classifier.torus_extension"],
                slope_window=v["classifier.slope_window"], slope_tol=v["classifier.slope_tol"],
                plateau_delta=v["classifier.plateau_delta"], confirm=v["classifier.confirm"],
                fixed_point_check=v["classifier.fixed_point_check"],
                fixed_point_distance=v["classifier.fixed_point_distance"],
                fixed_point_rate_rtol=v["classifier.fixed_point_rate_rtol"])
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def _validate(self):
        self.system()
        self.integrator()
        self.classifier()
        v = self.values
        if not 0 < v["classifier.epsilon"] < 1:
            raise ConfigError("classifier.epsilon must be in (0, 1)")
        if not v["classifier.horizon"] > 0:
            raise ConfigError("classifier.horizon must be > 0")
        if v["run.seed"] < 0 or v["run.seed"] >= 2 ** 64:
            raise ConfigError("run.seed must be an unsigned 64-bit integer")
        if v["run.threads"] < 0:
            raise ConfigError("run.threads must be >= 0 (0 = all cores)")
        for key in ("fixed_points.points", "diagram.delta_points", "diagram.power_points",
                    "basin.re_points", "basin.im_points"):
            if v[key] < 2:
                raise ConfigError(f"{key} must be >= 2")
        if v["diagram.n_ic"] < 1:
            raise ConfigError("diagram.n_ic must be >= 1")
        if v["ramp.control"] not in ("delta", "power"):
            raise ConfigError("ramp.control must be 'delta' or 'power'")
        if not 0 < v["ramp.rate"] <= 1e-5:
            raise ConfigError("ramp.rate must be in (0, 1e-5]")
        if v["spectrum.segment"] < 2 ** 12 or v["ramp.segment"] < 2 ** 12:
            raise ConfigError("spectral segments need >= 4096 samples")
        if v["escape.n_seeds"] < 10:
            raise ConfigError("escape.n_seeds must be >= 10")
        if v["simulate.duration"] <= 0 or v["simulate.sample_dt"] <= 0:
            raise ConfigError("simulate.duration and simulate.sample_dt must be > 0")


# ---------------------------------------------------------------------------
# output helpers

def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, Kind):
        return obj.value
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_meta(out: Path, stem: str, command: str, cfg: RunConfig, extra: dict | None = None):
    meta = {"command": command, "config": cfg.values, "tool_version": __version__,
            "integrator_pair": PAIR_ID}
    if extra:
        meta.update(extra)
    write_json(out / f"{stem}.meta.json", meta)


PLOT_TEMPLATES = {
    "fixed-points": """import csv
import matplotlib.pyplot as plt
rows = list(csv.DictReader(open("{out}/stability_diagram.csv")))
d = [float(r["delta"]) for r in rows]
p = [float(r["power"]) for r in rows]
c = [int(r["code"]) for r in rows]
plt.scatter(d, p, c=c, s=4, cmap="viridis")
plt.xlabel("delta"); plt.ylabel("P"); plt.colorbar(label="10*n_fp + n_stable")
plt.savefig("{out}/stability_diagram.png", dpi=150)
""",
    "simulate": """import csv
import matplotlib.pyplot as plt
rows = list(csv.DictReader(open("{out}/trajectory.csv")))
plt.plot([float(r["tau"]) for r in rows], [float(r["Q"]) for r in rows], lw=0.5)
plt.xlabel("tau"); plt.ylabel("Q")
plt.savefig("{out}/trajectory.png", dpi=150)
""",
    "classify": """import csv
import matplotlib.pyplot as plt
rows = list(csv.DictReader(open("{out}/indicators.csv")))
t = [float(r["tau"]) for r in rows]
for col in ("log10_mean_norm", "log10_gali2_mean", "log10_gali3"):
    plt.plot(t, [float(r[col]) for r in rows], label=col)
plt.legend(); plt.xlabel("tau")
plt.savefig("{out}/indicators.png", dpi=150)
""",
    "diagram": """import csv
import matplotlib.pyplot as plt
order = ["FixedPoint", "LimitCycle", "LimitTorus2D", "Undetermined", "TransientChaotic", "Chaotic"]
rows = list(csv.DictReader(open("{out}/diagram.csv")))
plt.scatter([float(r["delta"]) for r in rows], [float(r["power"]) for r in rows],
            c=[order.index(r["kind"]) for r in rows], s=6, cmap="tab10", vmin=0, vmax=9)
plt.xlabel("delta"); plt.ylabel("P")
plt.savefig("{out}/diagram.png", dpi=150)
""",
    "basin": """import csv
import matplotlib.pyplot as plt
rows = list(csv.DictReader(open("{out}/basin.csv")))
labels = sorted(set(r["fingerprint"] or r["kind"] for r in rows))
plt.scatter([float(r["beta_re"]) for r in rows], [float(r["beta_im"]) for r in rows],
            c=[labels.index(r["fingerprint"] or r["kind"]) for r in rows], s=10, cmap="tab20")
plt.xlabel("Re beta0"); plt.ylabel("Im beta0")
plt.savefig("{out}/basin.png", dpi=150)
""",
    "spectrum": """import csv
import matplotlib.pyplot as plt
rows = list(csv.DictReader(open("{out}/spectrum.csv")))
plt.semilogy([float(r["omega"]) for r in rows], [float(r["magnitude"]) for r in rows])
plt.xlim(0, 3); plt.xlabel("omega"); plt.ylabel("|S|")
plt.savefig("{out}/spectrum.png", dpi=150)
""",
    "ramp": """import csv
import numpy as np
import matplotlib.pyplot as plt
rows = list(csv.DictReader(open("{out}/ramp_spectrogram.csv")))
c = np.array([float(r["control"]) for r in rows])
w = np.array([float(r["omega"]) for r in rows])
m = np.array([float(r["magnitude"]) for r in rows])
plt.scatter(c, w, c=np.log10(m + 1e-300), s=1, cmap="magma")
plt.xlabel("control"); plt.ylabel("omega")
plt.savefig("{out}/ramp.png", dpi=150)
""",
    "escape": """import csv
import matplotlib.pyplot as plt
rows = list(csv.DictReader(open("{out}/survivors.csv")))
plt.semilogy([float(r["tau"]) for r in rows], [float(r["N"]) for r in rows], "o-")
plt.xlabel("tau"); plt.ylabel("N(t)")
plt.savefig("{out}/survivors.png", dpi=150)
""",
}


# ---------------------------------------------------------------------------
# commands

def cmd_fixed_points(cfg: RunConfig, out: Path) -> dict:
    p = cfg.system()
    recs = find_fixed_points(p)
    rows = []
    for r in recs:
        ev = sorted(r.eigenvalues, key=lambda z: (-z.real, z.imag))
        rows.append([r.Q, r.alpha.real, r.alpha.imag, r.beta.real, r.beta.imag,
                     r.stability.value, r.degenerate, r.residual,
                     *[e.real for e in ev], *[e.imag for e in ev]])
    header = ["Q", "alpha_re", "alpha_im", "beta_re", "beta_im", "stability", "degenerate",
              "residual"] + [f"eig{i}_re" for i in range(4)] + [f"eig{i}_im" for i in range(4)]
    write_csv(out / "fixed_points.csv", header, rows)
    summary = {"n_fixed_points": len(recs),
               "n_stable": sum(r.stability.value == "stable" for r in recs)}
    if cfg["fixed_points.grid"]:
        n = cfg["fixed_points.points"]
        d, pw, codes = stability_diagram(p, (cfg["fixed_points.delta_min"], cfg["fixed_points.delta_max"]),
                                         (cfg["fixed_points.power_min"], cfg["fixed_points.power_max"]), n)
        grid_rows = [[i, j, d[j], pw[i], codes[i, j], codes[i, j] // 10, codes[i, j] % 10]
                     for i in range(len(pw)) for j in range(len(d))]
        write_csv(out / "stability_diagram.csv",
                  ["i", "j", "delta", "power", "code", "n_fixed_points", "n_stable"], grid_rows)
    write_meta(out, "fixed_points", "fixed-points", cfg, summary)
    return summary


def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    p, y0, ic = cfg.system(), cfg.y0(), cfg.integrator()
    dur, dt = cfg["simulate.duration"], cfg["simulate.sample_dt"]
    tr = integrate(p, y0, (0.0, dur), ic, sample_dt=dt)
    write_csv(out / "trajectory.csv", ["tau", "alpha_re", "alpha_im", "beta_re", "beta_im", "Q"],
              [[t, *x, q] for t, x, q in zip(tr.times, tr.states, tr.Q)])
    summary = {"n_samples": len(tr.times), "n_steps": tr.meta["n_steps"]}
    if cfg["simulate.indicators"]:
        s = indicator_series(p, y0, dur, ic, sample_every=cfg["classifier.sample_every"])
        _write_indicators(out / "indicators.csv", s)
    write_meta(out, "trajectory", "simulate", cfg, summary)
    return summary


def _write_indicators(path, series):
    lg = series.log10()
    write_csv(path, ["tau", "log10_mean_norm", "log10_gali2_mean", "log10_gali3"],
              zip(lg["times"], lg["log10_mean_norm"], lg["log10_gali2_mean"], lg["log10_gali3"]))


def cmd_classify(cfg: RunConfig, out: Path) -> dict:
    p, y0 = cfg.system(), cfg.y0()
    res = classify(p, y0, cfg["classifier.epsilon"], cfg["classifier.horizon"],
                   cfg.integrator(), cfg.classifier(), keep_series=True)
    report = {"kind": res.kind.value, "t_escape": res.t_escape, "diagnostics": res.diagnostics}
    if res.kind.regular:
        aid = fingerprint(p, res.final_state, res.kind, config=cfg.integrator())
        report["fingerprint"] = list(aid.fingerprint)
    write_json(out / "classify.json", report)
    _write_indicators(out / "indicators.csv", res.series)
    write_meta(out, "classify", "classify", cfg, {"kind": res.kind.value})
    return report


def _checkpoint_path(out: Path, stem: str, cfg: RunConfig) -> Path:
    keys = {k: v for k, v in cfg.values.items()
            if not k.startswith(("run.threads", "output.", "fixed_points.", "simulate.",
                                 "spectrum.", "ramp.", "escape."))}
    digest = hashlib.sha256(json.dumps(keys, sort_keys=True).encode()).hexdigest()[:16]
    return out / f"{stem}.{digest}.checkpoint.jsonl"


def cmd_diagram(cfg: RunConfig, out: Path) -> dict:
    g = attractor_diagram(
        cfg.system(), (cfg["diagram.delta_min"], cfg["diagram.delta_max"]),
        (cfg["diagram.power_min"], cfg["diagram.power_max"]),
        (cfg["diagram.delta_points"], cfg["diagram.power_points"]), n_ic=cfg["diagram.n_ic"],
        seed=cfg["run.seed"], horizon=cfg["classifier.horizon"], epsilon=cfg["classifier.epsilon"],
        config=cfg.integrator(), ccfg=cfg.classifier(), workers=cfg["run.threads"] or "max",
        checkpoint=_checkpoint_path(out, "diagram", cfg), flush_every=cfg["diagram.flush_every"],
        sigma=cfg["diagram.ic_sigma"], short_circuit=cfg["diagram.short_circuit"])
    g.to_csv(out / "diagram.csv")
    counts = {k.value: g.count(k) for k in Kind}
    meta = dict(g.meta)
    meta.update({"command": "diagram", "config": cfg.values, "counts": counts})
    meta["delta_values"] = g.xs
    meta["power_values"] = g.ys
    write_json(out / "diagram.meta.json", meta)
    return counts


def cmd_basin(cfg: RunConfig, out: Path) -> dict:
    window = ((cfg["basin.re_min"], cfg["basin.re_max"]), (cfg["basin.im_min"], cfg["basin.im_max"]))
    g = basin_map(cfg.system(), window, (cfg["basin.re_points"], cfg["basin.im_points"]),
                  horizon=cfg["classifier.horizon"], epsilon=cfg["classifier.epsilon"],
                  config=cfg.integrator(), ccfg=cfg.classifier(),
                  workers=cfg["run.threads"] or "max",
                  checkpoint=_checkpoint_path(out, "basin", cfg),
                  with_fingerprint=cfg["basin.fingerprint"])
    g.to_csv(out / "basin.csv")
    reps = g.distinct_attractors()
    write_csv(out / "attractors.csv", ["label", "kind", "mean_Q", "amplitude", "omega", "multiplicity"],
              [[n, r.kind.value, *r.raw] for n, r in enumerate(reps)])
    summary = {"counts": {k.value: g.count(k) for k in Kind}, "n_distinct": len(reps)}
    if cfg["basin.rerun_horizon"] > 0:
        g2, mig = rerun_with_cutoff(g, cfg["basin.rerun_horizon"], cfg["run.threads"] or "max")
        g2.to_csv(out / "basin_rerun.csv")
        summary["migrations"] = mig
    meta = dict(g.meta)
    meta.update({"command": "basin", "config": cfg.values, **summary,
                 "beta_re_values": g.xs, "beta_im_values": g.ys})
    write_json(out / "basin.meta.json", meta)
    return summary


def _settled_state(cfg: RunConfig):
    p, ic = cfg.system(), cfg.integrator()
    x = cfg.y0()
    settle = cfg["spectrum.settle"]
    if settle > 0:
        x = integrate(p, x, (0.0, settle), ic, sample_dt=settle).states[-1]
    return x


def cmd_spectrum(cfg: RunConfig, out: Path) -> dict:
    p, ic = cfg.system(), cfg.integrator()
    n, dt = cfg["spectrum.segment"], cfg["spectrum.sample_dt"]
    x = _settled_state(cfg)
    q = integrate(p, x, (0.0, n * dt), ic, sample_dt=dt).Q[1:]
    sl = mechanical_spectrum(q, dt, window=cfg["spectrum.window"], floor=cfg["spectrum.floor"])
    write_csv(out / "spectrum.csv", ["omega", "magnitude"], zip(sl.freqs, sl.magnitude))
    write_csv(out / "peaks.csv", ["omega", "magnitude"], sl.peaks)
    comb = comb_analysis(sl)
    summary = {"n_peaks": len(sl.peak_freqs), "fundamental": sl.fundamental,
               "n_independent": comb.n_independent, "commensurate": comb.commensurate,
               "spacing": comb.spacing, "window": sl.window, "segment": n, "sample_dt": dt}
    write_meta(out, "spectrum", "spectrum", cfg, summary)
    return summary


def cmd_ramp(cfg: RunConfig, out: Path) -> dict:
    hop = cfg["ramp.hop"] or None
    r = adiabatic_ramp(cfg.system(), cfg["ramp.control"], cfg["ramp.start"], cfg["ramp.end"],
                       cfg["ramp.rate"], cfg.integrator(), cfg.y0(), cfg["ramp.relax"],
                       cfg["ramp.segment"], hop)
    flags = r.sideband_flags()
    wmax = cfg["ramp.max_omega"]
    rows = []
    for c, sl in zip(r.controls, r.slices):
        sel = sl.freqs <= wmax
        rows.extend([c, w, m] for w, m in zip(sl.freqs[sel], sl.magnitude[sel]))
    write_csv(out / "ramp_spectrogram.csv", ["control", "omega", "magnitude"], rows)
    write_csv(out / "ramp_summary.csv",
              ["control", "n_peaks", "fundamental", "n_independent", "spacing", "sidebands"],
              [[c, len(sl.peak_freqs), sl.fundamental, cb.n_independent, cb.spacing, f]
               for c, sl, cb, f in zip(r.controls, r.slices, r.combs, flags)])
    onset, offset = r.sideband_window()
    summary = {"n_slices": len(r.slices), "sideband_onset": onset, "sideband_end": offset,
               "transitions": r.transitions(), "direction": r.direction, "rate": r.rate}
    write_meta(out, "ramp", "ramp", cfg, summary)
    return summary


def cmd_escape(cfg: RunConfig, out: Path) -> dict:
    p, ic = cfg.system(), cfg.integrator()
    horizon = cfg["classifier.horizon"]
    seeds = sample_seeds(p, cfg.y0(), cfg["escape.n_seeds"], cfg["escape.seed_start"],
                         cfg["escape.seed_stop"], ic)
    rep = escape_time(p, seeds, horizon, cfg["classifier.epsilon"], ic, cfg.classifier(),
                      workers=cfg["run.threads"] or (os.cpu_count() or 1))
    write_csv(out / "escape.csv", ["seed", "alpha_re", "alpha_im", "beta_re", "beta_im",
                                   "escape_time", "censored", "kind"],
              [[i, *s, t, c, k.value] for i, (s, t, c, k) in
               enumerate(zip(seeds, rep.escape_times, rep.censored, rep.kinds))])
    ev, n = survivor_curve(rep.escape_times, rep.censored)
    write_csv(out / "survivors.csv", ["tau", "N"], [[0.0, rep.n0], *zip(ev, n)])
    summary = {"n0": rep.n0, "n_escaped": rep.n_escaped, "tau_esc": rep.tau_esc,
               "fit_r2": rep.fit_quality}
    write_meta(out, "escape", "escape", cfg, summary)
    return summary


HANDLERS = {"fixed-points": cmd_fixed_points, "simulate": cmd_simulate, "classify": cmd_classify,
            "diagram": cmd_diagram, "basin": cmd_basin, "spectrum": cmd_spectrum,
            "ramp": cmd_ramp, "escape": cmd_escape}


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="omdyn", description="Optomechanical attractor toolkit")
    ap.add_argument("--version", action="version", version=f"omdyn {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI file, or a metadata sidecar (.json) to replay")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
        sp.add_argument("--threads", help="worker processes, or 'max'")
        sp.add_argument("--emit-plot", action="store_true", help="also write a matplotlib script")
        sp.add_argument("--horizon", type=float, help="classification cutoff time")
        sp.add_argument("--epsilon", type=float, help="indicator threshold")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one dotted config key")
    return ap


def _error_record(out, command, kind, message, code):
    rec = {"error": kind, "message": message, "command": command, "exit_code": code}
    print(json.dumps(rec), file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            write_json(out / "error.json", rec)
        except OSError:
            pass
    return code


def load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    threads = args.threads
    if threads is not None:
        threads = 0 if str(threads).lower() == "max" else threads
    overrides.update({"run.seed": args.seed, "run.threads": threads, "output.dir": args.out,
                      "classifier.horizon": args.horizon, "classifier.epsilon": args.epsilon})
    unknown = [k for k in overrides if k not in DEFAULTS]
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    vals = dict(cfg.values)
    vals.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(vals)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else None
    try:
        cfg = load_config(args)
    except ConfigError as err:
        return _error_record(out, args.command, "config", str(err), EXIT_CONFIG)
    out = Path(cfg["output.dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        return _error_record(None, args.command, "io", str(err), EXIT_IO)
    try:
        summary = HANDLERS[args.command](cfg, out)
        if args.emit_plot:
            (out / f"plot_{args.command.replace('-', '_')}.py").write_text(
                PLOT_TEMPLATES[args.command].format(out=out.as_posix()))
    except ConfigError as err:
        return _error_record(out, args.command, "config", str(err), EXIT_CONFIG)
    except (IntegrationError, ClassificationError) as err:
        return _error_record(out, args.command, "integration", str(err), EXIT_INTEGRATION)
    except OSError as err:
        return _error_record(out, args.command, "io", str(err), EXIT_IO)
    except ValueError as err:
        return _error_record(out, args.command, "config", str(err), EXIT_CONFIG)
    except Exception as err:  # noqa: BLE001 - still emit a machine-readable record
        traceback.print_exc()
        return _error_record(out, args.command, "internal", repr(err), 1)
    print(json.dumps(_jsonable({"command": args.command, "out": str(out), "summary": summary})))
    return 0


if __name__ == "__main__":
    sys.exit(main())
