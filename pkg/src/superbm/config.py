"""Experiment configuration: INI file with sections, validated into typed objects.

Every problem found while loading is collected and reported together.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError
from .heatkernel import FiniteMeasure, GridField, GridSpec
from .loglaplace import GammaParams, NonlinearitySpec, PicardConfig
from .particles import SimConfig, TestFunction

OUT_ENV = "SUPERBM_OUT"

# name -> (section, key, default, type); None default means "derived"
DEFAULTS = {
    "model": {"gamma": "0.5", "dimension": "1"},
    "grid": {"half_extent": "6.5", "points": "1024"},
    "solver": {"t_final": "1.0", "t_min": "", "time_steps": "64", "tol": "1e-8", "max_iters": "200",
               "nonlinearity": "power_gamma"},
    "simulation": {"particle_mass": "1e-3", "branch_rate": "", "horizon": "1.0", "motion_dt": "1e-3",
                   "n_max": "", "cap_mass_factor": "1000", "replicates": "1000", "seed": "0",
                   "snapshot_times": "", "threshold": ""},
    "initial_measure": {"atoms": "0:1", "density": "none"},
    "test_function": {"kind": "constant", "value": "1.0", "base": "1.0", "amp": "1.0", "center": "0",
                      "sigma": "0.5"},
    "output": {"directory": "", "formats": "csv,json", "max_snapshot_paths": "10"},
    "density": {"ns": "8,16,32", "t": ""},
    "validate": {"criteria": "all", "profile": "full", "seed": "20240601", "tolerance_scale": "1.0"},
}


def reference_text() -> str:
    """All keys with their defaults, in INI form (the documented reference)."""
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    import io

    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


@dataclass
class ExperimentConfig:
    params: GammaParams
    dim: int
    grid: GridSpec
    picard: PicardConfig
    psi: NonlinearitySpec
    sim: SimConfig
    measure: FiniteMeasure | None
    function_ic: GridField | None
    test_function: TestFunction
    snapshot_times: tuple
    threshold: float | None
    out_dir: str
    formats: tuple
    max_snapshot_paths: int
    density_ns: tuple
    density_t: float
    criteria: tuple
    profile: str
    validate_seed: int
    raw: dict = field(default_factory=dict)
    tol_scale: float = 1.0

    def resolved(self) -> dict:
        return self.raw

    def content_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def provenance_lines(self) -> list:
        return [f"config_sha256 = {self.content_hash()}"] + [
            f"{sec}.{k} = {v}" for sec, kv in sorted(self.raw.items()) for k, v in sorted(kv.items())]


class _Collector:
    def __init__(self, cp: configparser.ConfigParser):
        self.cp = cp
        self.problems: list = []

    def get(self, sec, key, conv, optional=False):
        raw = self.cp.get(sec, key, fallback="").strip()
        if raw == "" and optional:
            return None
        try:
            return conv(raw)
        except (ValueError, TypeError, DomainError, ConfigurationError) as exc:
            self.problems.append(f"[{sec}] {key} = {raw!r}: {exc}")
            return None

    def check(self, ok, msg):
        if not ok:
            self.problems.append(msg)
        return ok


def _int(s):
    v = float(s)
    if v != int(v):
        raise ValueError("not an integer")
    return int(v)


def _floats(s):
    return tuple(float(x) for x in re.split(r"[,\s]+", s.strip()) if x)


def parse_atoms(text: str, dim: int):
    """``"x:m; x:m"`` (1D) or ``"x,y:m; ..."`` (2D)."""
    pos, mass = [], []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        if ":" not in chunk:
            raise ValueError(f"atom {chunk!r} must read position:mass")
        p, m = chunk.split(":", 1)
        coords = _floats(p)
        if len(coords) != dim:
            raise ValueError(f"atom position {p!r} must have {dim} coordinate(s)")
        pos.append(coords)
        mass.append(float(m))
    if any(not m > 0 for m in mass):
        raise ValueError("atom masses must be positive")
    return np.array(pos, dtype=float).reshape(-1, dim), np.array(mass, dtype=float)


def parse_density(text: str):
    """``none``, ``constant(a)``, ``gaussian(sigma[, mass])`` or ``indicator(half_width[, height])``."""
    text = text.strip().lower()
    if text in ("", "none"):
        return None
    m = re.fullmatch(r"(constant|gaussian|indicator)\(([^)]*)\)", text)
    if not m:
        raise ValueError("expected none, constant(a), gaussian(sigma[, mass]) or indicator(half_width[, height])")
    args = _floats(m.group(2))
    kind = m.group(1)
    if kind == "constant" and len(args) == 1 and args[0] >= 0:
        return kind, args
    if kind in ("gaussian", "indicator") and len(args) in (1, 2) and all(a > 0 for a in args):
        return kind, args
    raise ValueError(f"bad arguments for {kind}")


def density_grid(kind: str, args, spec: GridSpec) -> np.ndarray:
    if kind == "constant":
        return np.full(spec.shape, args[0])
    if kind == "gaussian":
        sigma = args[0]
        mass = args[1] if len(args) > 1 else 1.0
        r2 = spec.radius**2
        return mass * np.exp(-r2 / (2 * sigma**2)) / (2 * math.pi * sigma**2) ** (spec.dim / 2)
    # indicator of the box [-r, r]^dim, averaged over each cell so the mass is exact
    r = args[0]
    height = args[1] if len(args) > 1 else 1.0
    h = spec.h
    ax = spec.axis
    frac = np.clip((np.minimum(ax + h / 2, r) - np.maximum(ax - h / 2, -r)) / h, 0.0, 1.0)
    if spec.dim == 1:
        return height * frac
    return height * np.outer(frac, frac)


def load_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";;"))
    cp.read_dict(DEFAULTS)
    problems = []
    if path is not None:
        if not os.path.exists(path):
            raise ConfigurationError(f"config file {path} not found")
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config: {exc}") from exc
        for sec in cp.sections():
            if sec not in DEFAULTS:
                problems.append(f"unknown section [{sec}]")
                continue
            for key in cp[sec]:
                if key not in DEFAULTS[sec]:
                    problems.append(f"unknown key [{sec}] {key}")
    for (sec, key), val in (overrides or {}).items():
        cp.set(sec, key, str(val))

    c = _Collector(cp)
    c.problems.extend(problems)
    params = c.get("model", "gamma", lambda s: GammaParams(float(s)))
    dim = c.get("model", "dimension", _int)
    if dim is not None:
        c.check(dim in (1, 2), f"[model] dimension must be 1 or 2, got {dim}")
    L = c.get("grid", "half_extent", float)
    npts = c.get("grid", "points", _int)
    grid = None
    if dim in (1, 2) and L is not None and npts is not None:
        try:
            grid = GridSpec(dim, L, npts)
        except ConfigurationError as exc:
            c.problems.append(f"[grid] {exc}")

    t_final = c.get("solver", "t_final", float)
    t_min = c.get("solver", "t_min", float, optional=True)
    steps = c.get("solver", "time_steps", _int)
    tol = c.get("solver", "tol", float)
    iters = c.get("solver", "max_iters", _int)
    psi = c.get("solver", "nonlinearity", lambda s: NonlinearitySpec(s.strip()))
    picard = None
    # a stand-in gamma lets the other sections be checked when gamma itself is bad
    gp = params or GammaParams(0.5)
    if None not in (t_final, steps, tol, iters):
        try:
            picard = PicardConfig(gp, t_final, steps, t_min, tol, iters)
        except ConfigurationError as exc:
            c.problems.extend(f"[solver] {p}" for p in exc.problems)

    eps = c.get("simulation", "particle_mass", float)
    beta = c.get("simulation", "branch_rate", float, optional=True)
    horizon = c.get("simulation", "horizon", float)
    mdt = c.get("simulation", "motion_dt", float)
    n_max = c.get("simulation", "n_max", _int, optional=True)
    capf = c.get("simulation", "cap_mass_factor", float)
    reps = c.get("simulation", "replicates", _int)
    seed = c.get("simulation", "seed", _int)
    snaps = c.get("simulation", "snapshot_times", _floats) or ()
    thr = c.get("simulation", "threshold", float, optional=True)
    sim = None
    if None not in (eps, horizon, mdt, capf, reps, seed):
        try:
            sim = SimConfig(gp, eps, horizon, mdt, beta, n_max, capf, seed, reps)
        except ConfigurationError as exc:
            c.problems.extend(f"[simulation] {p}" for p in exc.problems)
        if sim is not None:
            for t in snaps:
                try:
                    if not 0 < t <= horizon:
                        raise DomainError("outside (0, horizon]")
                    sim.step_of(t)
                except DomainError as exc:
                    c.problems.append(f"[simulation] snapshot time {t}: {exc}")

    atoms = c.get("initial_measure", "atoms", lambda s: parse_atoms(s, dim or 1)) if dim in (1, 2) else None
    dens = c.get("initial_measure", "density", parse_density)
    measure = function_ic = None
    if grid is not None and atoms is not None:
        pos, mass = atoms
        if mass.size and not np.all(grid.contains(pos)):
            c.problems.append("[initial_measure] atoms must lie strictly inside the grid box")
        elif dens is not None and dens[0] == "constant":
            if mass.size:
                c.problems.append("[initial_measure] constant density cannot be combined with atoms")
            elif dens[1][0] == 0:
                c.problems.append("[initial_measure] initial datum is identically zero")
            else:
                function_ic = GridField(grid, density_grid("constant", dens[1], grid))
        else:
            dpart = GridField(grid, density_grid(*dens, grid)) if dens is not None else None
            if not mass.size and dpart is None:
                c.problems.append("[initial_measure] initial measure is identically zero")
            else:
                measure = FiniteMeasure(pos, mass, dpart)

    kind = cp.get("test_function", "kind", fallback="constant").strip()
    tf = None
    if kind == "constant":
        v = c.get("test_function", "value", float)
        if v is not None:
            c.check(v >= 0, "[test_function] value must be >= 0")
            tf = TestFunction(v, 0.0, (0.0,) * (dim or 1), 1.0) if v >= 0 else None
    elif kind == "bump":
        base = c.get("test_function", "base", float)
        amp = c.get("test_function", "amp", float)
        center = c.get("test_function", "center", _floats)
        sigma = c.get("test_function", "sigma", float)
        if None not in (base, amp, center, sigma):
            if dim in (1, 2) and len(center) != dim:
                c.problems.append(f"[test_function] center must have {dim} coordinate(s)")
            else:
                try:
                    tf = TestFunction(base, amp, center, sigma)
                except ConfigurationError as exc:
                    c.problems.append(f"[test_function] {exc}")
    else:
        c.problems.append(f"[test_function] kind must be constant or bump, got {kind!r}")

    out_dir = cp.get("output", "directory", fallback="").strip() or os.environ.get(OUT_ENV, "") or "superbm_out"
    formats = tuple(s.strip() for s in cp.get("output", "formats").split(",") if s.strip())
    bad = [f for f in formats if f not in ("csv", "json")]
    c.check(not bad, f"[output] unknown formats {bad}")
    msp = c.get("output", "max_snapshot_paths", _int)
    ns = c.get("density", "ns", lambda s: tuple(_int(x) for x in _floats(s)))
    if ns is not None:
        c.check(all(n >= 1 for n in ns) and len(ns) > 0, "[density] ns must be positive integers")
    dt_ = c.get("density", "t", float, optional=True)
    if dt_ is None:
        dt_ = snaps[-1] if snaps else horizon
    crit = cp.get("validate", "criteria").strip()
    criteria = tuple(range(1, 11)) if crit == "all" else c.get("validate", "criteria",
                                                                 lambda s: tuple(_int(x) for x in _floats(s)))
    if criteria:
        c.check(all(1 <= k <= 10 for k in criteria), "[validate] criteria must be in 1..10")
    profile = cp.get("validate", "profile").strip()
    c.check(profile in ("full", "quick"), f"[validate] profile must be full or quick, got {profile!r}")
    vseed = c.get("validate", "seed", _int)
    tscale = c.get("validate", "tolerance_scale", float)
    if tscale is not None:
        c.check(tscale >= 1.0, "[validate] tolerance_scale must be >= 1")

    if c.problems:
        raise ConfigurationError(f"{len(c.problems)} configuration problem(s):\n  " + "\n  ".join(c.problems),
                                 c.problems)
    raw = {sec: dict(cp[sec]) for sec in DEFAULTS}
    raw["output"]["directory"] = out_dir
    return ExperimentConfig(params, dim, grid, picard, psi, sim, measure, function_ic, tf, tuple(snaps), thr,
                            out_dir, formats, msp, ns, dt_, criteria, profile, vseed, raw, tscale)
