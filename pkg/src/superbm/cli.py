"""Command-line runner: ``superbm {solve,simulate,explosion,density,validate}``.

Exit codes: 0 success, 1 failed criterion, 2 configuration error, 3 solver non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .config import OUT_ENV, ExperimentConfig, load_config, reference_text
from .density import Mollifier, abs_continuity_diagnostic, density_field
from .errors import ConfigurationError, ConvergenceError, DomainError
from .explosion import ExplosionLaw
from .heatkernel import FiniteMeasure, set_fft_workers
from .loglaplace import PicardConfig, check_bounds, laplace_functional, solve, solve_function_ic
from .particles import (
    explosion_times,
    laplace_samples,
    mean_se,
    particle_laplace_functional,
    rng_for,
    simulate_many,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _num(x):
    """Floats as 17-significant-digit decimal strings survive any JSON reader unchanged."""
    return float(f"{x:.17g}") if isinstance(x, (float, np.floating)) else x


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return _num(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return obj


class Writer:
    """Output files for one command, each stamped with the resolved config and its hash."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.dir = cfg.out_dir
        self.written: list = []

    def _path(self, name):
        os.makedirs(self.dir, exist_ok=True)
        p = os.path.join(self.dir, name)
        self.written.append(p)
        return p

    def header(self) -> list:
        return [f"superbm {__version__} {self.command}"] + self.cfg.provenance_lines()

    def provenance(self) -> dict:
        return {"command": self.command, "version": __version__, "config_sha256": self.cfg.content_hash(),
                "config": self.cfg.resolved()}

    def json(self, name, payload: dict):
        with open(self._path(name), "w") as fh:
            json.dump(_clean({"provenance": self.provenance(), **payload}), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def csv(self, name, columns, rows):
        with open(self._path(name), "w", newline="") as fh:
            for line in self.header():
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(columns)
            for r in rows:
                w.writerow([f"{v:.17g}" if isinstance(v, (float, np.floating)) else v for v in r])

    def npz(self, name, **arrays):
        np.savez_compressed(self._path(name), config_sha256=np.array(self.cfg.content_hash()), **arrays)


def _want(cfg, fmt):
    return fmt in cfg.formats


def _measure(cfg: ExperimentConfig) -> FiniteMeasure:
    if cfg.measure is None:
        raise ConfigurationError("this command needs a finite initial measure, not a constant density",
                                 ["[initial_measure] constant density has infinite mass"])
    return cfg.measure


def _atomic(cfg: ExperimentConfig) -> FiniteMeasure:
    mu = _measure(cfg)
    if mu.density is not None:
        raise ConfigurationError("particle simulation needs an atomic initial measure",
                                 ["[initial_measure] density must be none for simulate and density"])
    return mu


# -- commands ---------------------------------------------------------------------------


def cmd_solve(cfg: ExperimentConfig, out: Writer) -> int:
    try:
        if cfg.function_ic is not None:
            sol = solve_function_ic(cfg.function_ic, cfg.picard, cfg.grid, cfg.psi)
            mu = None
        else:
            mu = _measure(cfg)
            sol = solve(mu, cfg.picard, cfg.grid, cfg.psi)
    except ConvergenceError as exc:
        out.json("solve_convergence.json", {"converged": False, "message": str(exc),
                                            "sup_diffs": list(exc.sup_diffs)})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    summary = {"converged": sol.converged, "iter_count": sol.iter_count, "sup_diffs": list(sol.sup_diffs),
               "min_increments": list(sol.min_increments), "times": list(sol.times),
               "final_max": sol.final.max(), "final_min": float(sol.final.values.min())}
    if sol.spec.dim == 1:
        summary["final_at_origin"] = float(sol.final.interpolate([0.0])[0])
    if mu is not None and cfg.psi.kind == "power_gamma" and not cfg.psi.damping and cfg.psi.coefficient == 1.0:
        summary["bounds"] = check_bounds(sol, mu).as_dict()
    if mu is not None:
        summary["laplace_functional"] = laplace_functional(mu, sol)
    if _want(cfg, "csv"):
        sol.to_csv(out._path("solve_slices.csv"), out.header())
    if _want(cfg, "json"):
        out.json("solve_summary.json", summary)
    print(f"solve: {sol.iter_count} iterations, final sup diff {sol.sup_diffs[-1]:.3e}, "
          f"final max {summary['final_max']:.10g}")
    return EXIT_OK


def _snapshot_rows(paths, dim):
    for p in paths:
        for t, x in zip(p.snapshot_times, p.snapshots):
            if x is None or x.shape[0] == 0:
                continue
            u, cnt = np.unique(x, axis=0, return_counts=True)
            for pos, c in zip(u, cnt):
                yield (p.replicate, float(t), *map(float, pos[:dim]), int(c))


def cmd_simulate(cfg: ExperimentConfig, out: Writer, threads: int) -> int:
    mu = _atomic(cfg)
    sim = cfg.sim
    times = cfg.snapshot_times
    tf = cfg.test_function
    batch = 500
    kept, T, lap = [], [], {t: [] for t in times}
    crossings = []
    for b in range(0, sim.replicates, batch):
        paths = simulate_many(mu, sim, times, watch=tf if cfg.threshold else None, threshold=cfg.threshold,
                              start=b, count=min(batch, sim.replicates - b), threads=threads)
        T.append(explosion_times(paths))
        for t in times:
            lap[t].append(laplace_samples(paths, tf, t))
        if cfg.threshold:
            crossings += [(p.replicate, p.mass_crossing, p.f_crossing) for p in paths]
        kept += paths[: max(0, cfg.max_snapshot_paths - len(kept))]
    T = np.concatenate(T)
    exploded = np.isfinite(T)
    frac = float(exploded.mean())
    se = math.sqrt(max(frac * (1 - frac), 1e-300) / T.size)
    law = ExplosionLaw(mu.total_mass, cfg.params)
    summary = {"replicates": int(T.size), "horizon": sim.horizon, "particle_mass": sim.particle_mass,
               "branch_rate": sim.branch_rate, "explosion_fraction": frac, "explosion_fraction_se": se,
               "explosion_fraction_exact": law.cdf(sim.horizon), "n_exploded": int(exploded.sum()),
               "bias_scale": sim.particle_mass ** (1 - cfg.params.gamma), "laplace": []}
    for t in times:
        m, s = mean_se(np.concatenate(lap[t]))
        summary["laplace"].append({"t": t, "estimate": m, "se": s})
    if exploded.all():
        print("warning: every path reached the mass cap before the horizon", file=sys.stderr)
    if _want(cfg, "json"):
        out.json("simulate_summary.json", summary)
    if _want(cfg, "csv"):
        dim = cfg.dim
        cols = ["replicate", "time", "x"] + (["y"] if dim == 2 else []) + ["count"]
        out.csv("simulate_snapshots.csv", cols, _snapshot_rows(kept, dim))
        out.csv("simulate_explosions.csv", ["replicate", "explosion_time"],
                ((i, float(t)) for i, t in enumerate(T)))
        if cfg.threshold:
            out.csv("simulate_crossings.csv", ["replicate", "mass_crossing", "f_crossing"],
                    ((r, float(a) if a is not None else math.inf, float(c) if c is not None else math.inf)
                     for r, a, c in crossings))
    trace = {"explosion_times": T}
    for p in kept:
        trace[f"events_{p.replicate}"] = np.stack([np.asarray(p.event_times, float),
                                                   np.asarray(p.event_counts, float)])
    out.npz("simulate_trace.npz", **trace)
    print(f"simulate: {T.size} replicates, exploded fraction {frac:.4f} +- {se:.4f} "
          f"(limit law {summary['explosion_fraction_exact']:.4f})")
    return EXIT_OK


def cmd_explosion(cfg: ExperimentConfig, out: Writer) -> int:
    mass = cfg.measure.total_mass if cfg.measure is not None else None
    if mass is None:
        raise ConfigurationError("explosion law needs a finite initial measure",
                                 ["[initial_measure] constant density has infinite mass"])
    law = ExplosionLaw(mass, cfg.params)
    ts = np.linspace(0.0, cfg.sim.horizon, 101)
    rng = rng_for(cfg.sim.seed, 0)
    draws = law.draw(rng, cfg.sim.replicates)
    if _want(cfg, "csv"):
        out.csv("explosion_cdf.csv", ["t", "cdf", "survival"],
                ((float(t), float(law.cdf(t)), float(law.survival(t))) for t in ts))
        out.csv("explosion_samples.csv", ["sample", "explosion_time"], ((i, float(x)) for i, x in enumerate(draws)))
    if _want(cfg, "json"):
        out.json("explosion.json", {"total_mass": mass, "gamma": cfg.params.gamma,
                                    "cdf": {"t": ts, "cdf": law.cdf(ts)}, "samples": draws})
    print(f"explosion: total mass {mass:.6g}, P(T <= {cfg.sim.horizon:g}) = {law.cdf(cfg.sim.horizon):.6f}")
    return EXIT_OK


def cmd_density(cfg: ExperimentConfig, out: Writer, threads: int) -> int:
    mu = _atomic(cfg)
    t = cfg.density_t
    sim = cfg.sim
    if not 0 < t <= sim.horizon:
        raise ConfigurationError("density time outside (0, horizon]", ["[density] t must lie in (0, horizon]"])
    paths = simulate_many(mu, sim, (t,), threads=threads)
    f = cfg.test_function.on_grid(cfg.grid)
    try:
        pcfg = PicardConfig(cfg.params, t, cfg.picard.time_steps, None, cfg.picard.tol, cfg.picard.max_iters)
        pde = solve_function_ic(f, pcfg, cfg.grid)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    bias = abs(particle_laplace_functional(mu, cfg.test_function, t, sim, cfg.grid) - laplace_functional(mu, pde))
    rep = abs_continuity_diagnostic(paths, f, t, mu, pde, cfg.density_ns, model_bias=bias)
    if _want(cfg, "csv"):
        first = next((p for p in paths if p.snapshot_at(t) is not None), None)

        def rows():
            if first is None:
                return
            for n in cfg.density_ns:
                fld = density_field(first.snapshot_at(t), cfg.grid, Mollifier(n, cfg.dim), sim.particle_mass)
                pts = cfg.grid.nodes.reshape(-1, cfg.dim)
                for k, (pt, v) in enumerate(zip(pts, fld.values.ravel())):
                    yield (n, first.replicate, k, *map(float, pt), float(v))

        cols = ["n", "replicate", "node", "x"] + (["y"] if cfg.dim == 2 else []) + ["density"]
        out.csv("density_field.csv", cols, rows())
    if _want(cfg, "json"):
        out.json("density_report.json", rep.as_dict())
    print(f"density: PDE {rep.pde_value:.6f}; " + ", ".join(
        f"n={n}: {e:.6f}+-{s:.6f}" for n, e, s in zip(rep.ns, rep.estimates, rep.std_errors))
        + f"; {'pass' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_validate(cfg: ExperimentConfig, out: Writer, threads: int, criteria=None) -> int:
    from .validate import Settings, Suite

    kw = dict(gamma=cfg.params.gamma, seed=cfg.validate_seed, threads=threads, tol_scale=cfg.tol_scale)
    settings = Settings.quick(**kw) if cfg.profile == "quick" else Settings(**kw)
    suite = Suite(settings)
    try:
        results = suite.run_all(criteria or cfg.criteria, echo=print)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    ok = all(r.passed for r in results)
    out.json("validate_report.json", {"passed": ok, "profile": settings.profile, "gamma": settings.gamma,
                                      "criteria": [r.as_dict() for r in results]})
    print(f"validate: {sum(r.passed for r in results)}/{len(results)} criteria passed")
    return EXIT_OK if ok else EXIT_FAIL


# -- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="superbm", description="Numerics for gamma-stable super-Brownian motion.")
    ap.add_argument("--version", action="version", version=f"superbm {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in [("solve", "solve the log-Laplace equation"),
                        ("simulate", "simulate the branching particle system"),
                        ("explosion", "tabulate and sample the explosion-time law"),
                        ("density", "mollified density fields and the Laplace diagnostic"),
                        ("validate", "run the acceptance criteria"),
                        ("config-reference", "print every config key with its default")]:
        p = sub.add_parser(name, help=help_)
        if name == "config-reference":
            continue
        p.add_argument("--config", metavar="PATH", help="INI experiment file")
        p.add_argument("--seed", type=int, help="override [simulation] seed and [validate] seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads for replicates and FFTs")
        p.add_argument("--out", metavar="DIR", help=f"output directory (default: config, then ${OUT_ENV})")
        p.add_argument("--format", choices=("csv", "json"), help="write only this format")
        if name == "validate":
            p.add_argument("--criteria", help="comma-separated criterion numbers (default: all)")
            p.add_argument("--quick", action="store_true", help="use the reduced-replicate profile")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "config-reference":
        sys.stdout.write(reference_text())
        return EXIT_OK
    overrides = {}
    if args.seed is not None:
        overrides[("simulation", "seed")] = args.seed
        overrides[("validate", "seed")] = args.seed
    if args.out:
        overrides[("output", "directory")] = args.out
    if args.format:
        overrides[("output", "formats")] = args.format
    if getattr(args, "criteria", None):
        overrides[("validate", "criteria")] = args.criteria
    if getattr(args, "quick", False):
        overrides[("validate", "profile")] = "quick"
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, overrides)
        set_fft_workers(args.threads)
        out = Writer(cfg, args.command)
        if args.command == "solve":
            return cmd_solve(cfg, out)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, args.threads)
        if args.command == "explosion":
            return cmd_explosion(cfg, out)
        if args.command == "density":
            return cmd_density(cfg, out, args.threads)
        return cmd_validate(cfg, out, args.threads)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        for p in getattr(exc, "problems", None) or []:
            if p not in str(exc):
                print(f"  - {p}", file=sys.stderr)
        return EXIT_CONFIG
    except DomainError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
