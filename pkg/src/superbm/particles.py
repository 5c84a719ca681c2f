"""Branching Brownian particles with Sibuya(gamma) offspring.

Each particle carries mass ``eps``, moves as a Brownian motion sampled on a
time step ``dt`` and, in every step, branches with probability
``1 - exp(-beta dt)`` into a Sibuya(gamma) number of children at its
position.  With ``beta = eps^{1-gamma}`` the Laplace functional of the
particle measure solves

    dV/dt = 1/2 Lap V + beta eps^{gamma-1} V^gamma - beta V,
    V(0) = (1 - exp(-eps f)) / eps,

which tends to the log-Laplace equation of the gamma-stable superprocess as
``eps -> 0``; :func:`particle_laplace_functional` evaluates the finite-eps
value so the small-mass bias can be reported next to every comparison.

Implementation notes.  Steps without any branching event are skipped with a
geometric draw (the per-step model is memoryless), and positions are updated
lazily: a particle stores the step of its last update and receives one
Gaussian increment of variance ``(steps elapsed) * dt`` when it branches or
when a snapshot is taken.  Both are exact in distribution for the per-step
scheme.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ConfigurationError, DomainError
from .heatkernel import FiniteMeasure, GridField, GridSpec
from .loglaplace import GammaParams, NonlinearitySpec, PicardConfig, solve_function_ic

SIBUYA_TABLE = 64
_MAX_L = 1 << 62

# indices into the integer state vector of the kernel
_N, _STEP, _STAMP, _EXPL, _EXPL_STEP, _CROSS1, _CROSSF, _NEV = range(8)


def sibuya_survival(k, gamma: float):
    """``P(L > k) = prod_{i<=k} (1 - gamma/i)`` computed through log-gamma."""
    from scipy.special import gammaln

    k = np.asarray(k, dtype=float)
    return np.exp(gammaln(k + 1 - gamma) - gammaln(1 - gamma) - gammaln(k + 1))


def sibuya_pmf(k, gamma: float):
    k = np.asarray(k, dtype=float)
    return sibuya_survival(k - 1, gamma) * gamma / k


def _sibuya_table(gamma: float):
    s = np.ones(SIBUYA_TABLE + 1)
    for i in range(1, SIBUYA_TABLE + 1):
        s[i] = s[i - 1] * (1.0 - gamma / i)
    return s, s[SIBUYA_TABLE] * SIBUYA_TABLE**gamma


@njit(cache=True, nogil=True)
def _sibuya(rng, gamma, surv, tail_c):
    u = 1.0 - rng.random()  # in (0, 1]
    k = 1
    while k <= SIBUYA_TABLE and u <= surv[k]:
        k += 1
    if k <= SIBUYA_TABLE:
        return k
    # Pareto tail C k^{-gamma}, continuous with the table at k = 64
    x = (tail_c / u) ** (1.0 / gamma)
    if x >= 4.0e18:
        return _MAX_L
    return np.int64(x) + 1


@njit(cache=True, nogil=True)
def _sibuya_batch(rng, gamma, surv, tail_c, size):
    out = np.empty(size, dtype=np.int64)
    for i in range(size):
        out[i] = _sibuya(rng, gamma, surv, tail_c)
    return out


@njit(cache=True, nogil=True)
def _sibuya_sum(rng, k, gamma, surv, tail_c, limit):
    """Sum of ``k`` Sibuya variates minus ``k``; returns -1 once it reaches ``limit``.

    The table part is drawn as a multinomial through conditional binomials and
    only the tail draws are generated one by one.
    """
    s64 = surv[SIBUYA_TABLE]
    m_tail = rng.binomial(k, s64)
    rest = k - m_tail
    added = 0
    mass = 1.0 - s64
    for j in range(1, SIBUYA_TABLE + 1):
        if rest == 0:
            break
        pj = surv[j - 1] - surv[j]
        if j == SIBUYA_TABLE or pj >= mass:
            mj = rest
        else:
            mj = rng.binomial(rest, pj / mass)
        added += (j - 1) * mj
        rest -= mj
        mass -= pj
    if added >= limit:
        return -1
    inv_g = 1.0 / gamma
    for _ in range(m_tail):
        u = s64 * (1.0 - rng.random())
        x = (tail_c / u) ** inv_g
        if x >= 4.0e18:
            return -1
        L = np.int64(x) + 1
        if L - 1 >= limit - added:
            return -1
        added += L - 1
    return added


def sample_sibuya(params: GammaParams, rng: np.random.Generator, size=None):
    """Sibuya(gamma) variates: ``P(L > k) = prod_{i=1}^k (1 - gamma/i)``."""
    surv, c = _sibuya_table(params.gamma)
    n = 1 if size is None else int(np.prod(size))
    out = _sibuya_batch(rng, params.gamma, surv, c, n)
    return int(out[0]) if size is None else out.reshape(size)


@njit(cache=True, nogil=True)
def _sync(rng, pos, last, n, step, dt):
    d = pos.shape[1]
    for i in range(n):
        el = step - last[i]
        if el > 0:
            sd = math.sqrt(el * dt)
            for a in range(d):
                pos[i, a] += sd * rng.standard_normal()
            last[i] = step


@njit(cache=True, nogil=True)
def _pairing(pos, n, eps, fb, fa, fc, fs):
    d = pos.shape[1]
    tot = 0.0
    inv = 1.0 / (2.0 * fs * fs)
    for i in range(n):
        r2 = 0.0
        for a in range(d):
            z = pos[i, a] - fc[a]
            r2 += z * z
        tot += fb + fa * math.exp(-r2 * inv)
    return eps * tot


@njit(cache=True, nogil=True)
def _grow(pos, last, marks, need):
    cap = pos.shape[0]
    new_cap = max(2 * cap, need)
    p2 = np.empty((new_cap, pos.shape[1]))
    l2 = np.empty(new_cap, dtype=np.int64)
    m2 = np.zeros(new_cap, dtype=np.int64)
    p2[:cap] = pos
    l2[:cap] = last
    m2[:cap] = marks
    return p2, l2, m2


@njit(cache=True, nogil=True)
def _advance(rng, pos, last, marks, ev, st, stop_step, p, dt, gamma, surv, tail_c, n_max,
             track, thr_count, watch, win_count, fb, fa, fc, fs, fthr, eps):
    """Run the per-step scheme from ``st[_STEP]`` up to ``stop_step`` (or explosion)."""
    n = st[_N]
    step = st[_STEP]
    log1mp = math.log1p(-p) if p < 1.0 else -np.inf
    while step < stop_step:
        if p <= 0.0:
            step = stop_step
            break
        window = watch and st[_CROSSF] < 0 and n >= win_count
        if window:
            e = step + 1
            k_br = rng.binomial(n, p)
        else:
            # skip the steps without any branching
            logq1 = n * log1mp
            q = -math.expm1(logq1)
            g = 1
            if q < 1.0:
                u = 1.0 - rng.random()
                g = max(1, int(math.ceil(math.log(u) / logq1)))
            if step + g > stop_step:
                step = stop_step
                break
            e = step + g
            # at least one branching in step e: first brancher J, then the rest
            j = 1
            if q < 1.0:
                u = rng.random()
                j = int(math.ceil(math.log1p(-u * q) / log1mp))
                j = min(max(j, 1), n)
            k_br = 1 + (rng.binomial(n - j, p) if n - j > 0 else 0)
        step = e
        if k_br > 0:
            offs = np.empty(k_br if track else 0, dtype=np.int64)
            added = 0
            boom = False
            if not track and k_br >= 64:
                added = _sibuya_sum(rng, k_br, gamma, surv, tail_c, n_max - n)
                boom = added < 0
                k_loop = 0
            else:
                k_loop = k_br
            for b in range(k_loop):
                L = _sibuya(rng, gamma, surv, tail_c)
                if L - 1 >= n_max - n - added:
                    boom = True
                    break
                if track:
                    offs[b] = L
                added += L - 1
            if boom:
                st[_EXPL] = 1
                st[_EXPL_STEP] = e
                if st[_CROSS1] < 0:
                    st[_CROSS1] = e
                if st[_CROSSF] < 0:
                    st[_CROSSF] = e
                break
            if track and added > 0:
                if n + added > pos.shape[0]:
                    pos, last, marks = _grow(pos, last, marks, n + added)
                # Floyd's sampling of k_br distinct parents, marked with a fresh stamp
                st[_STAMP] += 1
                stamp = st[_STAMP]
                parents = np.empty(k_br, dtype=np.int64)
                c = 0
                for jj in range(n - k_br, n):
                    t = int(rng.random() * (jj + 1))
                    if t > jj:
                        t = jj
                    if marks[t] == stamp:
                        t = jj
                    marks[t] = stamp
                    parents[c] = t
                    c += 1
                d = pos.shape[1]
                nxt = n
                for b in range(k_br):
                    i = parents[b]
                    el = e - last[i]
                    if el > 0:
                        sd = math.sqrt(el * dt)
                        for a in range(d):
                            pos[i, a] += sd * rng.standard_normal()
                        last[i] = e
                    for _ in range(offs[b] - 1):
                        for a in range(d):
                            pos[nxt, a] = pos[i, a]
                        last[nxt] = e
                        marks[nxt] = 0
                        nxt += 1
            n += added
            if added > 0:
                k = st[_NEV]
                if k >= ev.shape[0]:
                    ev2 = np.empty((2 * ev.shape[0], 2), dtype=np.int64)
                    ev2[:k] = ev[:k]
                    ev = ev2
                ev[k, 0] = e
                ev[k, 1] = n
                st[_NEV] = k + 1
            if n >= thr_count:
                if st[_CROSS1] < 0:
                    st[_CROSS1] = e
                if st[_CROSSF] < 0:
                    st[_CROSSF] = e
        if watch and st[_CROSSF] < 0 and n >= win_count:
            _sync(rng, pos, last, n, e, dt)
            if _pairing(pos, n, eps, fb, fa, fc, fs) >= fthr:
                st[_CROSSF] = e
    st[_N] = n
    st[_STEP] = step
    return pos, last, marks, ev


@dataclass(frozen=True)
class TestFunction:
    """``base + amp * exp(-|x - center|^2 / (2 sigma^2))``."""

    base: float = 1.0
    amp: float = 0.0
    center: tuple = (0.0,)
    sigma: float = 1.0

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.base < 0 or self.amp < 0 or self.sigma <= 0:
            raise ConfigurationError("test function needs base >= 0, amp >= 0, sigma > 0")
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def inf(self) -> float:
        return self.base

    @property
    def sup(self) -> float:
        return self.base + self.amp

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        c = np.asarray(self.center)
        if self.dim == 1:
            r2 = (x.reshape(x.shape[:-1] if x.ndim > 1 and x.shape[-1] == 1 else x.shape) - c[0]) ** 2
        else:
            r2 = np.sum((x - c) ** 2, axis=-1)
        return self.base + self.amp * np.exp(-r2 / (2 * self.sigma**2))

    def on_grid(self, spec: GridSpec) -> GridField:
        return GridField(spec, self(spec.nodes))


@dataclass(frozen=True)
class SimConfig:
    params: GammaParams
    particle_mass: float
    horizon: float
    motion_dt: float = 1e-3
    branch_rate: float | None = None
    n_max: int | None = None
    cap_mass_factor: float = 1e3
    seed: int = 0
    replicates: int = 1
    track_positions: bool = True
    threads: int = 1

    def __post_init__(self):
        problems = []
        eps = self.particle_mass
        if not eps > 0:
            problems.append(f"particle mass must be positive, got {eps}")
        if self.branch_rate is None and eps > 0:
            object.__setattr__(self, "branch_rate", eps ** (1 - self.params.gamma))
        if self.branch_rate is not None and self.branch_rate < 0:
            problems.append(f"branch rate must be >= 0, got {self.branch_rate}")
        if not self.horizon > 0:
            problems.append(f"horizon must be positive, got {self.horizon}")
        if not self.motion_dt > 0:
            problems.append(f"motion_dt must be positive, got {self.motion_dt}")
        elif self.branch_rate and self.motion_dt > 1.0 / (10.0 * self.branch_rate) * (1 + 1e-12):
            problems.append(f"motion_dt={self.motion_dt} exceeds 1/(10 beta)={1 / (10 * self.branch_rate):.4g}")
        if self.n_max is not None and self.n_max < 1:
            problems.append("n_max must be positive")
        if not self.cap_mass_factor > 0:
            problems.append("cap_mass_factor must be positive")
        if self.replicates < 1:
            problems.append("replicates must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            problems.append("seed must be a 64-bit unsigned integer")
        if problems:
            raise ConfigurationError("; ".join(problems), problems)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.motion_dt))

    @property
    def branch_prob(self) -> float:
        return -math.expm1(-self.branch_rate * self.motion_dt)

    @property
    def scaling(self) -> float:
        """``beta * eps^{gamma - 1}``, the coefficient of ``V^gamma`` in the limit equation."""
        return self.branch_rate * self.particle_mass ** (self.params.gamma - 1)

    def cap(self, initial_count: int) -> int:
        if self.n_max is not None:
            return int(self.n_max)
        return int(math.ceil(self.cap_mass_factor * initial_count))

    def step_of(self, t: float) -> int:
        k = t / self.motion_dt
        r = int(round(k))
        if abs(k - r) > 1e-6 * max(1.0, k):
            raise DomainError(f"time {t} is not a multiple of motion_dt={self.motion_dt}")
        return r


def rng_for(seed: int, replicate: int) -> np.random.Generator:
    """Counter-based Philox stream owned by one replicate."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(replicate),))))


@dataclass
class ParticlePath:
    snapshot_times: list
    snapshots: list
    exploded: bool
    explosion_time: float | None
    particle_mass: float
    initial_count: int
    event_times: np.ndarray = field(repr=False, default=None)
    event_counts: np.ndarray = field(repr=False, default=None)
    mass_crossing: float | None = None
    f_crossing: float | None = None
    replicate: int = 0
    motion_dt: float = 0.0
    gamma: float = 0.0

    @property
    def snapshot_counts(self) -> list:
        return [s.shape[0] for s in self.snapshots]

    def mass_at(self, t: float) -> float:
        """Total mass at time ``t`` (``inf`` once exploded)."""
        if self.exploded and t >= self.explosion_time:
            return math.inf
        k = np.searchsorted(self.event_times, t * (1 + 1e-12), side="right")
        cnt = self.initial_count if k == 0 else int(self.event_counts[k - 1])
        return cnt * self.particle_mass

    def snapshot_at(self, t: float):
        for s, x in zip(self.snapshot_times, self.snapshots):
            if math.isclose(s, t, rel_tol=1e-9, abs_tol=1e-12):
                return x
        return None


def initial_positions(x0: FiniteMeasure, eps: float) -> np.ndarray:
    """``ceil(m_a / eps)`` particles at every atom ``a``."""
    if x0.density is not None:
        raise DomainError("particle systems start from atomic measures")
    if x0.n_atoms == 0:
        raise DomainError("initial measure has no atoms")
    counts = np.ceil(x0.masses / eps * (1 - 1e-12)).astype(np.int64)
    return np.repeat(x0.positions, counts, axis=0)


def simulate(x0: FiniteMeasure, cfg: SimConfig, rng: np.random.Generator, snapshot_times=(),
             watch: TestFunction | None = None, threshold: float | None = None, replicate: int = 0) -> ParticlePath:
    """One path of the particle system up to ``cfg.horizon`` or explosion.

    ``watch``/``threshold`` request the first times ``<X_t, 1> >= threshold``
    and ``<X_t, f> >= threshold * inf f``.
    """
    eps = cfg.particle_mass
    init = initial_positions(x0, eps)
    n0 = init.shape[0]
    dim = init.shape[1]
    n_max = cfg.cap(n0)
    n_steps = cfg.n_steps
    snap_steps = sorted({cfg.step_of(t) for t in snapshot_times})
    if snap_steps and snap_steps[-1] > n_steps:
        raise DomainError("snapshot times beyond the horizon")
    surv, tail_c = _sibuya_table(cfg.params.gamma)

    watch_on = watch is not None
    if watch_on:
        if threshold is None or not threshold > 0:
            raise DomainError("a positive threshold is needed with a watched test function")
        if watch.inf <= 0:
            raise DomainError("watched test function must be bounded below by a positive constant")
        if watch.dim != dim:
            raise ConfigurationError("watched test function has the wrong dimension")
        fb, fa, fs = watch.base, watch.amp, watch.sigma
        fc = np.asarray(watch.center, dtype=float)
        fthr = threshold * watch.inf
        win_count = int(math.ceil(threshold * watch.inf / watch.sup / eps * (1 - 1e-12)))
    else:
        fb, fa, fs, fc, fthr, win_count = 1.0, 0.0, 1.0, np.zeros(dim), 0.0, 0
    thr_count = float(math.ceil(threshold / eps * (1 - 1e-12))) if threshold else float("inf")

    track = cfg.track_positions or watch_on or bool(snap_steps)
    cap0 = max(16, 2 * n0)
    pos = np.empty((cap0, dim)) if track else np.empty((1, dim))
    if track:
        pos[:n0] = init
    last = np.zeros(cap0 if track else 1, dtype=np.int64)
    marks = np.zeros_like(last)
    ev = np.empty((64, 2), dtype=np.int64)
    st = np.array([n0, 0, 0, 0, -1, -1, -1, 0], dtype=np.int64)
    if watch_on and threshold <= n0 * eps:
        st[_CROSS1] = 0
    if watch_on and n0 >= win_count and float(np.sum(watch(init))) * eps >= fthr:
        st[_CROSSF] = 0

    snaps_t, snaps = [], []
    stops = snap_steps + [n_steps]
    if n0 >= n_max:
        # the cap is already reached by the initial configuration
        st[_EXPL] = 1
        st[_EXPL_STEP] = 0
        stops = []
    for stop in stops:
        pending = watch_on and st[_CROSSF] < 0
        tracking = track and (pending or len(snaps) < len(snap_steps))
        if track and not tracking and pos.shape[0] > 1:
            # nothing left needs positions: continue as a pure counting process
            pos = np.empty((1, dim))
            last = np.zeros(1, dtype=np.int64)
            marks = np.zeros(1, dtype=np.int64)
        pos, last, marks, ev = _advance(rng, pos, last, marks, ev, st, stop, cfg.branch_prob, cfg.motion_dt,
                                        cfg.params.gamma, surv, tail_c, n_max, tracking, thr_count,
                                        watch_on, win_count, fb, fa, fc, fs, fthr, eps)
        if st[_EXPL]:
            break
        if stop in snap_steps and len(snaps) < len(snap_steps):
            _sync(rng, pos, last, st[_N], stop, cfg.motion_dt)
            snaps_t.append(stop * cfg.motion_dt)
            snaps.append(pos[:st[_N]].copy())

    dt = cfg.motion_dt
    nev = st[_NEV]
    return ParticlePath(
        snapshot_times=snaps_t,
        snapshots=snaps,
        exploded=bool(st[_EXPL]),
        explosion_time=float(st[_EXPL_STEP] * dt) if st[_EXPL] else None,
        particle_mass=eps,
        initial_count=n0,
        event_times=ev[:nev, 0] * dt,
        event_counts=ev[:nev, 1].copy(),
        mass_crossing=float(st[_CROSS1] * dt) if st[_CROSS1] >= 0 else None,
        f_crossing=float(st[_CROSSF] * dt) if st[_CROSSF] >= 0 else None,
        replicate=replicate,
        motion_dt=dt,
        gamma=cfg.params.gamma,
    )


def simulate_many(x0: FiniteMeasure, cfg: SimConfig, snapshot_times=(), watch=None, threshold=None,
                  start: int = 0, count: int | None = None, threads: int | None = None) -> list:
    """Replicates ``start .. start+count-1``, each on its own RNG stream, returned in index order."""
    count = cfg.replicates - start if count is None else count
    idx = range(start, start + count)
    threads = threads or cfg.threads

    def one(r):
        return simulate(x0, cfg, rng_for(cfg.seed, r), snapshot_times, watch, threshold, replicate=r)

    if threads <= 1 or count <= 1:
        return [one(r) for r in idx]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(one, idx))


def explosion_sample(x0: FiniteMeasure, cfg: SimConfig, start: int = 0, count: int | None = None) -> np.ndarray:
    """Explosion times (``inf`` if none by the horizon) of replicates ``start .. start+count-1``.

    Counting-only fast path: identical in law, and replicate by replicate
    identical in value, to ``simulate(..., track_positions=False)``.
    """
    count = cfg.replicates - start if count is None else count
    eps = cfg.particle_mass
    n0 = int(np.sum(np.ceil(x0.masses / eps * (1 - 1e-12))))
    n_max = cfg.cap(n0)
    surv, tail_c = _sibuya_table(cfg.params.gamma)
    n_steps = cfg.n_steps
    dummy = np.empty((1, x0.dim))
    last = np.zeros(1, dtype=np.int64)
    fc = np.zeros(x0.dim)
    out = np.full(count, math.inf)
    if n0 >= n_max:
        return np.zeros(count)
    for k in range(count):
        rng = rng_for(cfg.seed, start + k)
        st = np.array([n0, 0, 0, 0, -1, -1, -1, 0], dtype=np.int64)
        ev = np.empty((64, 2), dtype=np.int64)
        _advance(rng, dummy, last, last, ev, st, n_steps, cfg.branch_prob, cfg.motion_dt, cfg.params.gamma,
                 surv, tail_c, n_max, False, math.inf, False, 0, 1.0, 0.0, fc, 1.0, 0.0, eps)
        if st[_EXPL]:
            out[k] = st[_EXPL_STEP] * cfg.motion_dt
    return out


def _f_values(f, pts: np.ndarray):
    if callable(f) and not isinstance(f, GridField):
        return np.asarray(f(pts if pts.shape[1] > 1 else pts[:, 0]), dtype=float)
    if isinstance(f, GridField):
        return f.interpolate(pts)
    return np.full(pts.shape[0], float(f))


def laplace_samples(paths, f, t: float) -> np.ndarray:
    """Per-path ``1{t < T} exp(-eps sum_i f(xi_i(t)))``."""
    out = np.empty(len(paths))
    for k, p in enumerate(paths):
        if p.exploded and p.explosion_time <= t * (1 + 1e-12):
            out[k] = 0.0
            continue
        x = p.snapshot_at(t)
        if x is None:
            raise DomainError(f"path {p.replicate} has no snapshot at t={t}")
        if x.shape[0] == 0:
            out[k] = 1.0
            continue
        out[k] = math.exp(-p.particle_mass * float(np.sum(_f_values(f, x))))
    return out


def mean_se(samples) -> tuple:
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        raise DomainError("no samples")
    se = float(s.std(ddof=1) / math.sqrt(s.size)) if s.size > 1 else math.inf
    return float(s.mean()), se


def empirical_laplace(paths, f, t: float) -> tuple:
    """Monte Carlo estimate and standard error of ``E[exp(-<X_t, f>); t < T]``."""
    if not paths:
        raise DomainError("empty path list")
    return mean_se(laplace_samples(paths, f, t))


def explosion_times(paths) -> np.ndarray:
    return np.array([p.explosion_time if p.exploded else math.inf for p in paths])


@dataclass
class ExplosionMatchReport:
    passed: bool
    n_exploded: int
    n_agree: int
    agreement: float
    max_gap: float
    tolerance: float
    gaps: np.ndarray = field(repr=False, default=None)

    def as_dict(self) -> dict:
        return {"passed": self.passed, "n_exploded": self.n_exploded, "n_agree": self.n_agree,
                "agreement": self.agreement, "max_gap": self.max_gap, "tolerance": self.tolerance}


def empirical_explosion_match(paths, f: TestFunction | None = None, threshold: float | None = None,
                              min_fraction: float = 0.99) -> ExplosionMatchReport:
    """Compare the threshold crossings of ``<X_t,f>`` and ``<X_t,1>`` on exploded paths.

    Paths must have been simulated with ``watch=f`` and ``threshold``; the
    arguments are accepted for symmetry and only used as a consistency check.
    """
    exploded = [p for p in paths if p.exploded]
    gaps = []
    for p in exploded:
        if p.f_crossing is None or p.mass_crossing is None:
            raise DomainError("paths were simulated without a watched test function")
        gaps.append(abs(p.mass_crossing - p.f_crossing))
    gaps = np.asarray(gaps)
    tol = 2 * _path_dt(paths)
    n_ok = int(np.sum(gaps < tol - 1e-12)) if gaps.size else 0
    frac = n_ok / len(exploded) if exploded else 1.0
    return ExplosionMatchReport(frac >= min_fraction, len(exploded), n_ok, frac,
                                float(gaps.max()) if gaps.size else 0.0, tol, gaps)


def _path_dt(paths) -> float:
    dts = {p.motion_dt for p in paths}
    if len(dts) != 1:
        raise DomainError("paths do not share one motion_dt")
    return dts.pop()


def particle_laplace_constant(a: float, t: float, n_particles: int, cfg: SimConfig) -> float:
    """Exact finite-eps value of ``E[exp(-a <X_t,1>); t < T]``."""
    g = cfg.params.gamma
    eps, beta, b = cfg.particle_mass, cfg.branch_rate, cfg.scaling
    v0 = -math.expm1(-eps * a) / eps
    if beta == 0:
        return math.exp(n_particles * math.log1p(-eps * v0))
    u = (v0 ** (1 - g) + b * math.expm1(beta * (1 - g) * t) / beta) ** (1 / (1 - g))
    v = math.exp(-beta * t) * u
    w = eps * v
    if w >= 1:
        return 0.0
    return math.exp(n_particles * math.log1p(-w))


def particle_laplace_functional(x0: FiniteMeasure, f, t: float, cfg: SimConfig, spec: GridSpec,
                                time_steps: int = 64, tol: float = 1e-10) -> float:
    """Exact finite-eps ``E[exp(-<X_t, f>); t < T]`` through the damped log-Laplace equation."""
    eps = cfg.particle_mass
    fv = f.values if isinstance(f, GridField) else np.asarray(f(spec.nodes), dtype=float)
    v0 = GridField(spec, -np.expm1(-eps * fv) / eps)
    psi = NonlinearitySpec("power_gamma", damping=cfg.branch_rate, coefficient=cfg.scaling)
    pc = PicardConfig(cfg.params, t, time_steps=time_steps, tol=tol)
    sol = solve_function_ic(v0, pc, spec, psi)
    counts = np.ceil(x0.masses / eps * (1 - 1e-12))
    v = sol.final.interpolate(x0.positions)
    w = eps * v
    if np.any(w >= 1):
        return 0.0
    return float(math.exp(np.sum(counts * np.log1p(-w))))
