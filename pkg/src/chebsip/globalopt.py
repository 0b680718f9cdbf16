"""Derivative-free global maximization over a box.

Three interchangeable strategies: differential evolution (rand-to-best/1
with exponential crossover), simulated annealing with geometric cooling,
and multistart Nelder-Mead from a scrambled low-discrepancy sequence.
All strategies are deterministic given the seed, clip iterates to the box,
and share one reporting format with a monotone best-value history.

A value of -inf marks an infeasible point; such evaluations rank strictly
below every finite value and never enter the reported optimum unless every
evaluation was infeasible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import qmc

from .core import BoxDomain

__all__ = ["GlobalConfig", "GlobalResult", "maximize_box", "maximize_with_restarts"]


@dataclass(frozen=True)
class GlobalConfig:
    """Strategy selection and budgets for ``maximize_box``.

    ``init_points`` seeds the initial population / start list with known
    promising points (clipped to the box); they count toward the budget.
    """

    strategy: str = "de"  # "de" | "sa" | "nm"
    seed: int = 0
    population: int = 32
    max_evals: int = 4000
    # differential evolution
    de_mutation: float = 0.7
    de_crossover: float = 0.9
    # simulated annealing
    sa_t0: float = 1.0
    sa_cooling: float = 0.95
    sa_steps_per_temp: int = 20
    sa_sigma_frac: float = 0.1
    # Nelder-Mead multistart
    nm_restarts: int = 8
    nm_simplex_frac: float = 0.05
    nm_ftol: float = 1e-12
    nm_xtol: float = 1e-12
    polish: bool = True
    init_points: tuple = ()

    def __post_init__(self):
        if self.strategy not in ("de", "sa", "nm"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "de" and self.population < 4:
            raise ValueError("differential evolution needs population >= 4")
        if self.max_evals < self.population:
            raise ValueError("max_evals must cover at least one population")


@dataclass
class GlobalResult:
    u_star: np.ndarray
    value: float
    evals: int
    history: list = field(default_factory=list)  # (eval_count, best_value)
    restart_values: list = field(default_factory=list)

    def record(self, count, value):
        if not self.history or value > self.history[-1][1]:
            self.history.append((count, value))


class _Tracker:
    """Best-so-far bookkeeping with earlier-evaluation tie breaking."""

    def __init__(self, fn):
        self.fn = fn
        self.count = 0
        self.best_x = None
        self.best_v = -np.inf
        self.history = []

    def __call__(self, x):
        v = float(self.fn(x))
        if np.isnan(v):
            v = -np.inf
        self.count += 1
        if v > self.best_v:
            self.best_v = v
            self.best_x = np.array(x, dtype=float)
            self.history.append((self.count, v))
        return v


def _init_population(box: BoxDomain, n: int, rng, init_points):
    d = box.dim
    seeds = [box.clip(np.asarray(p, dtype=float)) for p in init_points][:n]
    n_rand = n - len(seeds)
    if n_rand > 0:
        if d > 0 and n_rand > 1:
            sampler = qmc.Sobol(d, scramble=True, seed=rng)
            batch = 1 << int(np.ceil(np.log2(n_rand)))
            pts = (box.lower + sampler.random(batch) * box.width)[:n_rand]
        else:
            pts = box.lower + rng.random((n_rand, d)) * box.width
        pop = np.vstack([np.array(seeds).reshape(len(seeds), d), pts]) if seeds else pts
    else:
        pop = np.array(seeds)
    return pop


def maximize_box(f, box: BoxDomain, cfg: GlobalConfig) -> GlobalResult:
    """Maximize ``f`` over ``box`` with the configured strategy.

    Degenerate box dimensions (lower == upper) are held fixed.  Raises
    ``ValueError`` if every evaluation came back -inf.
    """
    rng = np.random.default_rng(cfg.seed)
    tr = _Tracker(f)
    if cfg.strategy == "de":
        _run_de(tr, box, cfg, rng)
    elif cfg.strategy == "sa":
        _run_sa(tr, box, cfg, rng)
    else:
        _run_nm_multistart(tr, box, cfg, rng)
    if cfg.polish and tr.best_x is not None and np.isfinite(tr.best_v):
        _nelder_mead(tr, box, tr.best_x.copy(), 0.02 * np.max(box.width, initial=0.0),
                     max(120, 40 * box.dim), 1e-14, 1e-14)
    if tr.best_x is None or not np.isfinite(tr.best_v):
        raise ValueError("global maximization saw only infeasible (-inf) values")
    return GlobalResult(tr.best_x, tr.best_v, tr.count, tr.history)


def maximize_with_restarts(f, box: BoxDomain, cfg: GlobalConfig, restarts: int) -> GlobalResult:
    """Best of ``restarts`` independent runs with seeds derived from cfg.seed."""
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    seeds = np.random.SeedSequence(cfg.seed).spawn(restarts)
    best = None
    values = []
    total = 0
    history = []
    for ss in seeds:
        sub = replace(cfg, seed=int(ss.generate_state(1)[0]) % (2**31))
        res = maximize_box(f, box, sub)
        values.append(res.value)
        for c, v in res.history:
            history.append((total + c, v))
        total += res.evals
        if best is None or res.value > best.value:
            best = res
    out = GlobalResult(best.u_star, best.value, total, [], values)
    running = -np.inf
    for c, v in history:
        if v > running:
            running = v
            out.history.append((c, v))
    return out


# -- differential evolution -----------------------------------------------------


def _run_de(tr, box, cfg, rng):
    d = box.dim
    np_pop = cfg.population
    pop = _init_population(box, np_pop, rng, cfg.init_points)
    vals = np.array([tr(x) for x in pop])
    width = box.width
    while tr.count + np_pop <= cfg.max_evals:
        ibest = int(np.argmax(vals))
        for i in range(np_pop):
            if tr.count >= cfg.max_evals:
                break
            choices = [j for j in range(np_pop) if j != i]
            r0, r1, r2 = rng.choice(choices, size=3, replace=False)
            # rand-to-best/1
            mutant = pop[r0] + cfg.de_mutation * (pop[ibest] - pop[r0]) + cfg.de_mutation * (
                pop[r1] - pop[r2]
            )
            mutant = box.clip(mutant)
            # exponential crossover: copy a contiguous run of mutant coordinates
            trial = pop[i].copy()
            start = int(rng.integers(d)) if d > 0 else 0
            k = 0
            while k < d:
                j = (start + k) % d
                trial[j] = mutant[j]
                k += 1
                if rng.random() >= cfg.de_crossover:
                    break
            v = tr(trial)
            if v >= vals[i] and np.isfinite(v):
                pop[i] = trial
                vals[i] = v
        if np.max(width, initial=0.0) > 0 and np.all(np.ptp(pop, axis=0) < 1e-14 * np.maximum(width, 1e-300)):
            break  # population collapsed


# -- simulated annealing ----------------------------------------------------------


def _run_sa(tr, box, cfg, rng):
    d = box.dim
    sigma = cfg.sa_sigma_frac * box.width
    starts = _init_population(box, max(1, len(cfg.init_points) or 1), rng, cfg.init_points)
    x = starts[0]
    v = tr(x)
    T = cfg.sa_t0
    while tr.count < cfg.max_evals and T > 1e-12:
        for _ in range(cfg.sa_steps_per_temp):
            if tr.count >= cfg.max_evals:
                break
            prop = box.clip(x + rng.normal(size=d) * sigma)
            pv = tr(prop)
            delta = pv - v
            if delta >= 0 or (np.isfinite(delta) and rng.random() < np.exp(delta / T)):
                x, v = prop, pv
        T *= cfg.sa_cooling


# -- Nelder-Mead -------------------------------------------------------------------


def _run_nm_multistart(tr, box, cfg, rng):
    starts = _init_population(box, cfg.nm_restarts, rng, cfg.init_points)
    budget = max(1, (cfg.max_evals - tr.count) // max(1, len(starts)))
    h = cfg.nm_simplex_frac * float(np.max(box.width, initial=0.0))
    for s in starts:
        if tr.count >= cfg.max_evals:
            break
        _nelder_mead(tr, box, np.asarray(s, dtype=float), h, budget, cfg.nm_ftol, cfg.nm_xtol)


def _nelder_mead(tr, box, x0, h, max_evals, ftol, xtol):
    """Box-clipped Nelder-Mead maximization (standard 1/2/0.5/0.5 coefficients)."""
    d = box.dim
    if d == 0:
        tr(x0)
        return
    free = np.where(box.width > 0)[0]
    if free.size == 0:
        tr(box.clip(x0))
        return
    pts = [box.clip(x0)]
    for j in free:
        p = box.clip(x0.copy())
        step = h if h > 0 else 0.05 * max(box.width[j], 1.0)
        p[j] = p[j] + step if p[j] + step <= box.upper[j] else p[j] - step
        pts.append(box.clip(p))
    simplex = np.array(pts)
    fvals = np.array([tr(p) for p in simplex])
    used = simplex.shape[0]
    n = simplex.shape[0] - 1

    while used < max_evals:
        order = np.argsort(-fvals)  # descending: best first
        simplex, fvals = simplex[order], fvals[order]
        finite = np.isfinite(fvals)
        if finite.all() and (fvals[0] - fvals[-1]) < ftol and np.max(
            np.abs(simplex - simplex[0])
        ) < xtol:
            break
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = box.clip(centroid + (centroid - worst))
        fr = tr(xr)
        used += 1
        if fr > fvals[0]:
            xe = box.clip(centroid + 2.0 * (centroid - worst))
            fe = tr(xe)
            used += 1
            if fe > fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
        elif fr > fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
        else:
            xc = box.clip(centroid + 0.5 * (simplex[-1] - centroid))
            fc = tr(xc)
            used += 1
            if fc > fvals[-1]:
                simplex[-1], fvals[-1] = xc, fc
            else:  # shrink toward best
                for i in range(1, n + 1):
                    simplex[i] = box.clip(simplex[0] + 0.5 * (simplex[i] - simplex[0]))
                    fvals[i] = tr(simplex[i])
                    used += 1
