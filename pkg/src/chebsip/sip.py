"""Convex semi-infinite programs solved by sampled-constraint relaxation.

A problem  min f(x) s.t. g(x, u) <= 0 for all u in U  is attacked in two
stages.  First the relaxed value function

    rho(u_1, ..., u_N) = inf { f(x) : g(x, u_i) <= 0, i = 1..N, x in X }

is maximized over U^N by a derivative-free global engine; the maximum equals
the value of the semi-infinite program when N matches the decision dimension.
Second, optimizers are extracted by re-running the same machinery on the
regularized objective f + eps * psi for a decreasing schedule of eps, which
singles out the psi-minimal optimizer in the limit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from .core import AffineParametrization, BoxDomain, ConstraintSet, Norm
from .globalopt import GlobalConfig, GlobalResult, maximize_box
from .inner import (
    AffineBlock,
    FiniteConvexProgram,
    GenericBlock,
    InnerSolution,
    LinearObjective,
    NormBallBlock,
    QuadraticObjective,
    solve_finite_convex,
)

__all__ = [
    "AffineFamily",
    "NormBallFamily",
    "CallableFamily",
    "SipProblem",
    "RhoResult",
    "RegPath",
    "RegularizedSolve",
    "quadratic_regularizer",
    "rho_eval",
    "solve_sip_value",
    "solve_sip_regularized",
    "extract_optimizer",
    "compactify",
    "index_violation",
]

_PENALTY = 1e12
_FEAS_EPS = 1e-8


# -- constraint families -------------------------------------------------------


class AffineFamily:
    """g(x, u) = a(u) . x - b(u), affine in x with index-dependent coefficients."""

    def __init__(self, coeff_fn: Callable[[np.ndarray], tuple]):
        self.coeff_fn = coeff_fn

    def blocks(self, points: np.ndarray) -> list:
        rows, rhs = [], []
        for u in points:
            a, b = self.coeff_fn(u)
            rows.append(np.asarray(a, dtype=float))
            rhs.append(float(b))
        return [AffineBlock(np.array(rows), np.array(rhs))]

    def value_many(self, x: np.ndarray, points: np.ndarray) -> np.ndarray:
        out = np.empty(len(points))
        for i, u in enumerate(points):
            a, b = self.coeff_fn(u)
            out[i] = float(np.asarray(a) @ x) - float(b)
        return out


class NormBallFamily:
    """g(x, u) = ||x[pidx] - m(u)|| - x[tidx], the Chebyshev circumscription family.

    ``point_map`` turns an index point into a point of the center space
    (identity by default).
    """

    def __init__(self, norm: Norm, pidx, tidx: int, point_map: Callable | None = None):
        self.norm = norm
        self.pidx = np.asarray(pidx, dtype=int)
        self.tidx = int(tidx)
        self.point_map = point_map

    def _mapped(self, points: np.ndarray) -> np.ndarray:
        if self.point_map is None:
            return np.atleast_2d(points)
        return np.atleast_2d(np.array([self.point_map(u) for u in points], dtype=float))

    def blocks(self, points: np.ndarray) -> list:
        return [NormBallBlock(self.pidx, self._mapped(points), self.norm, self.tidx)]

    def value_many(self, x: np.ndarray, points: np.ndarray) -> np.ndarray:
        centers = self._mapped(points)
        return self.norm.many(x[self.pidx][None, :] - centers) - x[self.tidx]


class CallableFamily:
    """Generic g(x, u) with a subgradient-in-x oracle."""

    def __init__(self, fn: Callable, subgrad_x: Callable):
        self.fn = fn
        self.subgrad_x = subgrad_x

    def blocks(self, points: np.ndarray) -> list:
        cons = [
            (
                lambda x, u=np.array(u, dtype=float): float(self.fn(x, u)),
                lambda x, u=np.array(u, dtype=float): np.asarray(self.subgrad_x(x, u), dtype=float),
            )
            for u in points
        ]
        return [GenericBlock(cons)]

    def value_many(self, x: np.ndarray, points: np.ndarray) -> np.ndarray:
        return np.array([float(self.fn(x, u)) for u in points])


# -- problem container -----------------------------------------------------------


@dataclass
class SipProblem:
    """Data of a convex SIP: objective, constraint family, state set, index set.

    Index points handed to ``rho_eval`` live in the parametrized coordinates:
    z such that u = param.point(z) when ``index_param`` is set, the ambient u
    otherwise.  ``index_candidates`` holds structurally distinguished index
    points (polytope vertices, boundary intersections) used to seed the
    global engine; ``slater`` is a strictly feasible state point, validated
    against a probe sample of the index set at construction.
    """

    dim_x: int
    objective: object
    family: object
    state_box: BoxDomain
    index_set: ConstraintSet
    index_param: AffineParametrization | None = None
    slater: np.ndarray | None = None
    state_blocks: list = field(default_factory=list)
    index_candidates: tuple = ()
    n_samples: int | None = None
    solver_opts: dict = field(default_factory=dict)
    validate: bool = True

    def __post_init__(self):
        if self.state_box.dim != self.dim_x:
            raise ValueError("state box dimension does not match dim_x")
        if self.slater is None:
            self.slater = self.state_box.center
        self.slater = np.asarray(self.slater, dtype=float)
        if self.validate:
            self._validate_slater()

    def _validate_slater(self, n_probe: int = 256):
        if self.state_box.residual(self.slater) > 0:
            raise ValueError("Slater point outside the state box")
        Z = self.sample_index_z(n_probe, seed=0)
        if Z.shape[0] == 0:
            return
        g = self.family.value_many(self.slater, self.index_points(Z))
        if np.max(g, initial=-np.inf) >= 0:
            raise ValueError(
                f"Slater point not strictly feasible: max g = {np.max(g):.3e} on probe sample"
            )

    # -- index-set geometry -----------------------------------------------------

    @property
    def index_z_box(self) -> BoxDomain:
        if self.index_param is not None:
            return self.index_param.z_box(self.index_set.box)
        return self.index_set.box

    @property
    def index_dim(self) -> int:
        return self.index_z_box.dim

    def index_points(self, Z: np.ndarray) -> np.ndarray:
        """Map parametrized index coordinates to ambient index points."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if self.index_param is not None:
            return self.index_param.points(Z)
        return Z

    def index_residuals(self, Z: np.ndarray) -> np.ndarray:
        return self.index_set.residual_many(self.index_points(Z))

    def sample_index_z(self, n: int, seed: int = 0, max_draw: int = 50) -> np.ndarray:
        """Up to ``n`` feasible index points (z-coordinates) from a scrambled Sobol set."""
        box = self.index_z_box
        out = []
        sampler = qmc.Sobol(box.dim, scramble=True, seed=seed)
        batch = 1 << max(3, int(np.ceil(np.log2(max(n, 8)))))
        for _ in range(max_draw):
            Z = box.lower + sampler.random(batch) * box.width
            r = self.index_residuals(Z)
            out.append(Z[r <= 1e-9])
            if sum(len(o) for o in out) >= n:
                break
        Z = np.vstack(out) if out else np.zeros((0, box.dim))
        cands = self.candidate_z()
        if cands.shape[0]:
            Z = np.vstack([cands, Z])
        return Z[:n]

    def candidate_z(self) -> np.ndarray:
        if not self.index_candidates:
            return np.zeros((0, self.index_dim))
        U = np.atleast_2d(np.asarray(self.index_candidates, dtype=float))
        if self.index_param is not None:
            Z = np.array([self.index_param.coordinates(u) for u in U])
        else:
            Z = U
        keep = self.index_residuals(Z) <= 1e-8
        return Z[keep]

    @property
    def n_points(self) -> int:
        return self.n_samples if self.n_samples is not None else self.dim_x


@dataclass
class RhoResult:
    tuple_z: np.ndarray  # (N, index_dim) parametrized index points
    points: np.ndarray  # ambient index points
    value: float
    x_relaxed: np.ndarray
    inner: InnerSolution


@dataclass
class RegularizedSolve:
    x_eps: np.ndarray
    value: float  # value of the regularized SIP (f + eps*psi)
    f_value: float
    psi_value: float
    certificate: RhoResult
    global_result: GlobalResult


@dataclass
class RegPath:
    epsilons: list
    solutions: list  # (eps, x_eps, f, psi)
    limit: np.ndarray
    monotone_ok: bool
    diagnostics: list = field(default_factory=list)
    stopped_early: bool = False

    def table(self):
        return [
            {"eps": e, "x": list(map(float, x)), "f": f, "psi": p}
            for e, x, f, p in self.solutions
        ]


def quadratic_regularizer(center, weight: float = 1.0) -> QuadraticObjective:
    """psi(x) = weight/2 * ||x - center||^2, positive and strictly convex."""
    c = np.asarray(center, dtype=float)
    if weight <= 0:
        raise ValueError("regularizer weight must be positive")
    n = c.size
    return QuadraticObjective(weight * np.eye(n), -weight * c, 0.5 * weight * float(c @ c))


def _combine_objectives(f, psi, eps: float):
    """f + eps * psi, staying in closed form when both pieces are (at most) quadratic."""

    def quad_parts(o):
        if isinstance(o, LinearObjective):
            return np.zeros((o.c.size, o.c.size)), o.c, o.const
        if isinstance(o, QuadraticObjective):
            return o.Q, o.c, o.const
        return None

    a, b = quad_parts(f), quad_parts(psi)
    if a is not None and b is not None:
        return QuadraticObjective(a[0] + eps * b[0], a[1] + eps * b[1], a[2] + eps * b[2])
    from .inner import CallableObjective

    def h(x):
        return f.value(x) + eps * psi.value(x)

    def hg(x):
        return f.grad(x) + eps * psi.grad(x)

    def hh(x):
        Hf, Hp = f.hess(x), psi.hess(x)
        return None if Hf is None or Hp is None else Hf + eps * Hp

    return CallableObjective(h, hg, hh)


def _validate_regularizer(psi, box: BoxDomain, seed: int = 0, n: int = 64):
    rng = np.random.default_rng(seed)
    lo, hi = box.lower, box.upper
    for _ in range(n):
        a = lo + rng.random(box.dim) * (hi - lo)
        b = lo + rng.random(box.dim) * (hi - lo)
        if np.max(np.abs(a - b)) < 1e-12:
            continue
        mid = 0.5 * (a + b)
        if psi.value(mid) >= 0.5 * (psi.value(a) + psi.value(b)) - 1e-12:
            raise ValueError("regularizer failed the strict-convexity midpoint check")
        if psi.value(a) < -1e-12:
            raise ValueError("regularizer must be nonnegative")


# -- relaxed value function -------------------------------------------------------


def _rho_program(sip: SipProblem, points: np.ndarray, objective) -> FiniteConvexProgram:
    blocks = sip.family.blocks(points) + list(sip.state_blocks)
    return FiniteConvexProgram(objective, blocks, sip.state_box)


def rho_eval(
    sip: SipProblem,
    tuple_z,
    x0=None,
    tol: float = 1e-8,
    objective=None,
    check_feasible: bool = True,
    max_total_iter: int | None = None,
) -> RhoResult:
    """Evaluate the relaxed value function at a tuple of index points.

    ``tuple_z`` holds parametrized coordinates, one row per sampled point
    (any count >= 1 is accepted; the solver default matches the decision
    dimension).  Returns value -inf when the relaxed program is infeasible.
    """
    Z = np.atleast_2d(np.asarray(tuple_z, dtype=float))
    if check_feasible:
        r = sip.index_residuals(Z)
        if np.max(r, initial=0.0) > _FEAS_EPS:
            raise ValueError(f"index tuple infeasible: residual {np.max(r):.3e}")
    pts = sip.index_points(Z)
    prog = _rho_program(sip, pts, objective if objective is not None else sip.objective)
    x0 = sip.slater if x0 is None else np.asarray(x0, dtype=float)
    opts = dict(sip.solver_opts)
    opts.setdefault("tol", tol)
    if max_total_iter is not None:
        opts["max_total_iter"] = max_total_iter
    sol = solve_finite_convex(prog, x0, **opts)
    value = -np.inf if sol.status == "infeasible" else sol.value
    return RhoResult(Z, pts, value, sol.x_star, sol)


def _outer_function(sip: SipProblem, objective, search_tol: float = 1e-7):
    """The penalized tuple objective handed to the global engine.

    Search-phase relaxations are solved at a loosened tolerance; the final
    certificate is re-solved sharply by the caller.
    """
    N, d = sip.n_points, sip.index_dim

    def fn(zvec):
        Z = zvec.reshape(N, d)
        res = sip.index_residuals(Z)
        total = float(np.sum(np.maximum(res - _FEAS_EPS, 0.0)))
        if total > 0.0:
            return -_PENALTY * (1.0 + total)
        r = rho_eval(
            sip, Z, tol=search_tol, objective=objective, check_feasible=False,
            max_total_iter=1200,
        )
        if not np.isfinite(r.value):
            return -0.5 * _PENALTY
        return r.value

    return fn


def _tuple_box(sip: SipProblem) -> BoxDomain:
    zb = sip.index_z_box
    N = sip.n_points
    return BoxDomain(np.tile(zb.lower, N), np.tile(zb.upper, N))


def _greedy_exchange_tuples(sip, objective, pool: np.ndarray, max_iter: int = 12):
    """Exchange heuristic: alternately solve the relaxation and swap in the
    most violated pool point.  Returns the visited tuples (flattened)."""
    N = sip.n_points
    if pool.shape[0] == 0:
        return []
    seeds = []
    order = np.argsort(-np.linalg.norm(pool - pool.mean(axis=0), axis=1))
    Z = pool[order[:N]] if pool.shape[0] >= N else pool[np.arange(N) % pool.shape[0]]
    Z = np.array(Z, dtype=float)
    last = None
    for _ in range(max_iter):
        r = rho_eval(sip, Z, objective=objective, check_feasible=False)
        if not np.isfinite(r.value):
            break
        seeds.append(Z.flatten().copy())
        g_pool = sip.family.value_many(r.x_relaxed, sip.index_points(pool))
        i_new = int(np.argmax(g_pool))
        if last is not None and abs(r.value - last) <= 1e-12:
            break
        last = r.value
        g_tuple = sip.family.value_many(r.x_relaxed, sip.index_points(Z))
        Z[int(np.argmin(g_tuple))] = pool[i_new]
    return seeds


def _seed_tuples(sip: SipProblem, objective, seed: int) -> list:
    """Initial tuples for the global engine: candidate combinations plus
    greedy exchange runs over a feasible pool."""
    N = sip.n_points
    cands = sip.candidate_z()
    seeds = []
    if cands.shape[0]:
        k = cands.shape[0]
        if k >= N:
            from itertools import combinations
            from math import comb

            if comb(k, N) <= 256:
                best_val, best = -np.inf, None
                for combo in combinations(range(k), N):
                    Z = cands[list(combo)]
                    r = rho_eval(sip, Z, objective=objective, check_feasible=False)
                    if np.isfinite(r.value) and r.value > best_val:
                        best_val, best = r.value, Z.flatten().copy()
                if best is not None:
                    seeds.append(best)
        for i in range(min(k, 4)):
            seeds.append(np.tile(cands[i], N))
    pool = sip.sample_index_z(256, seed=seed)
    seeds.extend(_greedy_exchange_tuples(sip, objective, pool))
    return seeds


def _argmax_constraint(sip: SipProblem, x: np.ndarray, seed: int = 0, n_probes: int = 1024):
    """Index point (z-coordinates) maximizing g(x, .) over the index set."""
    Z = sip.sample_index_z(n_probes, seed=seed)
    if Z.shape[0] == 0:
        return None
    g = sip.family.value_many(x, sip.index_points(Z))
    box = sip.index_z_box

    def fn(z):
        r = sip.index_set.residual(sip.index_points(z[None, :])[0])
        if r > _FEAS_EPS:
            return -_PENALTY * (1.0 + r)
        return float(sip.family.value_many(x, sip.index_points(z[None, :]))[0])

    order = np.argsort(-g)[:2]
    cfg = GlobalConfig(
        strategy="nm", seed=seed, max_evals=300 * max(1, box.dim),
        nm_restarts=len(order), init_points=tuple(Z[i] for i in order), polish=False,
    )
    try:
        res = maximize_box(fn, box, cfg)
    except ValueError:
        return Z[int(np.argmax(g))]
    return res.u_star


def _refine_certificate(sip: SipProblem, obj, Z: np.ndarray, rounds: int = 5) -> RhoResult:
    """Sharpen a maximizing tuple by exchange steps plus local enrichment.

    Exchange: alternate the relaxed solve with a swap of the slackest tuple
    entry for the most violated index point of the current relaxed minimizer;
    a swap is kept only when it does not decrease the relaxed value, so the
    result remains a certified lower bound.  Enrichment: re-solve once more
    with a small cluster of index points around each tuple entry, which pins
    the relaxed minimizer to second-order accuracy when the active index
    points sit in the interior of the index set.
    """
    cert = rho_eval(sip, Z, tol=1e-9, objective=obj, check_feasible=False,
                    max_total_iter=8000)
    scale = 1.0 + abs(cert.value) if np.isfinite(cert.value) else 1.0
    for k in range(rounds):
        if not np.isfinite(cert.value):
            break
        viol = float(
            np.max(sip.family.value_many(cert.x_relaxed, sip.index_points(cert.tuple_z)), initial=0.0)
        )
        znew = _argmax_constraint(sip, cert.x_relaxed, seed=k)
        if znew is None:
            break
        gnew = float(sip.family.value_many(cert.x_relaxed, sip.index_points(znew[None, :]))[0])
        if gnew <= max(viol, 0.0) + 1e-11 * scale:
            break  # relaxed minimizer already (nearly) feasible for the full set
        g_tuple = sip.family.value_many(cert.x_relaxed, cert.points)
        Z_try = cert.tuple_z.copy()
        Z_try[int(np.argmin(g_tuple))] = znew
        trial = rho_eval(sip, Z_try, tol=1e-9, objective=obj, check_feasible=False,
                         max_total_iter=8000)
        if np.isfinite(trial.value) and trial.value >= cert.value - 1e-10 * scale:
            cert = trial
        else:
            break
    sharp = _local_reduction(sip, obj, cert)
    if sharp is not None:
        return sharp
    return _enrich_certificate(sip, obj, cert)


def _enrich_certificate(sip: SipProblem, obj, cert: RhoResult) -> RhoResult:
    """Fallback sharpening: one relaxed solve with small clusters of extra
    index points around each support point, pinning the minimizer locally."""
    if not np.isfinite(cert.value):
        return cert
    box = sip.index_z_box
    width = np.maximum(box.width, 0.0)
    if float(np.max(width, initial=0.0)) <= 0.0:
        return cert
    delta = 1e-5 * width
    rows = [cert.tuple_z]
    for j in range(box.dim):
        if width[j] <= 0:
            continue
        for s in (-1.0, 1.0):
            P = cert.tuple_z.copy()
            P[:, j] = np.clip(P[:, j] + s * delta[j], box.lower[j], box.upper[j])
            rows.append(P)
    Z = np.unique(np.vstack(rows), axis=0)
    Z = Z[sip.index_residuals(Z) <= _FEAS_EPS]
    if Z.shape[0] <= cert.tuple_z.shape[0]:
        return cert
    trial = rho_eval(sip, Z, tol=1e-8, objective=obj, check_feasible=False,
                     max_total_iter=6000)
    scale = 1.0 + abs(cert.value)
    if np.isfinite(trial.value) and trial.value >= cert.value - 1e-9 * scale:
        g = sip.family.value_many(trial.x_relaxed, sip.index_points(Z))
        keep = np.argsort(-g)[: cert.tuple_z.shape[0]]
        return RhoResult(Z[keep], sip.index_points(Z[keep]),
                         max(trial.value, cert.value), trial.x_relaxed, trial.inner)
    return cert


def _support_groups(sip: SipProblem, cert: RhoResult, tol_active: float = 1e-5):
    """Merge near-duplicate tuple points and classify each group as an
    interior support (eligible for stationarity in u) or frozen (on the
    index-set boundary, where candidate seeding already pins it exactly)."""
    box = sip.index_z_box
    width = np.maximum(box.width, 1e-12)
    scale = 1.0 + abs(cert.value)
    g = sip.family.value_many(cert.x_relaxed, cert.points)
    groups = []
    for i in range(cert.tuple_z.shape[0]):
        if g[i] < -tol_active * scale:
            continue  # slack constraint, not part of the support
        z = cert.tuple_z[i]
        merged = False
        for grp in groups:
            if np.max(np.abs(grp["z"] - z) / width) < 1e-4:
                merged = True
                break
        if merged:
            continue
        margin = 1e-6
        interior = bool(
            np.all(z >= box.lower + margin * width) and np.all(z <= box.upper - margin * width)
        )
        if interior:
            u = sip.index_points(z[None, :])[0]
            cs = sip.index_set
            if cs.half_A.shape[0]:
                if np.max(cs.half_A @ u - cs.half_b) > -1e-8:
                    interior = False
            if interior:
                for h in cs.inequalities:
                    if float(h(u)) > -1e-8:
                        interior = False
                        break
            if interior and cs.box.residual(u) > -1e-12:
                lo_m = np.min(np.minimum(u - cs.box.lower, cs.box.upper - u))
                if lo_m < 1e-8:
                    interior = False
        groups.append({"z": z.copy(), "interior": interior})
    return groups


def _local_reduction(sip: SipProblem, obj, cert: RhoResult, max_newton: int = 30):
    """Newton polish of the coupled optimality system of the reduced problem.

    Variables are the state x, one multiplier per support point, and the
    coordinates of interior support points (stationarity of g in u holds
    there).  Boundary supports stay frozen.  Returns a sharpened certificate
    or None when the structure does not apply or Newton fails, in which case
    the caller falls back to cluster enrichment.
    """
    if not np.isfinite(cert.value):
        return None
    groups = _support_groups(sip, cert)
    if not groups or not any(gr["interior"] for gr in groups):
        return None
    box = sip.index_z_box
    width = np.maximum(box.width, 1e-12)
    n = sip.dim_x
    lo, hi = sip.state_box.lower, sip.state_box.upper
    x0 = cert.x_relaxed.copy()
    free = ~((x0 <= lo + 1e-10) | (x0 >= hi - 1e-10))

    def point_val_grad(x, z):
        blk = sip.family.blocks(sip.index_points(z[None, :]))[0]
        return float(blk.values(x)[0]), blk.jac_rows(x, [0])[0]

    def g_of(x, z):
        return float(sip.family.value_many(x, sip.index_points(z[None, :]))[0])

    k = len(groups)
    dims = [gr["z"].size if gr["interior"] else 0 for gr in groups]
    offs = np.cumsum([0] + dims)
    nu = offs[-1]
    h_u = 1e-6 * width

    def unpack(v):
        x = x0.copy()
        x[free] = v[: int(free.sum())]
        lam = v[int(free.sum()) : int(free.sum()) + k]
        zs = []
        base = int(free.sum()) + k
        for i, gr in enumerate(groups):
            if gr["interior"]:
                zs.append(v[base + offs[i] : base + offs[i + 1]])
            else:
                zs.append(gr["z"])
        return x, lam, zs

    def residual(v):
        x, lam, zs = unpack(v)
        gx = obj.grad(x).astype(float, copy=True)
        rows = []
        for i, gr in enumerate(groups):
            val, jac = point_val_grad(x, np.asarray(zs[i]))
            gx = gx + lam[i] * jac
            rows.append(val)
        R = [gx[free]]
        R.append(np.asarray(rows))
        for i, gr in enumerate(groups):
            if not gr["interior"]:
                continue
            z = np.asarray(zs[i])
            du = np.empty(z.size)
            for j in range(z.size):
                zp, zm = z.copy(), z.copy()
                zp[j] += h_u[j]
                zm[j] -= h_u[j]
                du[j] = (g_of(x, zp) - g_of(x, zm)) / (2 * h_u[j])
            R.append(du)
        return np.concatenate(R)

    # initial multipliers from least-squares stationarity
    J0 = np.array([point_val_grad(x0, gr["z"])[1] for gr in groups])
    lam0, *_ = np.linalg.lstsq(J0[:, free].T, -obj.grad(x0)[free], rcond=None)
    lam0 = np.maximum(lam0, 0.0)
    v = np.concatenate(
        [x0[free], lam0] + [gr["z"] for gr in groups if gr["interior"]]
    )
    R = residual(v)
    nv = v.size
    for _ in range(max_newton):
        if float(np.linalg.norm(R, np.inf)) <= 1e-11 * (1 + abs(cert.value)):
            break
        # finite-difference Jacobian: every piece is cheap at these sizes
        J = np.empty((R.size, nv))
        for j in range(nv):
            hj = 1e-7 * max(1.0, abs(v[j]))
            vp = v.copy()
            vp[j] += hj
            J[:, j] = (residual(vp) - R) / hj
        try:
            step = np.linalg.solve(J, -R)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -R, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            return None
        t, ok = 1.0, False
        for _ in range(25):
            vn = v + t * step
            Rn = residual(vn)
            if np.linalg.norm(Rn) < np.linalg.norm(R) * (1 - 1e-4 * t) + 1e-16:
                v, R = vn, Rn
                ok = True
                break
            t *= 0.5
        if not ok:
            break
    if float(np.linalg.norm(R, np.inf)) > 1e-8 * (1 + abs(cert.value)):
        return None
    x, lam, zs = unpack(v)
    if np.any(lam < -1e-9):
        return None
    # rebuild a verifying certificate from the sharpened support points
    N = sip.n_points
    Znew = np.array([np.asarray(zs[i % k]) for i in range(N)])
    Znew = np.clip(Znew, box.lower, box.upper)
    if np.max(sip.index_residuals(Znew), initial=0.0) > _FEAS_EPS:
        return None
    check = rho_eval(sip, Znew, tol=1e-10, objective=obj, check_feasible=False,
                     max_total_iter=8000)
    scale = 1.0 + abs(cert.value)
    if not np.isfinite(check.value) or check.value < cert.value - 1e-8 * scale:
        return None
    if float(np.max(np.abs(check.x_relaxed - x))) > 1e-5 * (1 + float(np.max(np.abs(x)))):
        return None
    return check


def solve_sip_value(
    sip: SipProblem,
    cfg: GlobalConfig,
    objective=None,
    seed_tuples: bool = True,
    refine_certificate: bool = True,
) -> tuple[float, RhoResult, GlobalResult]:
    """Optimal value of the SIP with a maximizing-tuple certificate.

    After the outer maximization the certificate tuple is re-solved at a
    tightened tolerance and optionally sharpened by exchange steps, which
    only ever increase the certified value.
    """
    obj = objective if objective is not None else sip.objective
    fn = _outer_function(sip, obj)
    box = _tuple_box(sip)
    if seed_tuples:
        extra = _seed_tuples(sip, obj, cfg.seed)
        if extra:
            cfg = replace(cfg, init_points=tuple(cfg.init_points) + tuple(extra))
    res = maximize_box(fn, box, cfg)
    if res.value <= -0.4 * _PENALTY:
        raise ValueError("global engine found only infeasible index tuples")
    N, d = sip.n_points, sip.index_dim
    Z = res.u_star.reshape(N, d)
    if refine_certificate:
        cert = _refine_certificate(sip, obj, Z)
    else:
        cert = rho_eval(sip, Z, tol=1e-10, objective=obj, check_feasible=False,
                        max_total_iter=20_000)
    return cert.value, cert, res


def solve_sip_regularized(
    sip: SipProblem,
    psi,
    eps: float,
    cfg: GlobalConfig,
    seed_tuples: bool = True,
    check_psi: bool = True,
    refine_certificate: bool = True,
) -> RegularizedSolve:
    """Solve the SIP with objective f + eps * psi (psi positive, strictly convex).

    The regularized problem has a unique solution, which the certificate's
    relaxed minimizer recovers.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if check_psi:
        _validate_regularizer(psi, sip.state_box)
    obj = _combine_objectives(sip.objective, psi, eps)
    value, cert, gres = solve_sip_value(
        sip, cfg, objective=obj, seed_tuples=seed_tuples,
        refine_certificate=refine_certificate,
    )
    x = cert.x_relaxed
    return RegularizedSolve(
        x, value, sip.objective.value(x), psi.value(x), cert, gres
    )


def extract_optimizer(
    sip: SipProblem,
    psi,
    schedule: Sequence[float],
    cfg: GlobalConfig,
    stop_tol: float = 1e-6,
    path_tol: float = 1e-6,
    refine_certificate: bool = True,
) -> RegPath:
    """Follow the regularization path eps -> 0 and return the limit point.

    Each step warm-starts the global engine with the previous certificate
    tuple.  Monotonicity of f (non-increasing) and psi (non-decreasing) along
    the path is checked to ``path_tol``; violations are reported as
    diagnostics since they indicate a failed global maximization.
    """
    schedule = [float(e) for e in schedule]
    if not schedule or any(e <= 0 for e in schedule):
        raise ValueError("schedule must be positive")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("schedule must be strictly decreasing")
    _validate_regularizer(psi, sip.state_box)

    solutions = []
    diagnostics = []
    warm: tuple = ()
    stopped = False
    # later steps are warm-started from the previous certificate tuple, so a
    # reduced budget suffices once the first maximization has paid in full
    step_evals = max(2 * cfg.population, cfg.max_evals // 4)
    for k, eps in enumerate(schedule):
        step_cfg = replace(
            cfg,
            seed=cfg.seed + k,
            init_points=tuple(cfg.init_points) + warm,
            max_evals=cfg.max_evals if k == 0 else step_evals,
        )
        sol = solve_sip_regularized(
            sip, psi, eps, step_cfg, seed_tuples=(k == 0), check_psi=False,
            refine_certificate=refine_certificate,
        )
        solutions.append((eps, sol.x_eps, sol.f_value, sol.psi_value))
        warm = (sol.certificate.tuple_z.flatten().copy(),)
        if len(solutions) >= 2:
            dx = float(np.max(np.abs(solutions[-1][1] - solutions[-2][1])))
            if dx <= stop_tol:
                stopped = True
                break

    monotone = True
    for (e1, _, f1, p1), (e2, _, f2, p2) in zip(solutions, solutions[1:]):
        if f2 > f1 + path_tol:
            monotone = False
            diagnostics.append(
                f"objective increased along path at eps={e2:g}: {f1:.9g} -> {f2:.9g}"
            )
        if p2 < p1 - path_tol:
            monotone = False
            diagnostics.append(
                f"regularizer decreased along path at eps={e2:g}: {p1:.9g} -> {p2:.9g}"
            )
    return RegPath(
        [s[0] for s in solutions],
        solutions,
        solutions[-1][1],
        monotone,
        diagnostics,
        stopped,
    )


def compactify(sip: SipProblem, x_tilde) -> SipProblem:
    """Intersect the state set with the sublevel set f(x) <= f(x_tilde) + 1.

    Keeps the optimal value unchanged whenever ``x_tilde`` is feasible, and
    makes every objective sublevel set bounded, which the extraction
    procedure requires for problems with non-compact natural domains.
    """
    xt = np.asarray(x_tilde, dtype=float)
    if sip.state_box.residual(xt) > 1e-9:
        raise ValueError("x_tilde outside the state set")
    bound = sip.objective.value(xt) + 1.0
    f = sip.objective
    if isinstance(f, LinearObjective):
        block = AffineBlock(f.c[None, :], np.array([bound - f.const]))
    else:
        block = GenericBlock([(lambda x: f.value(x) - bound, f.grad, f.hess)])
    return replace(
        sip,
        state_blocks=list(sip.state_blocks) + [block],
        validate=False,
    )


def index_violation(
    sip: SipProblem, x, n_probes: int = 4096, seed: int = 0, refine: bool = True
) -> float:
    """Estimate max_u g(x, u) over the index set by probing plus local refinement."""
    x = np.asarray(x, dtype=float)
    Z = sip.sample_index_z(n_probes, seed=seed)
    if Z.shape[0] == 0:
        return -np.inf
    g = sip.family.value_many(x, sip.index_points(Z))
    best = float(np.max(g))
    if not refine:
        return best
    box = sip.index_z_box

    def fn(z):
        r = sip.index_set.residual(sip.index_points(z[None, :])[0])
        if r > _FEAS_EPS:
            return -_PENALTY * (1.0 + r)
        return float(sip.family.value_many(x, sip.index_points(z[None, :]))[0])

    order = np.argsort(-g)[:3]
    cfg = GlobalConfig(
        strategy="nm", seed=seed, max_evals=400 * max(1, box.dim),
        nm_restarts=len(order), init_points=tuple(Z[i] for i in order), polish=False,
    )
    try:
        res = maximize_box(fn, box, cfg)
        best = max(best, res.value)
    except ValueError:
        pass
    return best
