"""Chebyshev-center tasks: builders, the solve pipeline, and certificates.

A Chebyshev task asks for the center of a smallest ball, in a given norm,
circumscribing a compact (not necessarily convex) set K.  The task becomes
a semi-infinite program in the decision (t, x): minimize t subject to
||x - k|| <= t for every k in K.  The returned result always carries a
circumscription certificate: the worst violation of the ball over a large
probe sample of K.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.stats import qmc

from .core import AffineParametrization, BoxDomain, ConstraintSet, Norm
from .globalopt import GlobalConfig
from .inner import LinearObjective
from .sip import (
    NormBallFamily,
    RegPath,
    SipProblem,
    extract_optimizer,
    quadratic_regularizer,
    solve_sip_value,
)

__all__ = [
    "ChebyshevTask",
    "ChebyshevResult",
    "build_chebyshev_sip",
    "chebyshev_center",
    "circumscription_check",
    "enumerate_polytope_vertices",
    "norm_diameter",
    "sample_set",
    "default_schedule",
]


@dataclass
class ChebyshevTask:
    """A compact set, a norm, and a box in which to search for the center.

    ``search_space`` defaults to the bounding box of K inflated by 50%,
    which contains every Chebyshev center for the supported norms.  When K
    is parametrized (``param``), index points live in the parameter space
    and the set's constraints act on mapped ambient points.
    """

    set_K: ConstraintSet
    norm: Norm
    search_space: BoxDomain | None = None
    param: AffineParametrization | None = None
    candidates: tuple = ()

    def __post_init__(self):
        if self.search_space is None:
            self.search_space = self.set_K.box.inflate(1.5)
        auto = _auto_candidates(self.set_K)
        if auto.shape[0]:
            self.candidates = tuple(self.candidates) + tuple(map(np.asarray, auto))


@dataclass
class ChebyshevResult:
    radius: float
    center: np.ndarray
    active_points: np.ndarray
    path: RegPath | None
    circumscribes: bool
    worst_violation: float
    value_history: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.circumscribes and (self.path is None or self.path.monotone_ok)


def norm_diameter(norm: Norm, box: BoxDomain) -> float:
    """The diameter of a box under a norm (exact for small dims, else bounded)."""
    w = box.width
    if norm.kind in ("l1", "l2", "linf"):
        return norm(w)
    if box.dim <= 12:
        best = 0.0
        for i in range(2 ** (box.dim - 1) if box.dim else 0):
            mask = np.array([(i >> j) & 1 for j in range(box.dim)], dtype=float)
            best = max(best, norm(w * (2 * mask - 1)))
        return best
    evmax = float(np.linalg.eigvalsh(norm.matrix)[-1])
    return float(np.sqrt(evmax) * np.linalg.norm(w))


def enumerate_polytope_vertices(
    A: np.ndarray, b: np.ndarray, box: BoxDomain, tol: float = 1e-9
) -> np.ndarray:
    """Vertices of { u in box : A u <= b } by facet intersection (dim <= 4).

    All dim-subsets of the halfspace boundaries (including box facets) are
    intersected and filtered by feasibility.
    """
    d = box.dim
    if d > 4:
        raise ValueError("vertex enumeration supported up to dimension 4")
    rows = [np.asarray(A, dtype=float).reshape(-1, d)] if np.size(A) else []
    rhs = [np.asarray(b, dtype=float).reshape(-1)] if np.size(b) else []
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        rows.append(np.array([e, -e]))
        rhs.append(np.array([box.upper[j], -box.lower[j]]))
    F = np.vstack(rows) if rows else np.zeros((0, d))
    g = np.concatenate(rhs) if rhs else np.zeros(0)
    verts = []
    for combo in combinations(range(F.shape[0]), d):
        M = F[list(combo)]
        if abs(np.linalg.det(M)) < 1e-12 * max(1.0, float(np.abs(M).max()) ** d):
            continue
        v = np.linalg.solve(M, g[list(combo)])
        if np.all(F @ v <= g + tol * (1.0 + np.abs(g))):
            verts.append(v)
    if not verts:
        return np.zeros((0, d))
    out = []
    for v in verts:
        if not any(np.max(np.abs(v - w)) < 1e-8 for w in out):
            out.append(v)
    return np.array(out)


def _auto_candidates(cset: ConstraintSet) -> np.ndarray:
    """Structural index points of a constraint set: polytope vertices when the
    set is a low-dimensional halfspace polytope, feasible box corners otherwise."""
    d = cset.box.dim
    pts = []
    if d <= 4 and not cset.inequalities and cset.eq_A is None:
        try:
            pts.append(enumerate_polytope_vertices(cset.half_A, cset.half_b, cset.box))
        except ValueError:
            pass
    elif d <= 10:
        corners = cset.box.corners()
        feas = cset.residual_many(corners) <= 1e-9
        pts.append(corners[feas])
    if not pts:
        return np.zeros((0, d))
    P = np.vstack(pts)
    return P[cset.residual_many(P) <= 1e-9]


def build_chebyshev_sip(task: ChebyshevTask, n_samples: int | None = None) -> SipProblem:
    """The SIP min t s.t. ||x - k|| <= t on K, with decision (t, x)."""
    L = task.search_space.dim
    t_max = 1.1 * max(
        norm_diameter(task.norm, task.search_space), 1e-6
    )
    state_box = BoxDomain(
        np.concatenate([[0.0], task.search_space.lower]),
        np.concatenate([[t_max], task.search_space.upper]),
    )
    point_map = None
    if task.param is not None:
        par = task.param
        point_map = lambda z: par.point(z)
    family = NormBallFamily(task.norm, pidx=np.arange(1, L + 1), tidx=0, point_map=point_map)
    slater = np.concatenate([[0.98 * t_max], task.search_space.center])
    return SipProblem(
        dim_x=1 + L,
        objective=LinearObjective(np.concatenate([[1.0], np.zeros(L)])),
        family=family,
        state_box=state_box,
        index_set=task.set_K,
        index_param=task.param,
        slater=slater,
        index_candidates=tuple(task.candidates),
        n_samples=n_samples,
    )


def default_schedule(steps: int = 21, start: float = 1.0) -> list:
    """The geometric schedule eps_k = start * 2^-k, k = 0..steps-1."""
    return [start * 2.0 ** (-k) for k in range(steps)]


def chebyshev_center(
    task: ChebyshevTask,
    psi=None,
    schedule=None,
    cfg: GlobalConfig | None = None,
    probes: int = 10_000,
    seed_tuples: bool = True,
    refine_certificate: bool = True,
    stop_tol: float = 1e-6,
) -> ChebyshevResult:
    """Radius and center of a smallest circumscribing ball of K.

    Runs the sampled-relaxation maximization for the radius, then the
    regularization path for the center, then verifies circumscription on a
    probe sample.  ``psi`` defaults to half the squared distance to the
    state-box center; pass ``schedule=[]`` to skip the path and take the
    relaxed minimizer of the value certificate (adequate only for strictly
    convex norms).
    """
    cfg = cfg or GlobalConfig()
    sip = build_chebyshev_sip(task)
    value, cert, gres = solve_sip_value(
        sip, cfg, seed_tuples=seed_tuples, refine_certificate=refine_certificate
    )
    radius = max(value, 0.0)
    diagnostics = []
    if schedule is None:
        schedule = default_schedule()
    if len(schedule):
        if psi is None:
            psi = quadratic_regularizer(sip.state_box.center)
        path = extract_optimizer(
            sip, psi, schedule, cfg, stop_tol=stop_tol,
            refine_certificate=refine_certificate,
        )
        center = np.asarray(path.limit[1:], dtype=float)
        diagnostics.extend(path.diagnostics)
        t_limit = float(path.limit[0])
        if abs(t_limit - radius) > 1e-4 * (1.0 + radius):
            diagnostics.append(
                f"path radius {t_limit:.8g} deviates from value-solve radius {radius:.8g}"
            )
        radius = max(radius, 0.0)
    else:
        path = None
        center = np.asarray(cert.x_relaxed[1:], dtype=float)
    ok, worst = circumscription_check_raw(task, center, radius, probes)
    if not ok:
        diagnostics.append(
            f"circumscription failed: worst violation {worst:.3e} over {probes} probes"
        )
    return ChebyshevResult(
        radius, center, cert.points, path, ok, worst,
        value_history=gres.history, diagnostics=diagnostics,
    )


def sample_set(task: ChebyshevTask, n: int, seed: int = 0) -> np.ndarray:
    """Feasible probe points of K in ambient coordinates: a scrambled Sobol
    sample filtered by feasibility, plus all structural candidate points."""
    cset = task.set_K
    if task.param is not None:
        zbox = task.param.z_box(cset.box)
    else:
        zbox = cset.box
    sampler = qmc.Sobol(zbox.dim, scramble=True, seed=seed)
    batch = 1 << max(3, int(np.ceil(np.log2(max(n, 8)))))
    kept = []
    total = 0
    for _ in range(64):
        Z = zbox.lower + sampler.random(batch) * zbox.width
        U = task.param.points(Z) if task.param is not None else Z
        feas = cset.residual_many(U) <= 1e-9
        kept.append(U[feas])
        total += int(feas.sum())
        if total >= n:
            break
    U = np.vstack(kept) if kept else np.zeros((0, cset.box.dim))
    U = U[:n]
    cands = np.atleast_2d(np.asarray(task.candidates, dtype=float)) if task.candidates else None
    if cands is not None and cands.size:
        feas = cset.residual_many(cands) <= 1e-8
        U = np.vstack([cands[feas], U])
    return U


def circumscription_check_raw(
    task: ChebyshevTask, center: np.ndarray, radius: float, probes: int, tol: float = 1e-6
) -> tuple[bool, float]:
    if probes < 1:
        raise ValueError("need at least one probe")
    pts = sample_set(task, probes)
    if pts.shape[0] == 0:
        return True, -np.inf
    mapped = pts if task.param is None else pts
    d = task.norm.many(np.asarray(center)[None, :] - mapped)
    worst = float(np.max(d) - radius)
    return worst <= tol, worst


def circumscription_check(
    result: ChebyshevResult, task: ChebyshevTask, probes: int = 10_000
) -> tuple[bool, float]:
    """Does the returned ball contain K?  Probes K and reports the worst
    violation max(||center - g|| - radius); requires probes >= 1000."""
    if probes < 1000:
        raise ValueError("circumscription check requires at least 1000 probes")
    return circumscription_check_raw(task, result.center, result.radius, probes)
