"""Optimal-recovery tasks: Chebyshev centers of data-consistent model sets.

A learning task fixes a model basis, linear measurements Lambda w = y, and a
compact coefficient region Q; the set of data-consistent coefficient vectors
K = { w in Q : Lambda w = y } is compact, and its Chebyshev center under the
function-space (Gram) norm is the optimal recovery of the unknown function.

Two routes are provided.  When the search basis coincides with the model
basis (the usual case), the center search is restricted to the data-affine
subspace: the problem reduces to a Chebyshev task in the null-space
coordinates z, the returned center interpolates the data by construction,
and tie-breaking among non-strictly-convex norms happens inside the affine
slice, making the center independent of the ambient norm.  The general
route searches the full search space and supports distinct bases through
the joint Gram matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    AffineParametrization,
    BoxDomain,
    ConstraintSet,
    Norm,
    affine_parametrize,
    gram_matrix,
)
from .chebyshev import (
    ChebyshevResult,
    ChebyshevTask,
    chebyshev_center,
    enumerate_polytope_vertices,
)
from .globalopt import GlobalConfig
from .inner import AffineBlock, LinearObjective, QuadraticObjective, solve_finite_convex, FiniteConvexProgram
from .sip import NormBallFamily, SipProblem

__all__ = [
    "LearningTask",
    "RkhsTask",
    "LearningResult",
    "build_learning_sip",
    "build_rkhs_sip",
    "learning_center",
    "kernel_evaluation_matrix",
]


@dataclass
class LearningTask:
    """Data-consistent recovery task on coefficient space.

    ``measurements`` is the S x D matrix with entries lambda_i(psi_j); the
    coefficient region is { w : coeff_lower <= T w <= coeff_upper } for the
    optional basis-change matrix ``T = coeff_transform`` (identity when
    None), so bounds can be stated in a different representation than the
    one used numerically.  ``model_gram`` is the D x D Gram matrix of the
    model basis; ``search_basis``/``cross_gram``/``search_gram`` only matter
    for the general (unrestricted) route with a distinct search basis.
    """

    measurements: np.ndarray
    data: np.ndarray
    coeff_lower: np.ndarray
    coeff_upper: np.ndarray
    model_gram: np.ndarray
    coeff_transform: np.ndarray | None = None
    search_gram: np.ndarray | None = None
    cross_gram: np.ndarray | None = None
    restrict_to_data: bool | None = None

    def __post_init__(self):
        self.measurements = np.atleast_2d(np.asarray(self.measurements, dtype=float))
        if self.measurements.size == 0:
            self.measurements = self.measurements.reshape(0, len(self.coeff_lower))
        self.data = np.asarray(self.data, dtype=float).reshape(-1)
        self.coeff_lower = np.asarray(self.coeff_lower, dtype=float)
        self.coeff_upper = np.asarray(self.coeff_upper, dtype=float)
        self.model_gram = np.asarray(self.model_gram, dtype=float)
        if self.restrict_to_data is None:
            self.restrict_to_data = self.search_gram is None
        if self.measurements.shape[0] != self.data.size:
            raise ValueError("measurement matrix and data size mismatch")

    @property
    def dim(self) -> int:
        return self.measurements.shape[1] if self.measurements.size else self.coeff_lower.size

    @property
    def transform(self) -> np.ndarray:
        return (
            np.eye(self.dim) if self.coeff_transform is None else np.asarray(self.coeff_transform, dtype=float)
        )


@dataclass
class RkhsTask:
    """Recovery from point evaluations in a reproducing-kernel space.

    ``eval_matrix`` has entries psi_j(x_i): the reproducing property turns
    point evaluations into linear measurements, so the task is a
    ``LearningTask`` with that matrix as the measurement map.
    """

    eval_matrix: np.ndarray
    data: np.ndarray
    coeff_lower: np.ndarray
    coeff_upper: np.ndarray
    model_gram: np.ndarray
    coeff_transform: np.ndarray | None = None

    def as_learning_task(self) -> LearningTask:
        return LearningTask(
            self.eval_matrix,
            self.data,
            self.coeff_lower,
            self.coeff_upper,
            self.model_gram,
            coeff_transform=self.coeff_transform,
        )


def kernel_evaluation_matrix(basis, points) -> np.ndarray:
    """Matrix of basis evaluations psi_j(x_i) for sample points x_i."""
    pts = np.asarray(points, dtype=float).reshape(-1)
    return np.array([[float(np.asarray(f(x))) for f in basis] for x in pts])


@dataclass
class LearningResult:
    radius: float
    center: np.ndarray  # model-basis coefficients of the recovered function
    center_repr: np.ndarray  # T @ center, the bounded representation
    interpolation_residual: float
    chebyshev: ChebyshevResult
    param: AffineParametrization
    z_center: np.ndarray


def _feasible_z(A: np.ndarray, b: np.ndarray, z_guess: np.ndarray, box: BoxDomain):
    """A point of { z in box : A z <= b }, found by violation minimization."""
    prog = FiniteConvexProgram(
        QuadraticObjective(1e-12 * np.eye(box.dim), np.zeros(box.dim)),
        [AffineBlock(A, b)],
        box,
    )
    sol = solve_finite_convex(prog, z_guess, tol=1e-10)
    if sol.max_violation > 1e-8:
        raise ValueError(
            f"data-consistent coefficient set appears empty (violation {sol.max_violation:.3e})"
        )
    return sol.x_star


def _tighten_box(A: np.ndarray, b: np.ndarray, box: BoxDomain, z0: np.ndarray) -> BoxDomain:
    """Componentwise bounds of the polytope { z in box : A z <= b }."""
    k = box.dim
    lo = np.empty(k)
    hi = np.empty(k)
    for i in range(k):
        for sgn, out in ((1.0, lo), (-1.0, hi)):
            c = np.zeros(k)
            c[i] = sgn
            prog = FiniteConvexProgram(LinearObjective(c), [AffineBlock(A, b)], box)
            sol = solve_finite_convex(prog, z0, tol=1e-9)
            out[i] = sgn * sol.value
    pad = 1e-9 * (1.0 + np.abs(hi - lo))
    return BoxDomain(lo - pad, hi + pad)


def _affine_slice_set(task: LearningTask):
    """The data-consistent set in null-space coordinates, as a constraint set."""
    par = affine_parametrize(task.measurements, task.data)
    T = task.transform
    TN = T @ par.basis
    Tp = T @ par.particular
    if par.dim == 0:
        z_box = BoxDomain(np.array([0.0]), np.array([0.0]))
        cset = ConstraintSet(z_box, feasible_point=np.array([0.0]))
        return par, cset, np.zeros((0, 1)), None
    A = np.vstack([TN, -TN])
    b = np.concatenate([task.coeff_upper - Tp, Tp - task.coeff_lower])
    # interval-arithmetic superset, then LP-tightened componentwise bounds
    Tinv = np.linalg.inv(T)
    c_repr = 0.5 * (task.coeff_lower + task.coeff_upper)
    h_repr = 0.5 * (task.coeff_upper - task.coeff_lower)
    w_center = Tinv @ c_repr
    w_half = np.abs(Tinv) @ h_repr
    w_box = BoxDomain(w_center - w_half, w_center + w_half)
    z_super = par.z_box(w_box)
    z0 = _feasible_z(A, b, np.clip(par.coordinates(w_center), z_super.lower, z_super.upper), z_super)
    z_box = _tighten_box(A, b, z_super, z0)
    verts = None
    if par.dim <= 4:
        verts = enumerate_polytope_vertices(A, b, z_box)
    cset = ConstraintSet(z_box, halfspaces=(A, b), feasible_point=z0)
    return par, cset, verts, z0


def build_learning_sip(task: LearningTask, n_samples: int | None = None):
    """Assemble the Chebyshev SIP of a learning task.

    Returns ``(sip, ctx)`` where ``ctx`` carries the affine parametrization
    and the z-space Chebyshev task needed to interpret results.
    """
    if task.restrict_to_data:
        par, cset, verts, _ = _affine_slice_set(task)
        if par.dim == 0:
            gram_z = np.eye(1)
        else:
            gram_z = par.basis.T @ task.model_gram @ par.basis
            gram_z = 0.5 * (gram_z + gram_z.T)
        norm_z = Norm("gram", gram_z) if par.dim else Norm("l2")
        cheb = ChebyshevTask(
            cset, norm_z, candidates=tuple(verts) if verts is not None and len(verts) else ()
        )
        from .chebyshev import build_chebyshev_sip

        sip = build_chebyshev_sip(cheb, n_samples=n_samples)
        return sip, {"mode": "restricted", "param": par, "task": cheb}

    # general route: decision (t, c) over the full search space, index w
    if task.search_gram is None or task.cross_gram is None:
        G_ss, G_sm = task.model_gram, task.model_gram
    else:
        G_ss, G_sm = np.asarray(task.search_gram, float), np.asarray(task.cross_gram, float)
    par = affine_parametrize(task.measurements, task.data)
    T = task.transform
    Tinv = np.linalg.inv(T)
    c_repr = 0.5 * (task.coeff_lower + task.coeff_upper)
    h_repr = 0.5 * (task.coeff_upper - task.coeff_lower)
    w_box = BoxDomain(Tinv @ c_repr - np.abs(Tinv) @ h_repr, Tinv @ c_repr + np.abs(Tinv) @ h_repr)
    ineq_A = np.vstack([T, -T])
    ineq_b = np.concatenate([task.coeff_upper, -task.coeff_lower])
    cset = ConstraintSet(w_box, halfspaces=(ineq_A, ineq_b))
    G_mm = task.model_gram
    # distance from the search element c to the model element w:
    # || c - P w ||_Gss plus an orthogonal residual depending on w only
    P = np.linalg.solve(G_ss, G_sm)
    R = G_mm - G_sm.T @ P
    R = 0.5 * (R + R.T)

    L = G_ss.shape[0]
    norm_s = Norm("gram", G_ss)
    family = NormBallFamily(
        norm_s,
        pidx=np.arange(1, L + 1),
        tidx=0,
        point_map=lambda w: P @ w,
        radial_fn=lambda w: float(max(w @ R @ w, 0.0)),
    )
    from .chebyshev import norm_diameter

    w_ext = np.maximum(np.abs(w_box.lower), np.abs(w_box.upper))
    search = BoxDomain(-1.5 * np.abs(P) @ w_ext - 1.0, 1.5 * np.abs(P) @ w_ext + 1.0)
    t_max = 1.1 * (norm_diameter(norm_s, search) + float(np.sqrt(max(np.max(np.linalg.eigvalsh(R)), 0.0)) * np.linalg.norm(w_ext)) + 1.0)
    state_box = BoxDomain(
        np.concatenate([[0.0], search.lower]), np.concatenate([[t_max], search.upper])
    )
    sip = SipProblem(
        dim_x=1 + L,
        objective=LinearObjective(np.concatenate([[1.0], np.zeros(L)])),
        family=family,
        state_box=state_box,
        index_set=cset,
        index_param=par,
        slater=np.concatenate([[0.98 * t_max], search.center]),
        n_samples=n_samples,
    )
    return sip, {"mode": "full", "param": par, "w_box": w_box}


def build_rkhs_sip(task: RkhsTask, n_samples: int | None = None):
    """Same pipeline with the kernel-evaluation matrix as the measurement map."""
    return build_learning_sip(task.as_learning_task(), n_samples=n_samples)


def learning_center(
    task: LearningTask,
    psi=None,
    schedule=None,
    cfg: GlobalConfig | None = None,
    probes: int = 10_000,
    stop_tol: float = 1e-6,
) -> LearningResult:
    """Radius, center coefficients, and interpolation certificate of a task.

    Only the restricted (data-affine) route is supported here; it is the one
    every bundled experiment uses.  The center is reported both in model
    coefficients and in the bounded representation T w.
    """
    if not task.restrict_to_data:
        raise ValueError("learning_center drives the restricted route; use build_learning_sip directly")
    sip, ctx = build_learning_sip(task)
    cheb_task = ctx["task"]
    par = ctx["param"]
    res = chebyshev_center(
        cheb_task, psi=psi, schedule=schedule, cfg=cfg, probes=probes, stop_tol=stop_tol
    )
    z_c = res.center if par.dim else np.zeros(0)
    w = par.point(z_c if par.dim else np.zeros(0))
    resid = (
        float(np.max(np.abs(task.measurements @ w - task.data)))
        if task.measurements.size
        else 0.0
    )
    return LearningResult(
        res.radius, w, task.transform @ w, resid, res, par, np.asarray(z_c, dtype=float)
    )
