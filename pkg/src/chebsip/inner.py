"""Finitely constrained convex programs: minimize F(x) subject to G_i(x) <= 0 on a box.

The solver is an augmented-Lagrangian outer loop around a projected
Barzilai-Borwein descent on the box, followed by an active-set Newton
polish that snaps the iterate onto the KKT system.  Polyhedral norm
constraints (l1 / linf balls) are reformulated into affine rows before
solving so the subproblems stay differentiable; an optional smoothing
continuation covers the unreformulated nonsmooth path for cross-checks.

Calls are pure: all state lives on the stack, so concurrent solves are safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import BoxDomain, Norm

__all__ = [
    "LinearObjective",
    "QuadraticObjective",
    "CallableObjective",
    "AffineBlock",
    "NormBallBlock",
    "GenericBlock",
    "FiniteConvexProgram",
    "InnerSolution",
    "solve_finite_convex",
    "polyhedral_reformulate",
]


# -- objectives ---------------------------------------------------------------


class LinearObjective:
    """f(x) = c'x + const."""

    def __init__(self, c, const: float = 0.0):
        self.c = np.asarray(c, dtype=float)
        self.const = float(const)

    def value(self, x):
        return float(self.c @ x) + self.const

    def grad(self, x):
        return self.c

    def hess(self, x):
        return np.zeros((self.c.size, self.c.size))

    def extend(self, extra: int) -> "LinearObjective":
        return LinearObjective(np.concatenate([self.c, np.zeros(extra)]), self.const)


class QuadraticObjective:
    """f(x) = 0.5 x'Qx + c'x + const with Q symmetric PSD."""

    def __init__(self, Q, c, const: float = 0.0):
        self.Q = np.asarray(Q, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.const = float(const)

    def value(self, x):
        return float(0.5 * x @ self.Q @ x + self.c @ x) + self.const

    def grad(self, x):
        return self.Q @ x + self.c

    def hess(self, x):
        return self.Q

    def extend(self, extra: int) -> "QuadraticObjective":
        n = self.c.size
        Q = np.zeros((n + extra, n + extra))
        Q[:n, :n] = self.Q
        return QuadraticObjective(Q, np.concatenate([self.c, np.zeros(extra)]), self.const)


class CallableObjective:
    """Objective given by callables; ``hess`` is optional (disables polishing)."""

    def __init__(self, fn: Callable, grad: Callable, hess: Callable | None = None):
        self.fn = fn
        self._grad = grad
        self._hess = hess

    def value(self, x):
        return float(self.fn(x))

    def grad(self, x):
        return np.asarray(self._grad(x), dtype=float)

    def hess(self, x):
        return None if self._hess is None else np.asarray(self._hess(x), dtype=float)

    def extend(self, extra: int):
        raise ValueError("cannot extend a callable objective with auxiliary variables")


# -- constraint blocks --------------------------------------------------------


class AffineBlock:
    """Rows A x - b <= 0."""

    def __init__(self, A, b):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.b = np.asarray(b, dtype=float).reshape(-1)
        if self.A.shape[0] != self.b.size:
            raise ValueError("affine block shape mismatch")

    @property
    def m(self):
        return self.b.size

    def values(self, x):
        return self.A @ x - self.b

    def accumulate_grad(self, x, w):
        return self.A.T @ w

    def jac_rows(self, x, idx):
        return self.A[idx]

    def hess_comb(self, x, idx, lam):
        return 0.0

    def smooth(self):
        return True

    def extended(self, total_dim):
        A = np.zeros((self.m, total_dim))
        A[:, : self.A.shape[1]] = self.A
        return AffineBlock(A, self.b)


class NormBallBlock:
    """Constraints ||x[pidx] - center_i|| - x[tidx] - offset_i <= 0.

    ``tidx`` may be None for fixed-radius balls, in which case ``offset``
    holds the radii.  ``smooth_eps > 0`` replaces a polyhedral norm by its
    smooth surrogate (sqrt-smoothing for l1, log-sum-exp for linf).
    """

    def __init__(
        self,
        pidx,
        centers,
        norm: Norm,
        tidx: int | None,
        offset=0.0,
        smooth_eps: float = 0.0,
        radial_sq=None,
    ):
        self.pidx = np.asarray(pidx, dtype=int)
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.norm = norm
        self.tidx = tidx
        off = np.asarray(offset, dtype=float)
        self.offset = np.full(self.centers.shape[0], float(off)) if off.ndim == 0 else off
        self.smooth_eps = float(smooth_eps)
        if radial_sq is not None:
            if norm.is_polyhedral():
                raise ValueError("radial offsets require an inner-product norm")
            radial_sq = np.asarray(radial_sq, dtype=float).reshape(-1)
        self.radial_sq = radial_sq

    @property
    def m(self):
        return self.centers.shape[0]

    def _dists(self, V):
        eps = self.smooth_eps
        if self.radial_sq is not None:
            d = self.norm.many(V)
            return np.sqrt(d * d + self.radial_sq)
        if eps <= 0.0 or self.norm.kind not in ("l1", "linf"):
            return self.norm.many(V)
        if self.norm.kind == "l1":
            return np.sum(np.sqrt(V * V + eps * eps), axis=1) - V.shape[1] * eps
        # linf: eps * logsumexp(+-v/eps); upper bound within eps*log(2n) of the max
        E = np.concatenate([V, -V], axis=1) / eps
        mx = E.max(axis=1, keepdims=True)
        return (mx[:, 0] + np.log(np.exp(E - mx).sum(axis=1))) * eps

    def values(self, x):
        V = x[self.pidx][None, :] - self.centers
        r = self._dists(V)
        if self.tidx is not None:
            r = r - x[self.tidx]
        return r - self.offset

    def al_contrib(self, x, lam_p, mu):
        """Fused penalty-term value and gradient: one pass over the centers."""
        V = x[self.pidx][None, :] - self.centers
        c = self._dists(V)
        if self.tidx is not None:
            c = c - x[self.tidx]
        c = c - self.offset
        t = np.maximum(lam_p + mu * c, 0.0)
        phi = (float(t @ t) - float(lam_p @ lam_p)) / (2.0 * mu)
        g = np.zeros_like(x)
        active = t > 0
        if np.any(active):
            S = self._subgrad_rows(V[active])
            g[self.pidx] = t[active] @ S
            if self.tidx is not None:
                g[self.tidx] -= float(np.sum(t[active]))
        return phi, g

    def _subgrad_rows(self, V):
        eps = self.smooth_eps
        kind = self.norm.kind
        if self.radial_sq is not None:
            d = self.norm.many(V)
            dist = np.sqrt(d * d + self.radial_sq)
            if kind == "l2":
                S = V
            else:
                S = V @ self.norm.matrix
            dist = np.where(dist > 0, dist, 1.0)
            return S / dist[:, None]
        if kind == "l2":
            r = np.linalg.norm(V, axis=1)
            r = np.where(r > 0, r, 1.0)
            return V / r[:, None]
        if kind in ("weighted", "gram"):
            VM = V @ self.norm.matrix
            r = np.sqrt(np.maximum(np.einsum("ij,ij->i", V, VM), 0.0))
            r = np.where(r > 0, r, 1.0)
            return VM / r[:, None]
        if kind == "l1":
            if eps > 0.0:
                return V / np.sqrt(V * V + eps * eps)
            return np.sign(V)
        # linf
        if eps > 0.0:
            E = np.concatenate([V, -V], axis=1) / eps
            E -= E.max(axis=1, keepdims=True)
            W = np.exp(E)
            W /= W.sum(axis=1, keepdims=True)
            n = V.shape[1]
            return W[:, :n] - W[:, n:]
        S = np.zeros_like(V)
        idx = np.argmax(np.abs(V), axis=1)
        rows = np.arange(V.shape[0])
        S[rows, idx] = np.sign(V[rows, idx])
        return S

    def accumulate_grad(self, x, w):
        g = np.zeros_like(x)
        active = w > 0
        if not np.any(active):
            return g
        V = x[self.pidx][None, :] - self.centers[active]
        S = self._subgrad_rows(V)
        g[self.pidx] = w[active] @ S
        if self.tidx is not None:
            g[self.tidx] -= float(np.sum(w[active]))
        return g

    def jac_rows(self, x, idx):
        V = x[self.pidx][None, :] - self.centers[idx]
        S = self._subgrad_rows(V)
        J = np.zeros((len(idx), x.size))
        J[:, self.pidx] = S
        if self.tidx is not None:
            J[:, self.tidx] = -1.0
        return J

    def hess_comb(self, x, idx, lam):
        if self.norm.kind not in ("l2", "weighted", "gram"):
            return None  # polyhedral kinds are reformulated before polishing
        M = self.norm.matrix if self.norm.matrix is not None else np.eye(self.pidx.size)
        H = np.zeros((x.size, x.size))
        for i, li in zip(idx, lam):
            v = x[self.pidx] - self.centers[i]
            Mv = M @ v
            r = float(np.sqrt(max(v @ Mv, 0.0)))
            if r <= 1e-14:
                return None
            Hi = M / r - np.outer(Mv, Mv) / r**3
            H[np.ix_(self.pidx, self.pidx)] += li * Hi
        return H

    def smooth(self):
        return self.norm.kind in ("l2", "weighted", "gram") or self.smooth_eps > 0.0

    def extended(self, total_dim):
        return NormBallBlock(self.pidx, self.centers, self.norm, self.tidx, self.offset, self.smooth_eps)


class GenericBlock:
    """Arbitrary scalar convex constraints given as (fn, subgrad[, hess]) triples."""

    def __init__(self, constraints: Sequence[tuple]):
        self.cons = list(constraints)

    @property
    def m(self):
        return len(self.cons)

    def values(self, x):
        return np.array([c[0](x) for c in self.cons], dtype=float)

    def accumulate_grad(self, x, w):
        g = np.zeros_like(x)
        for wi, c in zip(w, self.cons):
            if wi > 0:
                g += wi * np.asarray(c[1](x), dtype=float)
        return g

    def jac_rows(self, x, idx):
        return np.array([np.asarray(self.cons[i][1](x), dtype=float) for i in idx])

    def hess_comb(self, x, idx, lam):
        H = np.zeros((x.size, x.size))
        for i, li in zip(idx, lam):
            c = self.cons[i]
            if len(c) < 3 or c[2] is None:
                return None
            H += li * np.asarray(c[2](x), dtype=float)
        return H

    def smooth(self):
        return False

    def extended(self, total_dim):
        return self


@dataclass
class FiniteConvexProgram:
    """Objective + inequality blocks over a box, with optional affine equalities."""

    objective: object
    blocks: list
    box: BoxDomain
    equalities: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def dim(self) -> int:
        return self.box.dim

    @property
    def n_constraints(self) -> int:
        return int(sum(b.m for b in self.blocks))

    def constraint_values(self, x) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([b.values(x) for b in self.blocks])

    def max_violation(self, x) -> float:
        v = self.constraint_values(x)
        r = float(np.max(v, initial=0.0))
        return max(r, self.box.residual(x))


@dataclass
class InnerSolution:
    x_star: np.ndarray
    value: float
    kkt_residual: float
    max_violation: float
    status: str  # "optimal" | "infeasible" | "iter_limit"
    iterations: int = 0
    merit_log: list = field(default_factory=list)
    multipliers: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


# -- reformulation ------------------------------------------------------------


def polyhedral_reformulate(prog: FiniteConvexProgram) -> FiniteConvexProgram:
    """Rewrite l1 / linf norm-ball blocks as affine rows (exact epigraph form).

    linf balls become 2n rows per center; l1 balls add n auxiliary variables
    per center with 2n + 1 rows.  Raises ``ValueError`` on any norm-ball block
    of a non-polyhedral kind.
    """
    poly = [b for b in prog.blocks if isinstance(b, NormBallBlock)]
    for b in poly:
        if not b.norm.is_polyhedral():
            raise ValueError(f"cannot reformulate norm kind {b.norm.kind!r}")
    n_aux = sum(b.pidx.size * b.m for b in poly if b.norm.kind == "l1")
    total = prog.dim + n_aux
    blocks = [b.extended(total) for b in prog.blocks if not isinstance(b, NormBallBlock)]

    aux_lo, aux_hi = [], []
    pos = prog.dim
    width = prog.box.width
    for b in poly:
        d = b.pidx.size
        for i in range(b.m):
            a = b.centers[i]
            rows, rhs = [], []
            if b.norm.kind == "linf":
                for j in range(d):
                    rp = np.zeros(total)
                    rp[b.pidx[j]] = 1.0
                    if b.tidx is not None:
                        rp[b.tidx] -= 1.0
                    rows.append(rp)
                    rhs.append(a[j] + b.offset[i])
                    rm = np.zeros(total)
                    rm[b.pidx[j]] = -1.0
                    if b.tidx is not None:
                        rm[b.tidx] -= 1.0
                    rows.append(rm)
                    rhs.append(-a[j] + b.offset[i])
            else:  # l1: x_j - s_j <= a_j, -x_j - s_j <= -a_j, sum s - t <= offset
                for j in range(d):
                    s_col = pos + j
                    rp = np.zeros(total)
                    rp[b.pidx[j]] = 1.0
                    rp[s_col] = -1.0
                    rows.append(rp)
                    rhs.append(a[j])
                    rm = np.zeros(total)
                    rm[b.pidx[j]] = -1.0
                    rm[s_col] = -1.0
                    rows.append(rm)
                    rhs.append(-a[j])
                rsum = np.zeros(total)
                rsum[pos : pos + d] = 1.0
                if b.tidx is not None:
                    rsum[b.tidx] -= 1.0
                rows.append(rsum)
                rhs.append(b.offset[i])
                s_ub = (
                    np.maximum(
                        np.abs(prog.box.lower[b.pidx] - a), np.abs(prog.box.upper[b.pidx] - a)
                    )
                    + 1.0
                )
                aux_lo.extend([0.0] * d)
                aux_hi.extend(list(s_ub))
                pos += d
            blocks.append(AffineBlock(np.array(rows), np.array(rhs)))

    box = BoxDomain(
        np.concatenate([prog.box.lower, np.array(aux_lo)]),
        np.concatenate([prog.box.upper, np.array(aux_hi)]),
    )
    obj = prog.objective.extend(n_aux) if n_aux else prog.objective
    out = FiniteConvexProgram(obj, blocks, box, prog.equalities)
    out.orig_dim = prog.dim
    return out


# -- box-constrained descent ---------------------------------------------------


def _box_descent(value_grad, x0, lo, hi, gtol, max_iter, merit_log=None):
    """Projected Barzilai-Borwein descent with monotone Armijo backtracking."""
    x = np.clip(x0, lo, hi)
    f, g = value_grad(x)
    if merit_log is not None:
        merit_log.append(f)
    alpha = 1.0 / max(1.0, float(np.max(np.abs(g), initial=0.0)))
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        r = x - np.clip(x - g, lo, hi)
        if float(np.max(np.abs(r), initial=0.0)) <= gtol:
            break
        accepted = False
        t = 1.0
        for _ in range(40):
            xn = np.clip(x - t * alpha * g, lo, hi)
            d = xn - x
            dec = float(g @ d)
            if dec >= 0.0 or np.max(np.abs(d)) == 0.0:
                break
            fn, gn = value_grad(xn)
            if fn <= f + 1e-4 * dec:
                s, yv = d, gn - g
                sy = float(s @ yv)
                if sy > 1e-16:
                    alpha = min(max(float(s @ s) / sy, 1e-12), 1e12)
                x, f, g = xn, fn, gn
                if merit_log is not None:
                    merit_log.append(f)
                accepted = True
                break
            t *= 0.25
        if not accepted:
            alpha *= 0.25
            if alpha < 1e-15:
                break
    return x, f, g, n_iter


def _box_newton_descent(value_grad, hessian, x0, lo, hi, gtol, max_iter, merit_log=None):
    """Projected Newton on a C1 piecewise-smooth merit function over a box.

    Direct linear solves make this immune to the ill-conditioning that stalls
    first-order descent when constraint rows are nearly parallel.  Falls back
    to a gradient step whenever the Newton direction fails to decrease or the
    Hessian is unavailable at a kink.
    """
    x = np.clip(x0, lo, hi)
    f, g = value_grad(x)
    if merit_log is not None:
        merit_log.append(f)
    n_iter = 0
    n = x.size
    for n_iter in range(1, max_iter + 1):
        pg = x - np.clip(x - g, lo, hi)
        if float(np.max(np.abs(pg), initial=0.0)) <= gtol:
            break
        free = ~(((x <= lo + 1e-14) & (g > 0)) | ((x >= hi - 1e-14) & (g < 0)))
        H = hessian(x)
        if H is None:
            d = -g  # kink in a constraint surface: plain gradient direction
        else:
            Hf = H[np.ix_(free, free)]
            rhs = -g[free]
            try:
                d_free = np.linalg.solve(Hf + 1e-12 * np.eye(int(free.sum())), rhs)
            except np.linalg.LinAlgError:
                d_free = np.linalg.lstsq(Hf, rhs, rcond=None)[0]
            d = np.zeros(n)
            d[free] = d_free
        accepted = False
        t = 1.0
        for _ in range(50):
            xn = np.clip(x + t * d, lo, hi)
            step = xn - x
            dec = float(g @ step)
            if dec >= 0.0 or np.max(np.abs(step)) == 0.0:
                break
            fn, gn = value_grad(xn)
            if fn <= f + 1e-4 * dec:
                x, f, g = xn, fn, gn
                if merit_log is not None:
                    merit_log.append(f)
                accepted = True
                break
            # quadratic interpolation on the rejected step
            denom = 2.0 * (fn - f - dec)
            t_new = -dec * t / denom if denom > 0 else 0.5 * t
            t = min(max(t_new, 0.1 * t), 0.5 * t)
        if not accepted:
            alpha = 1.0 / max(1.0, float(np.max(np.abs(g))))
            moved = False
            for _ in range(40):
                xn = np.clip(x - alpha * g, lo, hi)
                step = xn - x
                dec = float(g @ step)
                if dec >= 0.0 or np.max(np.abs(step)) == 0.0:
                    break
                fn, gn = value_grad(xn)
                if fn <= f + 1e-4 * dec:
                    x, f, g = xn, fn, gn
                    if merit_log is not None:
                        merit_log.append(f)
                    moved = True
                    break
                alpha *= 0.25
            if not moved:
                break
    return x, f, g, n_iter


def _active_set_qp(Q, c, A, b, lo, hi, x0, max_iter=200):
    """Primal active-set method for min 0.5 x'Qx + c'x s.t. Ax <= b on a box.

    Requires a feasible ``x0``.  Box bounds are handled as rows.  A tiny
    proximal term regularizes singular Q (LPs), which selects one optimal
    vertex; the caller's KKT polish removes the bias afterwards.  Returns
    (x, lam_rows) or None on failure (cycling, rank trouble).
    """
    n = x0.size
    rows = [A] if A.size else []
    rhs = [b] if A.size else []
    eye = np.eye(n)
    rows += [eye, -eye]
    rhs += [hi, -lo]
    G = np.vstack(rows)
    h = np.concatenate(rhs)
    m = h.size
    scale_rows = np.maximum(np.linalg.norm(G, axis=1), 1e-300)
    sigma = 1e-11 * (1.0 + float(np.abs(Q).max(initial=0.0)) + float(np.abs(c).max(initial=0.0)))
    Qr = Q + sigma * eye

    x = np.clip(x0, lo, hi)
    slack = h - G @ x
    if float(np.min(slack)) < -1e-9 * (1 + float(np.abs(h).max(initial=0.0))):
        return None
    W: list[int] = []
    lam_full = np.zeros(m)
    for _ in range(max_iter):
        k = len(W)
        K = np.zeros((n + k, n + k))
        K[:n, :n] = Qr
        if k:
            Gw = G[W]
            K[:n, n:] = Gw.T
            K[n:, :n] = Gw
        rhs_v = np.concatenate([-c, h[W] if k else np.zeros(0)])
        try:
            sol = np.linalg.solve(K, rhs_v)
        except np.linalg.LinAlgError:
            return None
        x_eq, lam_w = sol[:n], sol[n:]
        d = x_eq - x
        if float(np.max(np.abs(d), initial=0.0)) <= 1e-12 * (1 + float(np.max(np.abs(x)))):
            if k == 0 or np.all(lam_w >= -1e-9):
                lam_full[:] = 0.0
                for i, w in enumerate(W):
                    lam_full[w] = max(lam_w[i], 0.0)
                return x, lam_full, G, h
            W.pop(int(np.argmin(lam_w)))
            continue
        Gd = G @ d
        mask = Gd > 1e-13 * scale_rows
        mask[W] = False
        if np.any(mask):
            steps = (h[mask] - G[mask] @ x) / Gd[mask]
            steps = np.maximum(steps, 0.0)
            i_rel = int(np.argmin(steps))
            alpha = float(steps[i_rel])
            blocking = int(np.where(mask)[0][i_rel])
        else:
            alpha, blocking = 1.0, -1
        if alpha >= 1.0:
            x = x_eq
        else:
            x = x + alpha * d
            if blocking >= 0:
                if len(W) >= n:
                    return None
                W.append(blocking)
    return None


# -- the augmented-Lagrangian driver -------------------------------------------


def _eliminate_equalities(prog: FiniteConvexProgram):
    from .core import affine_parametrize

    A, b = prog.equalities
    par = affine_parametrize(A, b)
    if par.dim == 0:
        raise ValueError("equality system fixes the point entirely; nothing to solve")
    N, p = par.basis, par.particular

    obj = prog.objective
    red_obj = CallableObjective(
        lambda z: obj.value(p + N @ z),
        lambda z: N.T @ obj.grad(p + N @ z),
        (lambda z: N.T @ obj.hess(p + N @ z) @ N) if obj.hess(p) is not None else None,
    )
    blocks = []
    for blk in prog.blocks:
        m = blk.m
        blocks.append(
            GenericBlock(
                [
                    (
                        lambda z, i=i, blk=blk: float(blk.values(p + N @ z)[i]),
                        lambda z, i=i, blk=blk: N.T @ blk.jac_rows(p + N @ z, [i])[0],
                    )
                    for i in range(m)
                ]
            )
        )
    # original box becomes affine rows in z
    n = prog.dim
    A_box = np.vstack([N, -N])
    b_box = np.concatenate([prog.box.upper - p, p - prog.box.lower])
    blocks.append(AffineBlock(A_box, b_box))
    zbox = par.z_box(prog.box)
    red = FiniteConvexProgram(red_obj, blocks, zbox)
    return red, par


def solve_finite_convex(
    prog: FiniteConvexProgram,
    x0,
    tol: float = 1e-8,
    max_outer: int = 500,
    max_inner: int = 200,
    reformulate: bool = True,
    polish: bool = True,
    max_total_iter: int = 50_000,
) -> InnerSolution:
    """Solve ``prog`` to tolerance ``tol`` starting from ``x0``.

    Returns status "optimal" when both the KKT residual and the worst
    constraint violation are below ``tol`` (scaled by 1 + |value|),
    "infeasible" when the minimized violation stalls above tolerance, and
    "iter_limit" otherwise.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")

    if prog.equalities is not None:
        red, par = _eliminate_equalities(prog)
        z0 = par.coordinates(np.clip(np.asarray(x0, dtype=float), prog.box.lower, prog.box.upper))
        sol = solve_finite_convex(red, z0, tol, max_outer, max_inner, reformulate=False,
                                  polish=polish, max_total_iter=max_total_iter)
        x = par.point(sol.x_star)
        return InnerSolution(
            x, prog.objective.value(x), sol.kkt_residual, prog.max_violation(x), sol.status,
            sol.iterations, sol.merit_log,
        )

    needs_reform = any(
        isinstance(b, NormBallBlock) and b.norm.is_polyhedral() and b.smooth_eps <= 0.0
        for b in prog.blocks
    )
    if needs_reform and reformulate:
        ext = polyhedral_reformulate(prog)
        x0e = np.zeros(ext.dim)
        xc = np.clip(np.asarray(x0, dtype=float), prog.box.lower, prog.box.upper)
        x0e[: prog.dim] = xc
        # feasible auxiliary start: s_j slightly above |x_j - a_j| per l1 center
        pos = prog.dim
        for blk in prog.blocks:
            if isinstance(blk, NormBallBlock) and blk.norm.kind == "l1":
                d = blk.pidx.size
                for i in range(blk.m):
                    s = np.abs(xc[blk.pidx] - blk.centers[i]) + 1e-9
                    x0e[pos : pos + d] = np.minimum(s, ext.box.upper[pos : pos + d])
                    pos += d
        sol = _solve_smooth(ext, x0e, tol, max_outer, max_inner, polish, max_total_iter)
        x = sol.x_star[: prog.dim]
        return InnerSolution(
            x, prog.objective.value(x), sol.kkt_residual, prog.max_violation(x), sol.status,
            sol.iterations, sol.merit_log,
        )
    if needs_reform and not reformulate:
        return _solve_smoothing_continuation(prog, x0, tol, max_outer, max_inner, max_total_iter)
    return _solve_smooth(prog, np.asarray(x0, dtype=float), tol, max_outer, max_inner, polish,
                         max_total_iter)


def _solve_smoothing_continuation(prog, x0, tol, max_outer, max_inner, max_total_iter):
    """Nonsmooth path: solve a sequence of smoothed surrogates, warm-started."""
    x = np.asarray(x0, dtype=float)
    sol = None
    for eps in (1e-1, 1e-3, 1e-5, 1e-7, 1e-9):
        blocks = [
            NormBallBlock(b.pidx, b.centers, b.norm, b.tidx, b.offset, smooth_eps=eps)
            if isinstance(b, NormBallBlock) and b.norm.is_polyhedral()
            else b
            for b in prog.blocks
        ]
        smoothed = FiniteConvexProgram(prog.objective, blocks, prog.box)
        sol = _solve_smooth(smoothed, x, tol, max_outer, max_inner, False, max_total_iter // 5)
        x = sol.x_star
    viol = prog.max_violation(x)
    status = sol.status if viol <= 10 * tol * (1 + abs(sol.value)) + 1e-9 else "iter_limit"
    return InnerSolution(x, prog.objective.value(x), sol.kkt_residual, viol, status,
                         sol.iterations, sol.merit_log)


def _solve_smooth(prog, x0, tol, max_outer, max_inner, polish, max_total_iter=50_000):
    lo, hi = prog.box.lower, prog.box.upper
    x = np.clip(x0, lo, hi)
    obj = prog.objective
    blocks = prog.blocks
    m = prog.n_constraints
    merit_log = []

    if m == 0:
        def vg(z):
            return obj.value(z), obj.grad(z)

        x, f, g, it = _box_descent(vg, x, lo, hi, 0.01 * tol, max_total_iter, merit_log)
        kkt = float(np.max(np.abs(x - np.clip(x - g, lo, hi)), initial=0.0))
        status = "optimal" if kkt <= tol * (1.0 + abs(f)) else "iter_limit"
        return InnerSolution(x, f, kkt, 0.0, status, it, merit_log)

    # Phase 1 runs the multiplier loop at a moderate tolerance so the active
    # set settles cheaply; the Newton polish then snaps onto the KKT system.
    # Only if polishing fails does a second, tighter multiplier phase run.
    affine = [b for b in blocks if isinstance(b, AffineBlock)]
    if len(affine) > 1:
        merged = AffineBlock(
            np.vstack([b.A for b in affine]), np.concatenate([b.b for b in affine])
        )
        blocks = [b for b in blocks if not isinstance(b, AffineBlock)] + [merged]
        prog = FiniteConvexProgram(obj, blocks, prog.box)
        m = prog.n_constraints

    def split(v):
        out = []
        k = 0
        for b in blocks:
            out.append(v[k : k + b.m])
            k += b.m
        return out

    # direct active-set solve for the all-affine case; the multiplier loop
    # below is the general engine and the fallback
    if isinstance(obj, (LinearObjective, QuadraticObjective)) and all(
        isinstance(b, AffineBlock) for b in blocks
    ):
        A0 = blocks[0].A if blocks else np.zeros((0, x.size))
        b0 = blocks[0].b if blocks else np.zeros(0)
        qp = _active_set_qp(obj.hess(x), obj.grad(np.zeros(x.size)), A0, b0, lo, hi, x)
        if qp is not None:
            xq, lam_rows = qp[0], qp[1]
            lam_q = lam_rows[:m]
            if polish:
                xq, lam_q = _active_set_polish(prog, xq, lam_q, tol)
            okq, kktq, violq, fq = _assess(prog, xq, lam_q, tol, split)
            if okq:
                return InnerSolution(xq, fq, kktq, violq, "optimal", 1, merit_log, lam_q)

    lam = np.zeros(m)
    state = None
    total_iter = 0
    for phase_tol in (max(tol, 1e-6), tol):
        budget = max_total_iter - total_iter
        if budget <= 0:
            break
        x, lam, it, infeas = _multiplier_loop(
            prog, x, lam, phase_tol, max_outer, max_inner, budget, merit_log, split
        )
        total_iter += it
        if infeas:
            return _feasibility_phase(prog, x, tol, max_inner, merit_log, total_iter)
        if polish:
            x, lam = _active_set_polish(prog, x, lam, tol)
        state = _assess(prog, x, lam, tol, split)
        if state[0] or phase_tol <= tol:
            break
    kkt, viol, fval, ok_flag = state[1], state[2], state[3], state[0]
    status = "optimal" if ok_flag else "iter_limit"
    return InnerSolution(x, fval, kkt, viol, status, total_iter, merit_log, lam)


def _assess(prog, x, lam, tol, split):
    fval = prog.objective.value(x)
    scale = 1.0 + abs(fval)
    kkt = _kkt_residual(prog, x, lam, split)
    viol = prog.max_violation(x)
    ok = viol <= max(tol * scale, 1e-9) and kkt <= max(50 * tol * scale, 1e-7)
    return ok, kkt, viol, fval


def _multiplier_loop(prog, x, lam, tol, max_outer, max_inner, max_total_iter, merit_log, split):
    lo, hi = prog.box.lower, prog.box.upper
    obj = prog.objective
    blocks = prog.blocks
    total_iter = 0
    stall = 0
    prev_viol = np.inf

    # Newton subproblem solves when curvature is available (quadratic or
    # linear objective, smooth constraint blocks); BB descent otherwise
    newton_ready = obj.hess(x) is not None and all(b.smooth() for b in blocks)
    mu = 10.0
    mu_max = 1e12
    eta = 0.1
    omega = 0.02

    for _ in range(max_outer):
        lam_parts = split(lam)

        def vg(z):
            phi = obj.value(z)
            g = obj.grad(z).astype(float, copy=True)
            for b, lp in zip(blocks, lam_parts):
                if isinstance(b, NormBallBlock):
                    p, gb = b.al_contrib(z, lp, mu)
                    phi += p
                    g = g + gb
                else:
                    c = b.values(z)
                    t = np.maximum(lp + mu * c, 0.0)
                    phi += float(np.sum(t * t - lp * lp)) / (2.0 * mu)
                    g = g + b.accumulate_grad(z, t)
            return phi, g

        def al_hess(z):
            H = obj.hess(z)
            if H is None:
                return None
            H = np.array(H, dtype=float, copy=True)
            for b, lp in zip(blocks, lam_parts):
                c = b.values(z)
                t = np.maximum(lp + mu * c, 0.0)
                act = np.where(t > 0.0)[0]
                if act.size == 0:
                    continue
                J = b.jac_rows(z, act)
                H += mu * (J.T @ J)
                Hc = b.hess_comb(z, act, t[act])
                if Hc is None:
                    return None
                H += Hc
            return H

        it = None
        if newton_ready:
            out = _box_newton_descent(
                vg, al_hess, x, lo, hi, omega, max(12, max_inner // 4), merit_log
            )
            if out is not None:
                x, _, _, it = out
        if it is None:
            x, _, _, it = _box_descent(vg, x, lo, hi, omega, max_inner, merit_log)
        total_iter += it
        cvals = np.concatenate([b.values(x) for b in blocks])
        viol = float(np.max(cvals, initial=0.0))

        if total_iter >= max_total_iter:
            lam = np.maximum(lam + mu * cvals, 0.0)
            break

        if viol <= max(eta, tol):
            lam = np.maximum(lam + mu * cvals, 0.0)
            kkt = _kkt_residual(prog, x, lam, split)
            scale = 1.0 + abs(obj.value(x))
            if viol <= tol * scale and kkt <= tol * scale:
                break
            eta = max(0.2 * eta, 0.1 * tol)
            omega = max(0.15 * omega, 0.05 * tol)
        else:
            mu = min(10.0 * mu, mu_max)
            if viol > 0.9 * prev_viol:
                stall += 1
            else:
                stall = 0
            if mu >= mu_max and stall >= 50:
                return x, lam, total_iter, True
        prev_viol = viol
    return x, lam, total_iter, False


def _fast_kkt_ok(prog, x, lam, split, thresh):
    scale = 1.0 + abs(prog.objective.value(x))
    return _kkt_residual(prog, x, lam, split) <= thresh * scale


def _kkt_residual(prog, x, lam, split):
    g = prog.objective.grad(x).astype(float, copy=True)
    for b, lp in zip(prog.blocks, split(lam)):
        g = g + b.accumulate_grad(x, lp)
    lo, hi = prog.box.lower, prog.box.upper
    r_stat = float(np.max(np.abs(x - np.clip(x - g, lo, hi)), initial=0.0))
    comp = 0.0
    for b, lp in zip(prog.blocks, split(lam)):
        c = b.values(x)
        comp = max(comp, float(np.max(np.abs(lp * np.minimum(c, 0.0)), initial=0.0)))
    return max(r_stat, comp)


def _feasibility_phase(prog, x, tol, max_inner, merit_log, total_iter):
    """Minimize the squared violation; report the best point as infeasible."""
    blocks = prog.blocks
    lo, hi = prog.box.lower, prog.box.upper

    def vg(z):
        f = 0.0
        g = np.zeros_like(z)
        for b in blocks:
            c = np.maximum(b.values(z), 0.0)
            f += 0.5 * float(c @ c)
            g += b.accumulate_grad(z, c)
        return f, g

    x, _, _, it = _box_descent(vg, x, lo, hi, 1e-12, 50 * max_inner, None)
    viol = prog.max_violation(x)
    status = "infeasible" if viol > tol else "iter_limit"
    return InnerSolution(x, prog.objective.value(x), np.inf, viol, status, total_iter + it, merit_log)


# -- active-set Newton polish ---------------------------------------------------


def _active_set_polish(prog, x, lam, tol, act_tol=1e-6, max_newton=40):
    """Snap (x, lam) onto the KKT system of the active set; reject on failure."""
    obj = prog.objective
    H0 = obj.hess(x)
    if H0 is None:
        return x, lam

    x0, lam0 = x.copy(), lam.copy()
    lo, hi = prog.box.lower, prog.box.upper

    offsets = np.cumsum([0] + [b.m for b in prog.blocks])
    cvals = prog.constraint_values(x)
    scale = 1.0 + float(np.max(np.abs(cvals), initial=0.0))
    active = [
        i for i in range(cvals.size) if cvals[i] >= -act_tol * scale or lam[i] > act_tol
    ]
    for _ in range(len(active) + 1):
        res = _polish_attempt(prog, x0, lam0, active, offsets, lo, hi, max_newton)
        if res is None:
            return x0, lam0
        x1, lam_act, ok = res
        if not ok:
            return x0, lam0
        neg = [a for a, l in zip(active, lam_act) if l < -1e-9]
        if not neg:
            lam1 = np.zeros_like(lam0)
            for a, l in zip(active, lam_act):
                lam1[a] = max(l, 0.0)
            # accept only if it genuinely improves the KKT measure
            def split(v):
                return [v[offsets[k] : offsets[k + 1]] for k in range(len(prog.blocks))]
            old = _kkt_residual(prog, x0, lam0, split) + max(prog.max_violation(x0) - 1e-12, 0.0)
            new = _kkt_residual(prog, x1, lam1, split) + max(prog.max_violation(x1) - 1e-12, 0.0)
            return (x1, lam1) if new <= old else (x0, lam0)
        active = [a for a in active if a not in set(neg)]
        if not active:
            return x0, lam0
    return x0, lam0


def _polish_attempt(prog, x, lam, active, offsets, lo, hi, max_newton):
    if not active:
        return None
    x = x.copy()
    n = x.size
    free = [
        j
        for j in range(n)
        if not (x[j] <= lo[j] + 1e-9 and _bound_push(prog, x, lam, j) > 0)
        and not (x[j] >= hi[j] - 1e-9 and _bound_push(prog, x, lam, j) < 0)
    ]
    free = np.asarray(free, dtype=int)
    if free.size == 0:
        return None
    lam_act = np.array([max(lam[a], 0.0) for a in active])

    def block_of(i):
        for k in range(len(prog.blocks)):
            if offsets[k] <= i < offsets[k + 1]:
                return k, i - offsets[k]
        raise IndexError

    def residual(xv, lv):
        g = prog.objective.grad(xv).astype(float, copy=True)
        J = np.zeros((len(active), n))
        cv = np.zeros(len(active))
        for r, a in enumerate(active):
            k, i = block_of(a)
            J[r] = prog.blocks[k].jac_rows(xv, [i])[0]
            cv[r] = prog.blocks[k].values(xv)[i]
        g = g + J.T @ lv
        return np.concatenate([g[free], cv]), J

    def hess(xv, lv):
        H = prog.objective.hess(xv)
        if H is None:
            return None
        H = np.array(H, dtype=float, copy=True)
        by_block = {}
        for a, l in zip(active, lv):
            k, i = block_of(a)
            by_block.setdefault(k, ([], []))
            by_block[k][0].append(i)
            by_block[k][1].append(l)
        for k, (idx, ls) in by_block.items():
            Hb = prog.blocks[k].hess_comb(xv, idx, np.asarray(ls))
            if Hb is None:
                return None
            H = H + Hb
        return H

    R, J = residual(x, lam_act)
    r0 = float(np.linalg.norm(R))
    for _ in range(max_newton):
        if float(np.linalg.norm(R, ord=np.inf)) <= 1e-12:
            break
        H = hess(x, lam_act)
        if H is None:
            return None
        na, nf = len(active), free.size
        K = np.zeros((nf + na, nf + na))
        K[:nf, :nf] = H[np.ix_(free, free)]
        K[:nf, nf:] = J[:, free].T
        K[nf:, :nf] = J[:, free]
        try:
            delta = np.linalg.solve(K, -R)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(K, -R, rcond=None)[0]
        if not np.all(np.isfinite(delta)):
            return None
        step = 1.0
        improved = False
        for _ in range(30):
            xn = x.copy()
            xn[free] = x[free] + step * delta[:nf]
            ln = lam_act + step * delta[nf:]
            Rn, Jn = residual(xn, ln)
            if np.linalg.norm(Rn) < np.linalg.norm(R) * (1.0 - 1e-4 * step) + 1e-15:
                x, lam_act, R, J = xn, ln, Rn, Jn
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    ok = (
        float(np.linalg.norm(R, ord=np.inf)) <= 1e-7
        and prog.box.residual(x) <= 1e-9
    )
    return x, lam_act, ok


def _bound_push(prog, x, lam, j):
    """Sign of the Lagrangian gradient component j (decides if a bound is binding)."""
    g = prog.objective.grad(x).astype(float, copy=True)
    k = 0
    for b in prog.blocks:
        g = g + b.accumulate_grad(x, np.maximum(lam[k : k + b.m], 0.0))
        k += b.m
    return g[j]
