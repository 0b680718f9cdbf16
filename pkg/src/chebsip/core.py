"""Vectors, norms with subgradient oracles, and compact set descriptions.

Everything in this module is immutable after construction and free of
hidden state, so objects can be shared freely between threads and across
repeated solver calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Norm",
    "BoxDomain",
    "ConstraintSet",
    "AffineParametrization",
    "affine_parametrize",
    "gram_matrix",
    "legendre_shifted_basis",
    "monomial_basis",
]

_SPD_RTOL = 1e-10


def as_vec(v, dim: int | None = None) -> np.ndarray:
    """Coerce ``v`` to a finite 1-d float array, optionally checking its length."""
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.size == 0:
        raise ValueError("empty vector")
    if not np.all(np.isfinite(a)):
        raise ValueError("vector has non-finite entries")
    if dim is not None and a.size != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {a.size}")
    return a


class Norm:
    """A norm on R^n with an explicit subgradient selection.

    Supported kinds: ``l1``, ``l2``, ``linf``, and the inner-product norms
    ``weighted`` / ``gram`` given by sqrt(v' M v) for a symmetric positive
    definite matrix M.  The two matrix kinds are computationally identical;
    the tag records whether M was supplied as a weighting matrix or derived
    from a basis Gram matrix.

    At kink points the subgradient selection is deterministic: zero entries
    of the sign pattern for l1, the zero vector at the origin for every kind.
    """

    KINDS = ("l1", "l2", "linf", "weighted", "gram")

    def __init__(self, kind: str, matrix=None):
        kind = kind.lower()
        if kind not in self.KINDS:
            raise ValueError(f"unknown norm kind {kind!r}")
        self.kind = kind
        if kind in ("weighted", "gram"):
            if matrix is None:
                raise ValueError(f"{kind} norm requires a matrix")
            M = np.asarray(matrix, dtype=float)
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise ValueError("weight matrix must be square")
            if not np.allclose(M, M.T, atol=1e-12 * (1.0 + np.abs(M).max())):
                raise ValueError("weight matrix must be symmetric")
            M = 0.5 * (M + M.T)
            w = np.linalg.eigvalsh(M)
            if w[0] <= _SPD_RTOL * max(w[-1], 0.0):
                raise ValueError(
                    f"weight matrix not positive definite: eig range [{w[0]:.3e}, {w[-1]:.3e}]"
                )
            self.matrix = M
            self.matrix.setflags(write=False)
        else:
            if matrix is not None:
                raise ValueError(f"{kind} norm takes no matrix")
            self.matrix = None

    # -- evaluation ---------------------------------------------------------

    def __call__(self, v) -> float:
        v = np.asarray(v, dtype=float)
        if self.kind == "l1":
            return float(np.sum(np.abs(v)))
        if self.kind == "l2":
            return float(np.linalg.norm(v))
        if self.kind == "linf":
            return float(np.max(np.abs(v)))
        self._check_dim(v)
        return float(np.sqrt(max(v @ self.matrix @ v, 0.0)))

    def many(self, V: np.ndarray) -> np.ndarray:
        """Norms of the rows of ``V`` (vectorized)."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        if self.kind == "l1":
            return np.sum(np.abs(V), axis=1)
        if self.kind == "l2":
            return np.linalg.norm(V, axis=1)
        if self.kind == "linf":
            return np.max(np.abs(V), axis=1)
        self._check_dim(V[0])
        q = np.einsum("ij,jk,ik->i", V, self.matrix, V)
        return np.sqrt(np.maximum(q, 0.0))

    def subgradient(self, v) -> np.ndarray:
        """An element of the subdifferential of the norm at ``v``.

        Satisfies ||w|| >= ||v|| + <s, w - v> for all w.  Returns the zero
        vector at v = 0 (a valid selection since the dual norm of 0 is 0).
        """
        v = np.asarray(v, dtype=float)
        nv = self(v)
        if nv == 0.0:
            return np.zeros_like(v)
        if self.kind == "l1":
            return np.sign(v)
        if self.kind == "l2":
            return v / nv
        if self.kind == "linf":
            # steepest selection: put all mass on the first max-magnitude entry
            i = int(np.argmax(np.abs(v)))
            s = np.zeros_like(v)
            s[i] = np.sign(v[i])
            return s
        return (self.matrix @ v) / nv

    def is_smooth(self) -> bool:
        """True when the norm is differentiable away from the origin."""
        return self.kind in ("l2", "weighted", "gram")

    def is_polyhedral(self) -> bool:
        return self.kind in ("l1", "linf")

    def scale_bound(self, n: int) -> float:
        """A constant c with ||v|| <= c * ||v||_inf for v in R^n."""
        if self.kind == "l1":
            return float(n)
        if self.kind == "l2":
            return float(np.sqrt(n))
        if self.kind == "linf":
            return 1.0
        w = np.linalg.eigvalsh(self.matrix)
        return float(np.sqrt(w[-1] * n))

    def _check_dim(self, v):
        if self.matrix is not None and v.shape[-1] != self.matrix.shape[0]:
            raise ValueError(
                f"dimension mismatch: norm on R^{self.matrix.shape[0]}, vector in R^{v.shape[-1]}"
            )

    def __repr__(self):
        if self.matrix is None:
            return f"Norm({self.kind!r})"
        return f"Norm({self.kind!r}, {self.matrix.shape[0]}x{self.matrix.shape[1]})"


def norm_eval(norm: Norm, v) -> float:
    """Evaluate ``norm`` at ``v`` (functional form of ``Norm.__call__``)."""
    return norm(v)


def norm_subgradient(norm: Norm, v) -> np.ndarray:
    return norm.subgradient(v)


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box { x : lower <= x <= upper } componentwise."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = as_vec(self.lower)
        hi = as_vec(self.upper, lo.size)
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def residual(self, x) -> float:
        x = np.asarray(x, dtype=float)
        over = np.maximum(x - self.upper, 0.0)
        under = np.maximum(self.lower - x, 0.0)
        return float(max(over.max(initial=0.0), under.max(initial=0.0)))

    def inflate(self, factor: float) -> "BoxDomain":
        c, h = self.center, 0.5 * self.width
        return BoxDomain(c - factor * h, c + factor * h)

    def corners(self) -> np.ndarray:
        """All 2^dim corner points (dim is expected to be small)."""
        n = self.dim
        if n > 16:
            raise ValueError("too many corners to enumerate")
        out = np.empty((2**n, n))
        for i in range(2**n):
            mask = [(i >> j) & 1 for j in range(n)]
            out[i] = np.where(mask, self.upper, self.lower)
        return out


class ConstraintSet:
    """A compact set presented as a box plus scalar inequality constraints.

    The set is { u in box : h_j(u) <= 0 for all j, A u = y }.  Inequalities
    are callables; affine halfspaces and the optional equality system are
    stored in matrix form so that residuals vectorize.  Construction fails
    unless at least one feasible point is known (supplied or found by probing).
    """

    def __init__(
        self,
        box: BoxDomain,
        inequalities: Sequence[Callable[[np.ndarray], float]] = (),
        halfspaces: tuple[np.ndarray, np.ndarray] | None = None,
        equalities: tuple[np.ndarray, np.ndarray] | None = None,
        feasible_point=None,
        probe: int = 4096,
    ):
        self.box = box
        self.inequalities = tuple(inequalities)
        if halfspaces is not None:
            A, b = halfspaces
            self.half_A = np.atleast_2d(np.asarray(A, dtype=float))
            self.half_b = as_vec(b, self.half_A.shape[0]) if self.half_A.size else np.zeros(0)
        else:
            self.half_A = np.zeros((0, box.dim))
            self.half_b = np.zeros(0)
        if equalities is not None:
            A, y = equalities
            self.eq_A = np.atleast_2d(np.asarray(A, dtype=float))
            self.eq_y = as_vec(y, self.eq_A.shape[0])
        else:
            self.eq_A = None
            self.eq_y = None

        self.feasible_point = self._find_feasible(feasible_point, probe)

    def _find_feasible(self, guess, probe: int) -> np.ndarray:
        if guess is not None:
            g = as_vec(guess, self.box.dim)
            if self.residual(g) <= 1e-9:
                return g
        c = self.box.center
        if self.residual(c) <= 1e-9:
            return c
        rng = np.random.default_rng(0)
        lo, hi = self.box.lower, self.box.upper
        best, best_r = c, self.residual(c)
        for _ in range(probe):
            u = lo + rng.random(self.box.dim) * (hi - lo)
            r = self.residual(u)
            if r < best_r:
                best, best_r = u, r
            if best_r <= 1e-9:
                return best
        raise ValueError(f"no feasible point found (best residual {best_r:.3e})")

    @property
    def dim(self) -> int:
        return self.box.dim

    def residual(self, u) -> float:
        """max(0, box violation, h_j(u), |Au - y|_inf); zero iff u is feasible."""
        u = np.asarray(u, dtype=float)
        r = self.box.residual(u)
        if self.half_A.shape[0]:
            r = max(r, float(np.max(self.half_A @ u - self.half_b, initial=0.0)))
        for h in self.inequalities:
            r = max(r, float(h(u)))
        if self.eq_A is not None:
            r = max(r, float(np.max(np.abs(self.eq_A @ u - self.eq_y), initial=0.0)))
        return max(r, 0.0)

    def residual_many(self, U: np.ndarray) -> np.ndarray:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        r = np.maximum(U - self.box.upper, 0.0).max(axis=1)
        r = np.maximum(r, np.maximum(self.box.lower - U, 0.0).max(axis=1))
        if self.half_A.shape[0]:
            r = np.maximum(r, np.max(U @ self.half_A.T - self.half_b, axis=1, initial=0.0))
        for h in self.inequalities:
            r = np.maximum(r, np.array([h(u) for u in U]))
        if self.eq_A is not None:
            r = np.maximum(r, np.max(np.abs(U @ self.eq_A.T - self.eq_y), axis=1, initial=0.0))
        return np.maximum(r, 0.0)

    def contains(self, u, tol: float = 1e-9) -> bool:
        return self.residual(u) <= tol


def feasibility_residual(cset: ConstraintSet, u) -> float:
    """Functional form of ``ConstraintSet.residual``."""
    return cset.residual(u)


@dataclass(frozen=True)
class AffineParametrization:
    """The solution set {u : A u = y} written as u = p + N z.

    ``p`` is a particular solution and the columns of ``N`` form an
    orthonormal basis of the null space of A, so z = N' (u - p).
    """

    particular: np.ndarray
    basis: np.ndarray  # n x k, orthonormal columns

    @property
    def ambient_dim(self) -> int:
        return self.particular.size

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def point(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.dim == 0:
            return self.particular.copy()
        return self.particular + self.basis @ z

    def points(self, Z: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if self.dim == 0:
            return np.tile(self.particular, (Z.shape[0], 1))
        return self.particular + Z @ self.basis.T

    def coordinates(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.basis.T @ (u - self.particular)

    def z_box(self, box: BoxDomain) -> BoxDomain:
        """Interval-arithmetic bounds on z implied by ``p + N z`` in ``box``.

        The returned box contains {z : p + N z in box}; it is not tight, so
        the original box constraints must still be enforced on u = p + N z.
        """
        if self.dim == 0:
            # fully determined system: a dummy frozen coordinate keeps callers uniform
            return BoxDomain(np.array([0.0]), np.array([0.0]))
        # z = N'(u - p) with u in box: componentwise interval bound
        lo = np.empty(self.dim)
        hi = np.empty(self.dim)
        u_lo = box.lower - self.particular
        u_hi = box.upper - self.particular
        for i in range(self.dim):
            col = self.basis[:, i]
            lo[i] = np.sum(np.minimum(col * u_lo, col * u_hi))
            hi[i] = np.sum(np.maximum(col * u_lo, col * u_hi))
        return BoxDomain(lo, hi)


def affine_parametrize(A, y, tol: float = 1e-8) -> AffineParametrization:
    """Parametrize the affine solution set of A u = y.

    Raises ``ValueError`` when the system is inconsistent (least-squares
    residual above ``tol``).  A zero-row A yields p = 0 and N = I.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A.reshape(1, -1)
    m, n = A.shape
    y = as_vec(y, m) if m else np.zeros(0)
    if m == 0:
        return AffineParametrization(np.zeros(n), _fix_signs(np.eye(n)))
    U, s, Vt = np.linalg.svd(A, full_matrices=True)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > max(smax, 1.0) * 1e-12))
    p = np.linalg.lstsq(A, y, rcond=None)[0]
    res = np.max(np.abs(A @ p - y), initial=0.0)
    if res > tol:
        raise ValueError(f"inconsistent affine system: residual {res:.3e}")
    N = Vt[rank:].T  # orthonormal null-space basis
    return AffineParametrization(p, _fix_signs(N))


def _fix_signs(N: np.ndarray) -> np.ndarray:
    """Flip column signs so the largest-magnitude entry is positive (determinism)."""
    N = N.copy()
    for j in range(N.shape[1]):
        col = N[:, j]
        i = int(np.argmax(np.abs(col)))
        if col[i] < 0:
            N[:, j] = -col
    return N


# -- Gram matrices for function-space norms ----------------------------------

_GL_NODES = 64


def monomial_basis(degrees: Sequence[int]) -> list[Callable[[np.ndarray], np.ndarray]]:
    """Monomials x**d for d in ``degrees``."""
    return [(lambda x, d=int(d): x**d) for d in degrees]


def legendre_shifted_basis(count: int) -> list[Callable[[np.ndarray], np.ndarray]]:
    """First ``count`` shifted Legendre polynomials, orthonormal on L2[0, 1]."""
    out = []
    for k in range(count):
        c = np.zeros(k + 1)
        c[k] = 1.0
        out.append(
            lambda x, c=c, k=k: np.sqrt(2 * k + 1.0)
            * np.polynomial.legendre.legval(2.0 * np.asarray(x) - 1.0, c)
        )
    return out


def gram_matrix(basis, interval: tuple[float, float] = (0.0, 1.0), nodes: int = _GL_NODES) -> np.ndarray:
    """Gram matrix G_ij = <b_i, b_j> in L2 on ``interval`` by Gauss-Legendre quadrature.

    The fixed 64-node rule integrates polynomial products up to degree 127
    exactly, which covers every basis used in this package.
    """
    a, b = float(interval[0]), float(interval[1])
    if not b > a:
        raise ValueError("empty integration interval")
    x, w = np.polynomial.legendre.leggauss(nodes)
    t = 0.5 * (b - a) * (x + 1.0) + a
    w = 0.5 * (b - a) * w
    vals = np.array([np.asarray(f(t), dtype=float) for f in basis])
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite basis evaluation in quadrature")
    G = (vals * w) @ vals.T
    G = 0.5 * (G + G.T)
    if not np.all(np.isfinite(G)):
        raise ValueError("non-finite Gram matrix")
    return G


def monomial_to_legendre(count: int) -> np.ndarray:
    """Matrix T with (monomial coefficients) = T @ (shifted-Legendre coefficients).

    Column k of T holds the monomial coefficients of the k-th orthonormal
    shifted Legendre polynomial on [0, 1].
    """
    T = np.zeros((count, count))
    for k in range(count):
        c = np.zeros(k + 1)
        c[k] = 1.0
        # legendre series in t = 2x - 1 -> polynomial in x
        poly_t = np.polynomial.legendre.Legendre(c).convert(kind=np.polynomial.Polynomial)
        poly_x = poly_t(np.polynomial.Polynomial([-1.0, 2.0]))
        coef = np.sqrt(2 * k + 1.0) * poly_x.coef
        T[: coef.size, k] = coef
    return T
