"""Upwind finite-difference discretization of the controlled generator on a box.

Interior unknowns are ordered lexicographically with ``x1`` fastest; boundary
values are fixed at zero and eliminated.  The assembled matrix is ``-L_v``,
an M-matrix for every drift and policy, so its smallest eigenvalue is real,
positive, and carries a nonnegative eigenvector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .model import Domain, ModelParams, NoiseSpec, eval_noise, reduced_drift


class EigenSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid:
    domain: Domain
    n: tuple[int, int, int]

    def __post_init__(self):
        n = tuple(int(v) for v in self.n)
        if len(n) != 3 or min(n) < 3:
            raise ValueError(f"need at least 3 nodes per axis, got {self.n}")
        object.__setattr__(self, "n", n)

    @property
    def h(self) -> np.ndarray:
        return self.domain.width / (np.asarray(self.n) - 1)

    @property
    def m(self) -> tuple[int, int, int]:
        """Interior node counts per axis."""
        return tuple(v - 2 for v in self.n)

    @property
    def size(self) -> int:
        m1, m2, m3 = self.m
        return m1 * m2 * m3

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, k) for lo, hi, k in zip(self.domain.lo, self.domain.hi, self.n)]

    def index(self, i1, i2, i3):
        """Lattice indices (1-based interior, as on the full grid) -> unknown index."""
        m1, m2, _ = self.m
        return (np.asarray(i1) - 1) + m1 * ((np.asarray(i2) - 1) + m2 * (np.asarray(i3) - 1))

    def lattice(self, idx):
        m1, m2, _ = self.m
        idx = np.asarray(idx)
        return idx % m1 + 1, (idx // m1) % m2 + 1, idx // (m1 * m2) + 1

    def interior_points(self) -> np.ndarray:
        a1, a2, a3 = (ax[1:-1] for ax in self.axes())
        X1, X2, X3 = np.meshgrid(a1, a2, a3, indexing="ij")
        return np.stack([X1.ravel(order="F"), X2.ravel(order="F"), X3.ravel(order="F")], axis=1)

    def all_points(self) -> np.ndarray:
        X1, X2, X3 = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([X1.ravel(order="F"), X2.ravel(order="F"), X3.ravel(order="F")], axis=1)

    def to_full(self, vec: np.ndarray, boundary: float = 0.0) -> np.ndarray:
        """Interior vector -> ``(n1, n2, n3)`` array with ``boundary`` on the faces."""
        full = np.full(self.n, boundary, dtype=np.float64)
        full[1:-1, 1:-1, 1:-1] = np.asarray(vec, dtype=np.float64).reshape(self.m, order="F")
        return full

    def to_interior(self, full: np.ndarray) -> np.ndarray:
        return np.asarray(full)[1:-1, 1:-1, 1:-1].ravel(order="F")


def build_grid(d: Domain, n) -> Grid:
    return Grid(d, tuple(n))


@dataclass(frozen=True)
class SparseOperator:
    matrix: sp.csr_matrix
    grid: Grid
    policy_values: np.ndarray

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def triplets(self):
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order], coo.col[order], coo.data[order]


@dataclass(frozen=True)
class EigenPair:
    lam: float
    psi: np.ndarray  # interior values, max |psi| = 1
    iterations: int
    residual_norm: float

    def psi_full(self, grid: Grid) -> np.ndarray:
        return grid.to_full(self.psi)


def _policy_vector(grid: Grid, policy) -> np.ndarray:
    if hasattr(policy, "values"):
        v = np.asarray(policy.values, dtype=np.float64)
    else:
        v = np.asarray(policy, dtype=np.float64)
    if v.ndim == 0:
        v = np.full(grid.size, float(v))
    if v.shape != (grid.size,):
        raise ValueError(f"policy has shape {v.shape}, expected ({grid.size},)")
    return v


def assemble(g: Grid, p: ModelParams, n: NoiseSpec, policy=0.0) -> SparseOperator:
    """Build ``-L_v`` on the interior of ``g``.

    The ``x1`` diffusion uses the central three-point stencil weighted by
    ``sigma(x)**2 / 2``; every drift component uses first-order upwinding.
    ``policy`` is a scalar, an interior vector, or an object with ``.values``.
    """
    v = _policy_vector(g, policy)
    X = g.interior_points()
    drift = reduced_drift(X, p)
    drift[:, 0] += v
    a_half = 0.5 * np.asarray(eval_noise(X, n)) ** 2
    if not (np.all(np.isfinite(drift)) and np.all(np.isfinite(a_half))):
        raise ValueError("non-finite drift or noise on the grid")

    h = g.h
    N = g.size
    lat = np.stack(g.lattice(np.arange(N)), axis=1)
    rows, cols, vals = [], [], []
    diag = np.zeros(N)

    def couple(axis, step, coef):
        # coefficient on the neighbour; dropped when the neighbour is on the boundary
        nb = lat.copy()
        nb[:, axis] += step
        keep = (coef != 0) & (nb[:, axis] >= 1) & (nb[:, axis] <= g.n[axis] - 2)
        idx = np.nonzero(keep)[0]
        rows.append(idx)
        cols.append(g.index(nb[idx, 0], nb[idx, 1], nb[idx, 2]))
        vals.append(-coef[idx])

    dcoef = a_half / h[0] ** 2
    diag += 2.0 * dcoef
    couple(0, +1, dcoef)
    couple(0, -1, dcoef)
    for axis in range(3):
        b = drift[:, axis]
        w = np.abs(b) / h[axis]
        diag += w
        couple(axis, +1, np.where(b > 0, w, 0.0))
        couple(axis, -1, np.where(b < 0, w, 0.0))

    rows.append(np.arange(N))
    cols.append(np.arange(N))
    vals.append(diag)
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N, N)).tocsr()
    A.sum_duplicates()
    return SparseOperator(A, g, v)


def residual(A: SparseOperator, e: EigenPair) -> float:
    """``max_j |(A psi)_j - lam * psi_j|``."""
    if A.dimension != len(e.psi):
        raise ValueError("operator and eigenvector dimensions differ")
    r = A.matrix @ e.psi - e.lam * e.psi
    return float(np.max(np.abs(r)))


def residual_tolerance(A: SparseOperator, lam: float, tol: float) -> float:
    """Residual target ``tol * max(1, lam)``, floored at the rounding level of ``A @ psi``.

    With ``max |psi| = 1`` the product carries an error of a few
    ``eps * ||A||_inf``; on fine grids that exceeds ``tol`` and an absolute
    target could never be met.
    """
    norm = float(abs(A.matrix).sum(axis=1).max())
    return max(tol * max(1.0, abs(lam)), 16.0 * np.finfo(float).eps * norm)


def _ratio_bracket(Apsi: np.ndarray, psi: np.ndarray) -> tuple[float, float]:
    """Collatz-Wielandt bounds ``min/max (A psi)_j / psi_j``; NaNs unless ``psi > 0``."""
    if psi.min() <= 1e-200:
        return np.nan, np.nan
    r = Apsi / psi
    return float(r.min()), float(r.max())


def principal_eigenpair(A: SparseOperator, tol: float = 1e-10, max_iter: int = 10_000,
                        require_positive: bool = True) -> EigenPair:
    """Smallest eigenvalue of ``A`` by inverse power iteration.

    With ``psi`` sup-normalized, ``y = (A - s I)^{-1} psi`` has
    ``max |y| -> 1/(lam - s)``.  The shift starts at ``s = 0``.  Whenever
    ``psi > 0`` the node ratios ``(A psi)_j / psi_j`` bracket the principal
    eigenvalue (Collatz-Wielandt), and ``s`` is moved just below the lower
    bound, so ``A - s I`` stays a nonsingular M-matrix and the iteration
    cannot leave the principal pair.  This matters when the two smallest
    eigenvalues nearly coincide, as for weakly coupled blocks.

    Stops when the bracket is narrower than ``tol * max(1, lam)``, or when
    the relative change in ``lam`` is at most ``tol`` and the residual
    meets :func:`residual_tolerance`.

    ``require_positive=False`` skips the strict positivity check, which
    fails legitimately when drift does not connect all interior nodes.
    """
    M = A.matrix.tocsc()
    eye = sp.identity(A.dimension, format="csc")

    def factor(shift):
        try:
            return splu((M - shift * eye).tocsc() if shift else M)
        except RuntimeError as exc:
            raise EigenSolveError(f"factorization failed: {exc}") from exc

    shift = 0.0
    lu = factor(shift)
    psi = np.ones(A.dimension)
    lam = np.inf
    for it in range(1, max_iter + 1):
        y = lu.solve(psi)
        j = int(np.argmax(np.abs(y)))
        if not np.isfinite(y[j]) or y[j] == 0:
            raise EigenSolveError("inverse iteration produced a degenerate iterate")
        lam_new = shift + 1.0 / y[j]
        psi = y / y[j]
        Apsi = A.matrix @ psi
        lo, hi = _ratio_bracket(Apsi, psi)
        scale = tol * max(1.0, abs(lam_new))
        if hi - lo <= scale:
            lam = min(max(lam_new, lo), hi)
            res = float(np.max(np.abs(Apsi - lam * psi)))
            break
        done = abs(lam_new - lam) <= tol * abs(lam_new)
        lam = lam_new
        res = float(np.max(np.abs(Apsi - lam * psi)))
        if done and res <= residual_tolerance(A, lam, tol):
            break
        # lo is a lower bound even when hi stalls on weakly reached blocks;
        # refactor only when the new shift at least halves the distance to lam
        target = lo - max(lam - lo, 1e-6 * max(1.0, abs(lam)))
        if target > shift and lam - target < 0.5 * (lam - shift):
            shift = target
            lu = factor(shift)
    else:
        raise EigenSolveError(f"no convergence in {max_iter} iterations")

    if require_positive and not np.all(psi > 0):
        bad = int(np.argmin(psi))
        raise EigenSolveError(
            f"eigenvector not strictly positive (psi[{bad}] = {psi[bad]:.3e}); "
            "drift may not connect all interior nodes")
    if lam <= 0:
        raise EigenSolveError(f"nonpositive principal eigenvalue {lam}")
    return EigenPair(float(lam), psi, it, res)
