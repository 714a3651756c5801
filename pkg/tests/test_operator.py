import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from exitrate.model import Domain, ModelParams, NoiseSpec
from exitrate.operator import (EigenPair, EigenSolveError, Grid, SparseOperator, assemble,
                               principal_eigenpair, residual, residual_tolerance)

from generators import domains, grid_shapes, model_params, noise_specs
from oracles import dense_principal_eigenvalue, discrete_laplacian_eigenvalue
from test_model import default_params

PURE = (ModelParams.zeros(), NoiseSpec(sigma0=1.0))
UNIT = Domain((0.0, -1.0, -1.0), (1.0, 1.0, 1.0))
BOX = Domain((0.35, 0.12, 0.08), (0.65, 0.34, 0.26))


def test_grid_index_round_trip():
    g = Grid(BOX, (6, 5, 4))
    idx = np.arange(g.size)
    assert np.array_equal(g.index(*g.lattice(idx)), idx)
    # x1 varies fastest
    assert g.lattice(1) == (2, 1, 1)
    pts = g.interior_points()
    np.testing.assert_allclose(pts[0], np.asarray(BOX.lo) + g.h)


def test_grid_needs_three_nodes():
    with pytest.raises(ValueError):
        Grid(BOX, (2, 5, 5))


def test_full_interior_conversion():
    g = Grid(BOX, (5, 4, 4))
    v = np.arange(g.size, dtype=float)
    full = g.to_full(v)
    assert full.shape == g.n and np.all(full[0] == 0) and np.all(full[:, -1] == 0)
    np.testing.assert_array_equal(g.to_interior(full), v)


@pytest.mark.parametrize("n1", [33, 65, 129])
def test_one_dimensional_laplacian(n1):
    e = principal_eigenpair(assemble(Grid(UNIT, (n1, 3, 3)), *PURE))
    assert e.lam == pytest.approx(discrete_laplacian_eigenvalue(n1), abs=1e-8)
    x = Grid(UNIT, (n1, 3, 3)).interior_points()[:, 0]
    np.testing.assert_allclose(e.psi, np.sin(math.pi * x) / np.sin(math.pi * x).max(), atol=1e-8)


def test_laplacian_error_shrinks_with_refinement():
    errs = [abs(principal_eigenpair(assemble(Grid(UNIT, (n, 3, 3)), *PURE)).lam - math.pi ** 2 / 2)
            for n in (17, 33, 65, 129)]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    # second order for the diffusion-only stencil
    assert errs[-2] / errs[-1] == pytest.approx(4.0, rel=0.02)


def test_constant_drift_shifts_eigenvalue():
    # -L = -(1/2) d2 - b d;  principal eigenvalue pi^2/2 + b^2/2 in the continuum
    b = 1.5
    p = ModelParams.zeros()
    e = principal_eigenpair(assemble(Grid(UNIT, (513, 3, 3)), p, NoiseSpec(sigma0=1.0), b))
    assert e.lam == pytest.approx(math.pi ** 2 / 2 + b ** 2 / 2, rel=5e-3)


@settings(max_examples=60, deadline=None)
@given(model_params(), noise_specs(), domains(), grid_shapes, st.data())
def test_assembled_matrix_is_an_m_matrix(p, n, d, shape, data):
    g = Grid(d, shape)
    pol = np.asarray(data.draw(st.lists(st.floats(-1, 1), min_size=g.size, max_size=g.size)))
    A = assemble(g, p, n, pol).matrix
    diag = A.diagonal()
    off = A.copy()
    off.setdiag(0)
    off.eliminate_zeros()
    assert np.all(diag > 0)
    assert np.all(off.data <= 0)
    assert np.all(np.asarray(A.sum(axis=1)).ravel() >= -1e-12 * diag)


@settings(max_examples=25, deadline=None)
@given(model_params(), noise_specs(), domains(), grid_shapes)
def test_inverse_iteration_matches_dense_solve(p, n, d, shape):
    op = assemble(Grid(d, shape), p, n, 0.0)
    e = principal_eigenpair(op, require_positive=False)
    assert e.lam == pytest.approx(dense_principal_eigenvalue(op.matrix), abs=1e-8 * max(1, e.lam))
    assert residual(op, e) <= residual_tolerance(op, e.lam, 1e-10)
    assert np.all(e.psi >= -1e-12)
    assert np.max(np.abs(e.psi)) == pytest.approx(1.0)


def test_nearly_degenerate_blocks_converge_quickly():
    # two chains with principal eigenvalues 0.1% apart, the second feeding the first
    m = 40
    lap = sp.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(m, m)) * (m + 1) ** 2
    A = sp.bmat([[lap + 100.0 * sp.identity(m), -1e-3 * sp.identity(m)],
                 [None, lap + 100.1 * sp.identity(m)]]).tocsr()
    g = Grid(Domain((0.0, -1.0, -1.0), (1.0, 1.0, 1.0)), (2 * m + 2, 3, 3))
    op = SparseOperator(A, g, np.zeros(g.size))
    e = principal_eigenpair(op, require_positive=False)
    assert e.iterations < 100
    assert e.lam == pytest.approx(dense_principal_eigenvalue(A), abs=1e-8)


def test_default_scenario_eigenpair():
    op = assemble(Grid(BOX, (61, 9, 9)), default_params(), NoiseSpec(sigma0=0.1))
    e = principal_eigenpair(op)
    assert np.all(e.psi > 0)
    assert 0.1 < e.lam < 0.3


def test_triplets_sorted_and_complete():
    op = assemble(Grid(BOX, (5, 4, 4)), default_params(), NoiseSpec(sigma0=0.1))
    r, c, v = op.triplets()
    assert np.all(np.diff(r * op.dimension + c) > 0)
    np.testing.assert_allclose(op.matrix[r, c].A1, v)
    assert len(v) == op.matrix.nnz


def test_policy_shape_checked():
    with pytest.raises(ValueError):
        assemble(Grid(BOX, (5, 4, 4)), default_params(), NoiseSpec(), np.zeros(3))


def test_nonfinite_coefficients_rejected():
    d = Domain((0.0, 0.0, 0.0), (1e308, 1e308, 1e308))
    with pytest.raises(ValueError), np.errstate(over="ignore", invalid="ignore"):
        assemble(Grid(d, (5, 4, 4)), default_params(), NoiseSpec())


def test_iteration_cap_raises():
    op = assemble(Grid(BOX, (21, 5, 5)), default_params(), NoiseSpec(sigma0=0.1))
    with pytest.raises(EigenSolveError):
        principal_eigenpair(op, tol=1e-15, max_iter=2)


def test_residual_checks_dimension():
    op = assemble(Grid(BOX, (5, 4, 4)), default_params(), NoiseSpec())
    with pytest.raises(ValueError):
        residual(op, EigenPair(1.0, np.ones(3), 1, 0.0))


def test_residual_tolerance_floors_at_rounding_level():
    fine = assemble(Grid(BOX, (961, 5, 5)), default_params(), NoiseSpec(sigma0=0.1))
    coarse = assemble(Grid(BOX, (41, 5, 5)), default_params(), NoiseSpec(sigma0=0.1))
    assert residual_tolerance(coarse, 0.2, 1e-10) == 1e-10
    assert residual_tolerance(fine, 0.2, 1e-10) > 1e-10
    assert residual_tolerance(coarse, 50.0, 1e-10) == pytest.approx(5e-9)
