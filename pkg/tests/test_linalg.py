import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poroflow.linalg import (
    CgConvergenceError,
    CsrMatrix,
    DofVector,
    NotSpdError,
    SpdFactorization,
    cg_jacobi,
    quad_form,
    solve_spd,
    spmv,
    symmetry_defect,
    write_matrix_market,
)


def rand_spd(n, seed=0):
    rng = np.random.default_rng(seed)
    Q = rng.standard_normal((n, n))
    return Q @ Q.T + n * np.eye(n)


class TestCsrMatrix:
    def test_from_dense_roundtrip(self):
        A = np.array([[2.0, 0.0], [1.0, 3.0]])
        M = CsrMatrix.from_dense(A)
        assert np.allclose(M.to_scipy().toarray(), A)
        assert M.shape == (2, 2)
        assert M.nnz() == 3

    def test_rejects_bad_offsets(self):
        with pytest.raises(ValueError):
            CsrMatrix(2, 2, np.array([0, 2, 1]), np.array([0, 1]),
                      np.array([1.0, 1.0]))

    def test_rejects_out_of_range_column(self):
        with pytest.raises(ValueError):
            CsrMatrix(1, 2, np.array([0, 1]), np.array([5]), np.array([1.0]))

    def test_rejects_unsorted_columns_in_row(self):
        with pytest.raises(ValueError):
            CsrMatrix(1, 3, np.array([0, 2]), np.array([2, 0]),
                      np.array([1.0, 1.0]))


class TestDofVector:
    def test_blocks_cover_and_slice(self):
        x = DofVector(np.arange(5.0), {"u": (0, 3), "q": (3, 5)})
        assert np.allclose(x.block("q"), [3.0, 4.0])
        x.block("u")[:] = 0.0
        assert np.allclose(x.data[:3], 0.0)

    def test_default_single_block(self):
        x = DofVector(np.ones(4))
        assert x.block_map == {"x": (0, 4)}

    def test_rejects_gap(self):
        with pytest.raises(ValueError):
            DofVector(np.ones(4), {"u": (0, 2), "q": (3, 4)})

    def test_rejects_empty_block(self):
        with pytest.raises(ValueError):
            DofVector(np.ones(2), {"u": (0, 0), "q": (0, 2)})


class TestSpmv:
    def test_identity(self):
        I = CsrMatrix.from_dense(np.eye(3))
        assert np.allclose(spmv(I, [1, 2, 3]), [1, 2, 3])

    def test_zero_matrix(self):
        Z = CsrMatrix.from_scipy(np.zeros((3, 3)))
        assert np.allclose(spmv(Z, [4, 5, 6]), 0.0)

    def test_hand_product(self):
        A = CsrMatrix.from_dense([[2.0, 0.0], [1.0, 3.0]])
        assert np.allclose(spmv(A, [1.0, 1.0]), [2.0, 4.0])

    def test_dimension_mismatch(self):
        A = CsrMatrix.from_dense(np.eye(2))
        with pytest.raises(ValueError):
            spmv(A, [1.0, 2.0, 3.0])

    def test_preserves_block_map(self):
        A = CsrMatrix.from_dense(np.eye(4))
        x = DofVector(np.ones(4), {"u": (0, 2), "q": (2, 4)})
        y = spmv(A, x)
        assert isinstance(y, DofVector)
        assert y.block_map == x.block_map

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 1000))
    def test_linearity(self, n, seed):
        rng = np.random.default_rng(seed)
        A = CsrMatrix.from_dense(rng.standard_normal((n, n)))
        x = rng.standard_normal(n)
        y = rng.standard_normal(n)
        a, b = rng.standard_normal(2)
        lhs = spmv(A, a * x + b * y)
        rhs = a * spmv(A, x) + b * spmv(A, y)
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


class TestQuadForm:
    def test_identity(self):
        I = CsrMatrix.from_dense(np.eye(2))
        assert quad_form(I, [3.0, 4.0]) == pytest.approx(25.0)

    def test_zero(self):
        Z = CsrMatrix.from_scipy(np.zeros((2, 2)))
        assert quad_form(Z, [7.0, 8.0]) == 0.0

    def test_hand_value(self):
        A = CsrMatrix.from_dense([[2.0, 1.0], [1.0, 2.0]])
        assert quad_form(A, [1.0, 1.0]) == pytest.approx(6.0)

    def test_dimension_mismatch(self):
        A = CsrMatrix.from_dense(np.eye(3))
        with pytest.raises(ValueError):
            quad_form(A, [1.0, 2.0])


class TestSolveSpd:
    def test_identity(self):
        I = CsrMatrix.from_dense(np.eye(3))
        b = np.array([1.0, -2.0, 3.0])
        assert np.allclose(solve_spd(I, b), b)

    def test_diagonal(self):
        A = CsrMatrix.from_dense(np.diag([2.0, 4.0]))
        assert np.allclose(solve_spd(A, [2.0, 8.0]), [1.0, 2.0])

    def test_random_spd_constructed_rhs(self):
        S = rand_spd(10, seed=3)
        A = CsrMatrix.from_dense(S)
        xt = np.random.default_rng(4).standard_normal(10)
        x = solve_spd(A, S @ xt, tol=1e-12)
        assert np.allclose(x, xt, rtol=1e-9, atol=1e-9)

    def test_rejects_nonpositive_tol(self):
        A = CsrMatrix.from_dense(np.eye(2))
        with pytest.raises(ValueError):
            solve_spd(A, [1.0, 1.0], tol=0.0)

    def test_detects_non_spd(self):
        A = CsrMatrix.from_dense([[1.0, 0.0], [0.0, -1.0]])
        with pytest.raises(NotSpdError):
            solve_spd(A, [1.0, 1.0])

    def test_rcm_path_matches(self):
        S = rand_spd(20, seed=7)
        A = CsrMatrix.from_dense(S)
        b = np.random.default_rng(8).standard_normal(20)
        x0 = solve_spd(A, b)
        x1 = solve_spd(A, b, use_rcm=True)
        assert np.allclose(x0, x1, rtol=1e-10, atol=1e-12)

    def test_energy_error_bound(self):
        # quad_form(A, x - x*) stays within tol^2 * quad_form(A, x*)
        for seed in range(5):
            S = rand_spd(12, seed=seed)
            A = CsrMatrix.from_dense(S)
            xt = np.random.default_rng(100 + seed).standard_normal(12)
            x = solve_spd(A, S @ xt, tol=1e-10)
            err = quad_form(A, x - xt)
            assert err <= max(1e-20 * quad_form(A, xt), 1e-18)


class TestCgJacobi:
    def test_matches_direct(self):
        S = rand_spd(15, seed=11)
        A = CsrMatrix.from_dense(S)
        b = np.random.default_rng(12).standard_normal(15)
        x = cg_jacobi(A, b, tol=1e-12)
        assert np.allclose(x, np.linalg.solve(S, b), rtol=1e-8, atol=1e-10)

    def test_zero_rhs(self):
        A = CsrMatrix.from_dense(np.eye(3))
        assert np.allclose(cg_jacobi(A, np.zeros(3)), 0.0)

    def test_budget_exhaustion(self):
        S = rand_spd(10, seed=13)
        A = CsrMatrix.from_dense(S)
        with pytest.raises(CgConvergenceError):
            cg_jacobi(A, np.ones(10), tol=1e-16, max_iter=1)


class TestFactorizationReuse:
    def test_multiple_solves(self):
        S = rand_spd(9, seed=21)
        F = SpdFactorization(CsrMatrix.from_dense(S))
        rng = np.random.default_rng(22)
        for _ in range(3):
            b = rng.standard_normal(9)
            assert np.allclose(F.solve(b), np.linalg.solve(S, b),
                               rtol=1e-9, atol=1e-11)


class TestMatrixMarket:
    def test_symmetric_header_and_roundtrip(self, tmp_path):
        S = np.array([[2.0, 1.0], [1.0, 3.0]])
        A = CsrMatrix.from_dense(S)
        p = tmp_path / "a.mtx"
        write_matrix_market(A, str(p))
        text = p.read_text().splitlines()
        assert text[0] == "%%MatrixMarket matrix coordinate real symmetric"
        import scipy.io as sio

        B = sio.mmread(str(p)).toarray()
        assert np.allclose(B, S)

    def test_general_fallback(self, tmp_path):
        A = CsrMatrix.from_dense([[0.0, 1.0], [0.0, 0.0]])
        p = tmp_path / "g.mtx"
        write_matrix_market(A, str(p))
        assert "general" in p.read_text().splitlines()[0]


def test_symmetry_defect_zero_for_symmetric():
    assert symmetry_defect(CsrMatrix.from_dense(rand_spd(6))) == 0.0


def test_symmetry_defect_detects_asymmetry():
    A = CsrMatrix.from_dense([[0.0, 1.0], [0.0, 0.0]])
    assert symmetry_defect(A) == pytest.approx(1.0)
