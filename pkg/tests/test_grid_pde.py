import numpy as np
import pytest

from greenpeel.grid_pde import (
    CoefficientField, DenseCapError, EllipticityError, GridError, SolverError, assemble, build_grid,
    dense_kernel, hs_norm, op_norm, solve,
)


class TestGrid:
    def test_1d_nodes(self):
        g = build_grid(1, 4)
        assert g.h == pytest.approx(0.2)
        np.testing.assert_allclose(g.coords()[:, 0], [0.2, 0.4, 0.6, 0.8])

    def test_2d_center(self):
        g = build_grid(2, 3)
        assert g.total == 9
        np.testing.assert_allclose(g.coords()[4], [0.5, 0.5])

    def test_3d_spacing(self):
        g = build_grid(3, 2)
        assert g.total == 8 and g.h == 1 / 3

    def test_index_bijection(self):
        g = build_grid(3, 5)
        idx = np.arange(g.total)
        np.testing.assert_array_equal(g.index(g.multi_index(idx)), idx)

    @pytest.mark.parametrize("d,n", [(4, 4), (0, 4), (1, 1)])
    def test_rejects_bad_input(self, d, n):
        with pytest.raises(GridError):
            build_grid(d, n)

    def test_node_cap(self):
        with pytest.raises(GridError, match="cap"):
            build_grid(3, 200, max_nodes=10**6)


class TestAssemble:
    def test_1d_identity_stencil(self):
        op = assemble(build_grid(1, 3))
        expected = 16 * np.array([[2, -1, 0], [-1, 2, -1], [0, -1, 2]])
        np.testing.assert_array_equal(op.K.toarray(), expected)
        assert op.K[0, 0] == 32

    def test_2d_five_point(self):
        op = assemble(build_grid(2, 3))
        K = op.K.toarray()
        h2 = 1 / 0.25**2
        assert K[4, 4] == 4 * h2
        assert sorted(K[4][K[4] != 0].tolist()) == [-h2] * 4 + [4 * h2]

    def test_1d_variable_coefficient_hand_assembled(self):
        # a(x) = 1 + x at flux points 0.1, 0.3, ..., 0.9 with h = 0.2
        a = [1.1, 1.3, 1.5, 1.7, 1.9]
        hand = np.array([
            [a[0] + a[1], -a[1], 0, 0],
            [-a[1], a[1] + a[2], -a[2], 0],
            [0, -a[2], a[2] + a[3], -a[3]],
            [0, 0, -a[3], a[3] + a[4]],
        ]) / 0.04
        op = assemble(build_grid(1, 4), CoefficientField.from_function(lambda x: 1 + x[:, 0]))
        np.testing.assert_allclose(op.K.toarray(), hand, rtol=1e-14)
        assert op.K[0, 0] == pytest.approx(60.0)

    @pytest.mark.parametrize("d,n", [(1, 9), (2, 6), (3, 4)])
    @pytest.mark.parametrize("preset", ["identity", "smooth", "checkerboard"])
    def test_symmetric_and_spd(self, d, n, preset):
        op = assemble(build_grid(d, n), CoefficientField.preset(preset))
        assert (op.K != op.K.T).nnz == 0
        np.linalg.cholesky(op.K.toarray())

    def test_nodal_coefficient(self):
        g = build_grid(2, 5)
        vals = 1 + g.coords().sum(axis=1)
        op = assemble(g, CoefficientField.from_nodal(vals))
        assert (op.K != op.K.T).nnz == 0

    def test_ellipticity_violation(self):
        with pytest.raises(EllipticityError):
            assemble(build_grid(1, 8), CoefficientField.from_function(lambda x: x[:, 0] - 0.5))

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            CoefficientField.preset("granite")


class TestSolve:
    def test_quadratic_exact(self):
        op = assemble(build_grid(1, 3))
        u = solve(op, np.ones(3))
        np.testing.assert_allclose(u, [0.09375, 0.125, 0.09375], rtol=1e-13)

    def test_zero_forcing(self):
        op = assemble(build_grid(2, 4))
        assert not np.any(solve(op, np.zeros(16)))

    def test_inverse_consistency(self):
        op = assemble(build_grid(2, 5), CoefficientField.preset("checkerboard"))
        for j in (0, 7, 24):
            e = np.zeros(op.size)
            e[j] = 1
            np.testing.assert_allclose(solve(op, op.K @ e), e, atol=1e-10)

    def test_counts_solves(self):
        op = assemble(build_grid(1, 8))
        solve(op, np.ones(8))
        solve(op, np.ones((8, 5)))
        assert op.solves == 6

    def test_workers_do_not_change_results(self, rng):
        g = build_grid(2, 8)
        F = rng.standard_normal((g.total, 100))
        a = solve(assemble(g, workers=1), F)
        b = solve(assemble(g, workers=8), F)
        np.testing.assert_array_equal(a, b)

    def test_3d_conjugate_gradients(self, rng):
        op = assemble(build_grid(3, 6))
        f = rng.standard_normal(op.size)
        u = solve(op, f)
        assert np.linalg.norm(op.K @ u - f) <= 1e-10 * np.linalg.norm(f)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            solve(assemble(build_grid(1, 4)), np.ones(5))

    def test_second_order_convergence(self):
        errs = []
        for n in (16, 32, 64, 128):
            op = assemble(build_grid(1, n))
            x = op.grid.coords()[:, 0]
            u = solve(op, np.sin(np.pi * x))
            errs.append(np.abs(u - np.sin(np.pi * x) / np.pi**2).max())
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all(np.abs(ratios - 4) <= 0.15 * 4), ratios

    def test_solver_error_carries_residual(self):
        err = SolverError("boom", residual=1.0)
        assert err.residual == 1.0


class TestKernel:
    def test_1d_analytic_green(self):
        op = assemble(build_grid(1, 3))
        G = dense_kernel(op)
        x = op.grid.coords()[:, 0]
        exact = np.minimum.outer(x, x) * (1 - np.maximum.outer(x, x))
        np.testing.assert_allclose(G, exact, rtol=1e-13)
        assert G[0, 0] == pytest.approx(0.1875)

    @pytest.mark.parametrize("preset", ["identity", "smooth", "checkerboard"])
    def test_symmetric(self, preset):
        G = dense_kernel(assemble(build_grid(2, 8), CoefficientField.preset(preset)))
        assert np.abs(G - G.T).max() <= 1e-10 * np.abs(G).max()

    def test_2d_positive(self):
        G = dense_kernel(assemble(build_grid(2, 16)))
        assert G.min() > 0

    def test_matches_solver(self, rng):
        op = assemble(build_grid(2, 12), CoefficientField.preset("smooth"))
        G = dense_kernel(op)
        for _ in range(10):
            f = rng.standard_normal(op.size)
            u = solve(op, f)
            np.testing.assert_allclose(op.weight * G @ f, u, rtol=1e-9, atol=1e-9 * np.abs(u).max())

    def test_dense_cap(self):
        with pytest.raises(DenseCapError):
            dense_kernel(assemble(build_grid(2, 20)), cap=100)


class TestNorms:
    def test_hs_1d_poisson(self, poisson_1d_256):
        op = assemble(build_grid(1, 512))
        assert hs_norm(dense_kernel(op), op.grid) == pytest.approx(1 / np.sqrt(90), rel=1e-3)

    def test_hs_trivial(self):
        g = build_grid(1, 4)
        assert hs_norm(np.zeros((4, 4)), g) == 0
        assert hs_norm(np.eye(4), g) == pytest.approx(0.4)

    def test_op_1d_poisson(self):
        op = assemble(build_grid(1, 512))
        assert op_norm(dense_kernel(op), op.grid) == pytest.approx(1 / np.pi**2, rel=1e-3)

    def test_op_2d_poisson(self):
        op = assemble(build_grid(2, 64))
        assert op_norm(dense_kernel(op), op.grid) == pytest.approx(1 / (2 * np.pi**2), rel=1e-2)

    def test_op_zero(self):
        assert op_norm(np.zeros((5, 5)), build_grid(1, 5)) == 0

    def test_op_below_hs(self, rng):
        g = build_grid(1, 30)
        A = rng.standard_normal((30, 30))
        assert op_norm(A, g) <= hs_norm(A, g)
        assert op_norm(A, g) == pytest.approx(g.h * np.linalg.norm(A, 2), rel=1e-6)
