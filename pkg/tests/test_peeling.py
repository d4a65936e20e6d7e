import numpy as np
import pytest

from greenpeel.grid_pde import assemble, build_grid, dense_kernel, hs_norm, solve
from greenpeel.gp_sampling import KernelSpec
from greenpeel.hierarchy import block_lists, build_tree, coloring
from greenpeel.lowrank import LowRankBlock
from greenpeel.peeling import (
    HierarchicalApprox, InsufficientDiversityError, KernelOracle, PeelConfig, RecordingOracle, SolveLedger,
    TrainingSet, _plans, evaluate_exact, evaluate_sampled, expected_solves, gp_dataset, learn,
    learn_from_dataset, near_field_floor, peel_level, symmetry_defect, synthetic_operator, tolerance_schedule,
)

from oracles import continuum_near_fraction, green_1d, nodal_near_fraction


class TestSchedule:
    def test_geometric(self):
        s = tolerance_schedule(1e-3, 4, 2)
        assert s.tolerances == pytest.approx({2: 2.5e-4, 3: 5e-4, 4: 1e-3})

    def test_single_level(self):
        assert tolerance_schedule(0.1, 3, 3).tolerances == {3: 0.1}

    @pytest.mark.parametrize("L", [2, 5, 12])
    def test_sum_bounded(self, L):
        s = tolerance_schedule(0.01, L, 2)
        assert sum(s.tolerances.values()) <= 2 * 0.01
        vals = [s.tolerances[k] for k in sorted(s.tolerances)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_domain(self):
        with pytest.raises(ValueError):
            tolerance_schedule(1.5, 3, 2)


def analytic_oracle(n):
    g = build_grid(1, n)
    x = g.coords()[:, 0]
    return KernelOracle(green_1d(x[:, None], x[None, :]), g)


class TestPeelLevel:
    def test_first_level_rank_one(self):
        orc = analytic_oracle(64)
        tree = build_tree(orc.grid, 2)
        l_min, plans = _plans(tree, 7)
        assert l_min == 2
        approx = HierarchicalApprox(tree)
        blocks = peel_level(approx, plans[2], orc, PeelConfig(L=2, rank=1), SolveLedger())
        nodes = tree.levels[2].nodes
        for b in blocks:
            true = orc.G[np.ix_(nodes[b.target], nodes[b.source])]
            assert b.rank == 1
            assert np.linalg.norm(b.dense() - true) <= 1e-10 * np.linalg.norm(true)

    def test_zero_operator(self):
        g = build_grid(1, 64)
        orc = KernelOracle(np.zeros((64, 64)), g)
        cfg = PeelConfig(L=4, eps=1e-3)
        approx, ledger = learn(orc, cfg)
        assert all(b.rank == 0 for blocks in approx.blocks.values() for b in blocks)
        assert ledger.as_dict() == expected_solves(g, cfg)
        assert orc.solves == ledger.training

    def test_level_solve_count_independent_of_boxes(self):
        r, p = 4, 10
        for n, L in [(64, 4), (256, 6)]:
            orc = analytic_oracle(n)
            ledger = SolveLedger()
            tree = build_tree(orc.grid, L)
            _, plans = _plans(tree, 7)
            cfg = PeelConfig(L=L, rank=r, posterior_probes=10, oversampling=p)
            approx = HierarchicalApprox(tree)
            for lev in range(2, L + 1):
                approx.blocks[lev] = peel_level(approx, plans[lev], orc, cfg, ledger)
                assert ledger.counts[f"level_{lev}_sketch"] + ledger.counts[f"level_{lev}_posterior"] <= 7 * (r + p + 10)


class TestLearnPoisson1D:
    def test_dense_probe_exact(self, poisson_1d_256):
        op, G = poisson_1d_256
        approx, ledger = learn(op, PeelConfig(L=5, rank=1, near_field="dense_probe"))
        assert evaluate_exact(approx, G)["err_hs_rel"] <= 1e-8
        assert ledger.as_dict() == expected_solves(op.grid, PeelConfig(L=5, rank=1, near_field="dense_probe"))

    @pytest.mark.parametrize("L", [3, 4, 5])
    def test_neglect_equals_near_mass(self, poisson_1d_256, L):
        op, G = poisson_1d_256
        approx, _ = learn(op, PeelConfig(L=L, rank=1))
        err = evaluate_exact(approx, G)["err_hs_rel"]
        assert err == pytest.approx(nodal_near_fraction(256, L), abs=1e-6)

    def test_floor_decreases_with_L(self):
        fr = [nodal_near_fraction(256, L) for L in (3, 4, 5)]
        assert fr[0] > fr[1] > fr[2]

    def test_discrete_floor_tracks_continuum(self):
        for L in (3, 4, 5):
            assert nodal_near_fraction(256, L) == pytest.approx(continuum_near_fraction(256, L), abs=1e-4)

    def test_near_field_floor_helper(self, poisson_1d_256):
        op, G = poisson_1d_256
        tree = build_tree(op.grid, 4)
        assert near_field_floor(G, tree)["hs"] == pytest.approx(nodal_near_fraction(256, 4), abs=1e-10)


class TestApplyAndEvaluate:
    def test_zero_in_zero_out(self, poisson_1d_256):
        op, _ = poisson_1d_256
        approx, _ = learn(op, PeelConfig(L=4, rank=1))
        assert not np.any(approx.apply(np.zeros(256)))

    def test_linear(self, poisson_1d_256, rng):
        op, _ = poisson_1d_256
        approx, _ = learn(op, PeelConfig(L=4, rank=2))
        f, g = rng.standard_normal((2, 256))
        lhs = approx.apply(f + g)
        assert np.abs(lhs - approx.apply(f) - approx.apply(g)).max() <= 1e-12 * np.abs(lhs).max()

    def test_full_reconstruction_quadratic(self, poisson_1d_256):
        op, _ = poisson_1d_256
        approx, _ = learn(op, PeelConfig(L=5, rank=1, near_field="dense_probe"))
        x = op.grid.coords()[:, 0]
        u = approx.apply(np.ones(256))
        assert np.abs(u - solve(op, np.ones(256))).max() <= 1e-8
        assert np.abs(u - x * (1 - x) / 2).max() <= 1e-8

    def test_dimension_mismatch(self, poisson_1d_256):
        op, _ = poisson_1d_256
        approx = HierarchicalApprox(build_tree(op.grid, 2))
        with pytest.raises(ValueError):
            approx.apply(np.ones(10))

    def test_exact_kernel_one_block(self):
        g = build_grid(1, 16)
        G = dense_kernel(assemble(g))
        tree = build_tree(g, 0)
        approx = HierarchicalApprox(tree)
        U, s, Vt = np.linalg.svd(G)
        approx.blocks[0] = [LowRankBlock(U, s, Vt.T, 0, 0)]
        ev = evaluate_exact(approx, G)
        assert ev["err_hs_rel"] <= 1e-12 and ev["err_op_rel"] <= 1e-12

    def test_zero_approx(self):
        g = build_grid(1, 16)
        G = dense_kernel(assemble(g))
        ev = evaluate_exact(HierarchicalApprox(build_tree(g, 2)), G)
        assert ev["err_hs_rel"] == pytest.approx(1.0)
        assert ev["norm_ratio_ok"]

    def test_neglect_l3_n64(self):
        orc = analytic_oracle(64)
        approx, _ = learn(orc, PeelConfig(L=3, rank=1))
        assert evaluate_exact(approx, orc.G)["err_hs_rel"] == pytest.approx(nodal_near_fraction(64, 3), abs=1e-6)

    def test_sampled_perfect_and_zero(self, poisson_1d_256):
        op, _ = poisson_1d_256
        tests = gp_dataset(op, 5, KernelSpec(length_scale=0.05), seed=3)
        approx, _ = learn(op, PeelConfig(L=5, rank=1, near_field="dense_probe"))
        assert evaluate_sampled(approx, tests.forcings, tests.solutions)["max"] <= 1e-9
        zero = HierarchicalApprox(approx.tree)
        ev = evaluate_sampled(zero, tests.forcings, tests.solutions)
        expected = np.mean(np.linalg.norm(tests.solutions, axis=1) / np.linalg.norm(tests.forcings, axis=1))
        assert ev["mean"] == pytest.approx(expected)

    def test_sampled_empty(self, poisson_1d_256):
        approx = HierarchicalApprox(build_tree(poisson_1d_256[0].grid, 2))
        with pytest.raises(ValueError):
            evaluate_sampled(approx, np.zeros((0, 256)), np.zeros((0, 256)))

    def test_save_load_roundtrip(self, poisson_1d_256, tmp_path):
        op, _ = poisson_1d_256
        approx, _ = learn(op, PeelConfig(L=4, rank=2, near_field="dense_probe"))
        approx.save(tmp_path / "a.npz")
        back = HierarchicalApprox.load(tmp_path / "a.npz")
        np.testing.assert_array_equal(back.to_dense(), approx.to_dense())
        assert back.hs_estimate == approx.hs_estimate


class TestProperties:
    def test_level_isolation_synthetic(self):
        g = build_grid(1, 64)
        tree = build_tree(g, 4)
        for seed in range(50):
            G, truth = synthetic_operator(tree, 2, np.random.default_rng(seed), near_scale=1.0)
            approx, _ = learn(KernelOracle(G, g), PeelConfig(L=4, rank=2, near_field="dense_probe", seed=seed))
            for (lev, t, s), B in truth.items():
                assert np.linalg.norm(approx.block(lev, t, s).dense() - B) <= 1e-10 * np.linalg.norm(B)
            assert evaluate_exact(approx, G)["err_hs_rel"] <= 1e-10

    def test_symmetry_measured(self, poisson_2d_32):
        op, _ = poisson_2d_32
        cfg = PeelConfig(L=3, eps=1e-2)
        approx, _ = learn(op, cfg)
        defect = symmetry_defect(approx)
        for lev, d in defect.items():
            tol = approx.schedule.tolerances[lev] * approx.hs_estimate
            assert d <= 10 * tol

    def test_ledger_closed_form(self, poisson_2d_32):
        op, _ = poisson_2d_32
        for cfg in (PeelConfig(L=3, rank=2), PeelConfig(L=3, eps=0.05, near_field="dense_probe"),
                    PeelConfig(L=2, rank=1, posterior_probes=3)):
            before = op.solves
            _, ledger = learn(op, cfg)
            assert ledger.as_dict() == expected_solves(op.grid, cfg)
            assert op.solves - before == ledger.training == ledger.total

    def test_ledger_excludes_evaluation(self):
        ledger = SolveLedger()
        ledger.add("level_2_sketch", 10)
        ledger.add("evaluation", 4)
        assert ledger.total == 14 and ledger.training == 10

    def test_monotone_in_rank_and_levels(self, poisson_2d_32):
        op, G = poisson_2d_32
        by_k = [np.median([evaluate_exact(learn(op, PeelConfig(L=3, rank=k, seed=s))[0], G)["err_hs_rel"]
                           for s in range(10)]) for k in (1, 2, 4)]
        assert by_k[0] >= by_k[1] >= by_k[2]
        by_L = [np.median([evaluate_exact(learn(op, PeelConfig(L=L, rank=4, seed=s))[0], G)["err_hs_rel"]
                           for s in range(3)]) for L in (2, 3, 4)]
        assert by_L[0] >= by_L[1] >= by_L[2]

    def test_deterministic(self, poisson_2d_32):
        op, _ = poisson_2d_32
        a, _ = learn(op, PeelConfig(L=3, eps=1e-2, seed=5))
        op8 = assemble(op.grid, workers=8)
        b, _ = learn(op8, PeelConfig(L=3, eps=1e-2, seed=5))
        np.testing.assert_array_equal(a.to_dense(), b.to_dense())


class TestAdaptive2D:
    @pytest.mark.slow
    def test_poisson_64_tolerance(self):
        op = assemble(build_grid(2, 64))
        G = dense_kernel(op)
        tree = build_tree(op.grid, 3)
        floor = near_field_floor(G, tree)["hs"]
        for seed in range(10):
            approx, _ = learn(op, PeelConfig(L=3, eps=1e-2, seed=seed))
            assert evaluate_exact(approx, G)["err_hs_rel"] <= 1e-2 + floor

    def test_sampled_tracks_exact(self, poisson_2d_32):
        op, G = poisson_2d_32
        tests = gp_dataset(op, 10, KernelSpec(length_scale=0.2), seed=11)
        for seed in range(10):
            approx, _ = learn(op, PeelConfig(L=3, eps=1e-2, seed=seed))
            ex = evaluate_exact(approx, G)["err_op_rel"]
            sm = evaluate_sampled(approx, tests.forcings, tests.solutions)["mean_rel"]
            assert ex / 3 <= sm <= 3 * ex

    def test_sampled_bounded_by_operator_error(self, poisson_2d_32):
        # ||E f|| <= ||E|| ||f|| for every test input
        op, G = poisson_2d_32
        tests = gp_dataset(op, 10, KernelSpec("white"), seed=4)
        approx, _ = learn(op, PeelConfig(L=3, rank=2))
        ev = evaluate_exact(approx, G)
        err_op_abs = ev["err_op_rel"] * hs_norm(G, op.grid)
        assert evaluate_sampled(approx, tests.forcings, tests.solutions)["max"] <= err_op_abs * (1 + 1e-6)


class TestDataset:
    def test_active_dataset_replays_exactly(self, poisson_2d_32):
        op, _ = poisson_2d_32
        cfg = PeelConfig(L=3, eps=1e-2, seed=2)
        rec = RecordingOracle(op)
        a, _ = learn(rec, cfg)
        data = TrainingSet(op.grid, np.array(rec.forcings), np.array(rec.solutions))
        b, diag = learn_from_dataset(data, cfg)
        assert diag["mode"] == "replay"
        np.testing.assert_array_equal(a.to_dense(), b.to_dense())

    def test_constant_forcings_starved(self):
        op = assemble(build_grid(1, 128))
        F = np.ones((5, 128)) * np.arange(1, 6)[:, None]
        data = TrainingSet(op.grid, F, op(F.T).T)
        with pytest.raises(InsufficientDiversityError, match="level 2"):
            learn_from_dataset(data, PeelConfig(L=4, rank=2))

    def test_white_dataset_least_squares(self):
        op = assemble(build_grid(1, 128))
        G = dense_kernel(op)
        data = gp_dataset(op, 400, KernelSpec("white"), seed=0)
        approx, diag = learn_from_dataset(data, PeelConfig(L=4, eps=1e-3, near_field="dense_probe"))
        assert diag["mode"] == "least_squares"
        assert set(diag["box_energy"]) == {2, 3, 4}
        assert evaluate_exact(approx, G)["err_hs_rel"] <= 5e-2

    def test_consistency_check(self):
        op = assemble(build_grid(1, 16))
        data = gp_dataset(op, 4, KernelSpec(length_scale=0.1))
        data.check_consistency(op)
        data.solutions[0] += 1.0
        with pytest.raises(ValueError, match="pair 0"):
            data.check_consistency(op)
