import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import riemann_eig, sim1_covariance
from dfpca.core import EvaluationGrid, SurfaceEstimate
from dfpca.eigen import (
    canonical_signs,
    dense_eig,
    eigen_residuals,
    matrixize,
    randomized_eig,
    select_components_fve,
)
from dfpca.errors import SketchTooSmall
from dfpca.simulate import ise


def _cov_surface(grid, C):
    return SurfaceEstimate(grid, C.reshape(grid.shape * 2), "covariance")


def _low_rank(grid, lam, seed=0):
    """Covariance with known Riemann eigenpairs: random orthonormal vectors scaled by 1/sqrt(cell)."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((grid.size, len(lam))))
    phi = Q / np.sqrt(grid.cell_volume)
    return (phi * lam) @ phi.T, phi


class TestMatrixize:
    def test_1d_reshape(self):
        grid = EvaluationGrid.regular([0], [1], 2)
        a, b, c = 1.0, 0.3, 2.0
        S = matrixize(_cov_surface(grid, np.array([[a, b], [b, c]])))
        np.testing.assert_array_equal(S.dense, [[a, b], [b, c]])

    def test_2d_block_layout(self):
        grid = EvaluationGrid.regular([0, 0], [1, 1], 2)
        # Gamma(s, t) with s = (s1, s2), t = (t1, t2); entry index = 2 * i1 + i2 (last axis fastest)
        G = np.arange(16.0).reshape(2, 2, 2, 2)
        G = G + G.transpose(2, 3, 0, 1)
        S = matrixize(SurfaceEstimate(grid, G, "covariance")).dense
        for i1, i2, j1, j2 in np.ndindex(2, 2, 2, 2):
            assert S[2 * i1 + i2, 2 * j1 + j2] == G[i1, i2, j1, j2]

    def test_mask_drops_outside_nodes(self):
        mask = np.array([True, False, True, True])
        grid = EvaluationGrid.regular([0], [1], 4, mask=mask)
        C = np.arange(16.0).reshape(4, 4)
        C = C + C.T
        C[1, :] = np.nan
        C[:, 1] = np.nan
        S = matrixize(_cov_surface(grid, C))
        assert S.dim == 3
        np.testing.assert_array_equal(S.node_index, [0, 2, 3])

    def test_provider_when_over_budget(self):
        grid = EvaluationGrid.regular([0], [1], 10)
        C, _ = _low_rank(grid, [2.0, 1.0])
        S = matrixize(_cov_surface(grid, C), memory_budget=0)
        assert not S.is_dense
        np.testing.assert_allclose(S.to_dense(), C, atol=1e-14)
        assert S.symmetry_gap() < 1e-14


class TestDenseEig:
    def test_constant_kernel(self):
        grid = EvaluationGrid.regular([0], [1], 17)
        eig = dense_eig(matrixize(_cov_surface(grid, np.ones((17, 17)))), None, grid)
        assert eig.L == 1
        # Riemann rule on an endpoint grid: cell_volume * M = 17 / 16
        assert eig.eigenvalues[0] == pytest.approx(17 / 16, rel=1e-12)
        np.testing.assert_allclose(eig.eigenfunctions[0], np.sqrt(16 / 17), rtol=1e-12)

    def test_constant_kernel_midpoints(self):
        grid = EvaluationGrid.midpoints([0], [1], 20)
        eig = dense_eig(matrixize(_cov_surface(grid, np.ones((20, 20)))), None, grid)
        assert eig.L == 1
        assert eig.eigenvalues[0] == pytest.approx(1.0, rel=1e-12)
        np.testing.assert_allclose(eig.eigenfunctions[0], 1.0, rtol=1e-12)

    def test_sim1_analytic(self):
        grid = EvaluationGrid.midpoints([0], [10], 500)
        C, p1, p2 = sim1_covariance(grid.axes[0])
        eig = dense_eig(matrixize(_cov_surface(grid, C)), None, grid)
        assert eig.L == 2
        np.testing.assert_allclose(eig.eigenvalues, [4, 1], atol=1e-3)
        assert ise(eig.eigenfunctions[0], p1, grid) < 1e-4
        assert ise(eig.eigenfunctions[1], p2, grid) < 1e-4

    def test_matches_riemann_oracle(self):
        grid = EvaluationGrid.regular([0], [10], 60)
        C, _, _ = sim1_covariance(grid.axes[0])
        eig = dense_eig(matrixize(_cov_surface(grid, C)), None, grid)
        lam, vec = riemann_eig(C, grid.cell_volume)
        np.testing.assert_allclose(eig.eigenvalues, lam[:2], rtol=1e-12)
        for k in range(2):
            assert ise(eig.eigenfunctions[k], vec[:, k], grid) < 1e-20

    def test_separable_2d(self):
        grid = EvaluationGrid.midpoints([0, 0], [1, 1], 24)
        t = grid.axes[0]
        f = [np.ones_like(t), np.sqrt(2) * np.cos(2 * np.pi * t)]
        g = [np.ones_like(t), np.sqrt(2) * np.sin(2 * np.pi * t)]
        la, lb = [3.0, 0.5], [2.0, 0.4]
        Ca = sum(l * np.outer(v, v) for l, v in zip(la, f))
        Cb = sum(l * np.outer(v, v) for l, v in zip(lb, g))
        C = np.kron(Ca, Cb)
        eig = dense_eig(matrixize(_cov_surface(grid, C)), None, grid)
        expected = sorted([a * b for a in la for b in lb], reverse=True)
        np.testing.assert_allclose(eig.eigenvalues, expected, rtol=1e-10)
        # the leading product f0 x g0 is constant 1
        np.testing.assert_allclose(np.abs(eig.eigenfunctions[0]), 1.0, rtol=1e-10)
        # 3 * 0.4 > 0.5 * 2: the second component is f0 x g1, the third f1 x g0
        assert ise(eig.eigenfunctions[1], np.outer(f[0], g[1]), grid) < 1e-18
        assert ise(eig.eigenfunctions[2], np.outer(f[1], g[0]), grid) < 1e-18

    def test_riemann_refinement(self):
        errs = []
        for num in (20, 40, 80):
            grid = EvaluationGrid.regular([0], [10], num)
            C, p1, p2 = sim1_covariance(grid.axes[0])
            eig = dense_eig(matrixize(_cov_surface(grid, C)), None, grid)
            errs.append(abs(eig.eigenvalues[0] - 4) + ise(eig.eigenfunctions[0], p1, grid))
        assert errs[0] > errs[1] > errs[2]

    def test_mask_zero_extension(self):
        grid = EvaluationGrid.regular([0], [1], 12)
        C, _ = _low_rank(grid, [3.0, 1.0], seed=1)
        base = dense_eig(matrixize(_cov_surface(grid, C)), None, grid)
        # embed into a larger grid with extra masked-out nodes
        big_axis = np.concatenate([grid.axes[0], 1 + grid.spacing[0] * np.arange(1, 5)])
        mask = np.arange(16) < 12
        big = EvaluationGrid((big_axis,), mask=mask)
        Cb = np.full((16, 16), np.nan)
        Cb[:12, :12] = C
        eig = dense_eig(matrixize(_cov_surface(big, Cb)), None, big)
        np.testing.assert_allclose(eig.eigenvalues, base.eigenvalues, atol=1e-10)
        np.testing.assert_allclose(eig.eigenfunctions[:, :12], base.eigenfunctions, atol=1e-10)
        assert np.isnan(eig.eigenfunctions[:, 12:]).all()

    def test_negative_eigenvalues_dropped(self):
        grid = EvaluationGrid.regular([0], [1], 8)
        C, phi = _low_rank(grid, [2.0, 1.0], seed=2)
        v = np.random.default_rng(3).standard_normal(8)
        v -= phi @ (grid.cell_volume * phi.T @ v)
        C = C - 0.5 * np.outer(v, v) / (grid.cell_volume * v @ v)
        eig = dense_eig(matrixize(_cov_surface(grid, C)), None, grid)
        assert eig.L == 2 and np.all(eig.eigenvalues > 0)
        np.testing.assert_allclose(eig.fve[-1], 1.0)

    def test_sign_convention(self):
        v = np.array([[1.0, -1.0], [-3.0, 1.0], [1.0, 0.0]])
        out = canonical_signs(v)
        assert out[:, 0].sum() > 0
        # zero column sum: the first non-negligible entry is made positive
        np.testing.assert_array_equal(out[:, 1], [1.0, -1.0, 0.0])


class TestRandomizedEig:
    def test_rank3_exact(self):
        grid = EvaluationGrid.regular([0], [1], 200)
        C, _ = _low_rank(grid, [5.0, 2.0, 0.5], seed=4)
        S = matrixize(_cov_surface(grid, C))
        dense = dense_eig(S, 3, grid)
        rand = randomized_eig(S, 10, 3, grid, seed=1)
        np.testing.assert_allclose(rand.eigenvalues, dense.eigenvalues, rtol=1e-6)
        for k in range(3):
            assert ise(rand.eigenfunctions[k], dense.eigenfunctions[k], grid) < 1e-8

    def test_rank1_minimal_sketch(self):
        grid = EvaluationGrid.regular([0], [1], 50)
        C, _ = _low_rank(grid, [1.5], seed=5)
        S = matrixize(_cov_surface(grid, C))
        dense = dense_eig(S, 1, grid)
        rand = randomized_eig(S, 1, 1, grid, seed=0)
        assert rand.eigenvalues[0] == pytest.approx(dense.eigenvalues[0], rel=1e-4)
        assert ise(rand.eigenfunctions[0], dense.eigenfunctions[0], grid) < 1e-4

    def test_provider_path(self):
        grid = EvaluationGrid.regular([0], [1], 60)
        C, _ = _low_rank(grid, [4.0, 1.0], seed=6)
        S = matrixize(_cov_surface(grid, C), memory_budget=0)
        rand = randomized_eig(S, 8, 2, grid, seed=0)
        np.testing.assert_allclose(rand.eigenvalues, [4, 1], rtol=1e-8)
        assert np.max(eigen_residuals(S, rand)) < 1e-8

    def test_sketch_too_small(self):
        grid = EvaluationGrid.regular([0], [1], 20)
        C, _ = _low_rank(grid, [1.0, 0.5])
        with pytest.raises(SketchTooSmall):
            randomized_eig(matrixize(_cov_surface(grid, C)), 2, 3, grid, seed=0)

    def test_seed_reproducible(self):
        grid = EvaluationGrid.regular([0], [1], 80)
        rng = np.random.default_rng(0)
        A = rng.standard_normal((80, 80))
        S = matrixize(_cov_surface(grid, A @ A.T))
        a = randomized_eig(S, 15, 5, grid, seed=42)
        b = randomized_eig(S, 15, 5, grid, seed=42)
        assert np.array_equal(a.eigenvalues, b.eigenvalues)
        assert np.array_equal(a.eigenfunctions, b.eigenfunctions)


class TestFve:
    def test_two_components(self):
        assert select_components_fve(np.array([4.0, 1.0]), 0.95) == 2

    def test_first_crosses(self):
        assert select_components_fve(np.array([16.0, 4.0, 1.0]), 0.75) == 1

    def test_threshold_one(self):
        assert select_components_fve(np.array([3.0, 2.0, 1.0, 0.5]), 1.0) == 4

    def test_invalid_threshold(self):
        with pytest.raises(ValueError):
            select_components_fve(np.array([1.0]), 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 40), st.sampled_from(["dense", "randomized"]))
def test_riemann_orthonormality(seed, m, method):
    grid = EvaluationGrid.regular([0], [3], m)
    A = np.random.default_rng(seed).standard_normal((m, m))
    S = matrixize(_cov_surface(grid, A @ A.T))
    L = min(5, m)
    eig = dense_eig(S, L, grid) if method == "dense" else randomized_eig(S, m, L, grid, seed=seed)
    np.testing.assert_allclose(eig.gram(), np.eye(eig.L), atol=1e-8)
