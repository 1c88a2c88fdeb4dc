import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gridded_samples, quiet
from dfpca.core import Bandwidth, EvaluationGrid, FunctionalDataset, linear_bin
from dfpca.errors import HaloTooSmall
from dfpca.fft_smoother import (
    BlockPlan,
    FftCovariance,
    axis_stencils,
    blockwise_apply,
    fft_covariance,
    fft_local_linear,
    stencil_radius,
)
from dfpca.smoother import estimate_covariance, estimate_diag_plus_noise, estimate_mean


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


class TestStencils:
    def test_radius(self):
        grid = EvaluationGrid.regular([0, 0], [1, 2], [11, 11])
        np.testing.assert_array_equal(stencil_radius(Bandwidth((0.25, 0.25)), grid), [3, 2])

    def test_stencil_is_sampled_kernel(self):
        st_ = axis_stencils(0.3, 0.1, 3, max_power=0)
        offsets = np.arange(-3, 4) * 0.1
        expected = np.where(np.abs(offsets) <= 0.3, 0.75 * (1 - (offsets / 0.3) ** 2), 0.0) / 0.3
        np.testing.assert_allclose(np.ravel(st_[0]), expected, atol=1e-15)


class TestFftLocalLinear:
    def test_impulse_matches_direct(self):
        grid = EvaluationGrid.regular([0.0], [1.0], 21)
        # point mass at one node plus a small background so every window is nonempty
        x = grid.axes[0]
        y = np.zeros(21)
        y[10] = 1.0
        ds = FunctionalDataset.from_samples([(x, y)], bounding_box=[[0, 1]])
        h = Bandwidth((0.17,))
        fft = fft_local_linear(linear_bin(ds, grid), grid, h, "mean")
        direct = estimate_mean(ds, grid, h)
        np.testing.assert_allclose(fft.values, direct.values, atol=1e-10)
        assert fft.values[10] > 0 and fft.values[0] == pytest.approx(0.0, abs=1e-12)

    def test_constant(self):
        rng = np.random.default_rng(1)
        ds = FunctionalDataset.from_samples([(rng.random(20), np.full(20, -0.7)) for _ in range(5)], bounding_box=[[0, 1]])
        grid = EvaluationGrid.regular([0], [1], 33)
        s = fft_local_linear(linear_bin(ds, grid), grid, Bandwidth((0.1,)), "mean")
        np.testing.assert_allclose(s.values, -0.7, rtol=1e-12)

    def test_squares_target(self):
        grid = EvaluationGrid.regular([0, 0], [1, 1], 9)
        ds = FunctionalDataset.from_samples(gridded_samples(grid, 12, seed=4), bounding_box=[[0, 1]] * 2)
        h = Bandwidth((0.3, 0.3))
        fft = fft_local_linear(linear_bin(ds, grid), grid, h, "squares")
        direct = estimate_diag_plus_noise(ds, grid, h)
        assert _rel(fft.values, direct.values) < 1e-10

    def test_binning_consistency(self):
        # off-node data: the discrepancy to the direct fit shrinks as bins double
        rng = np.random.default_rng(8)
        samples = [(rng.random(30), None) for _ in range(10)]
        samples = [(x, np.sin(6 * x) + 0.3 * rng.standard_normal(30)) for x, _ in samples]
        ds = FunctionalDataset.from_samples(samples, bounding_box=[[0, 1]])
        h = Bandwidth((0.15,))
        gaps = []
        for num in (11, 21, 41, 81):
            grid = EvaluationGrid.regular([0], [1], num)
            fft = fft_local_linear(linear_bin(ds, grid), grid, h, "mean")
            gaps.append(np.max(np.abs(fft.values - estimate_mean(ds, grid, h).values)))
        assert all(b < a for a, b in zip(gaps, gaps[1:]))

    def test_runtime_scaling(self):
        rng = np.random.default_rng(0)
        ds = FunctionalDataset.from_samples([(rng.random(50_000), rng.standard_normal(50_000))], bounding_box=[[0, 1]])

        def best_time(num):
            grid = EvaluationGrid.regular([0], [1], num)
            binned = linear_bin(ds, grid, per_sample=False)
            h = Bandwidth((0.01,))
            ts = []
            for _ in range(5):
                t0 = time.perf_counter()
                fft_local_linear(binned, grid, h, "mean")
                ts.append(time.perf_counter() - t0)
            return min(ts)

        best_time(2**12 + 1)
        ratio = best_time(2**14 + 1) / best_time(2**13 + 1)
        assert ratio < 3.0


class TestFftCovariance:
    def test_two_observations_per_sample(self):
        grid = EvaluationGrid.regular([0.0], [1.0], 11)
        x = grid.axes[0]
        samples = [(x[[1, 6]], [1.0, -2.0]), (x[[3, 9]], [0.5, 0.4]), (x[[2, 7]], [2.0, 1.0]),
                   (x[[0, 5]], [-1.0, 1.5]), (x[[4, 10]], [0.3, -0.6]), (x[[2, 8]], [1.1, 0.9])]
        ds = FunctionalDataset.from_samples(samples, bounding_box=[[0, 1]])
        binned = linear_bin(ds, grid)
        # only off-diagonal pairs exist: the same-observation correction grids are empty
        assert set(binned.pair_mass) == {(0,)}
        h = Bandwidth((0.45,))
        with quiet():
            mean = estimate_mean(ds, grid, h)
            fft = fft_covariance(binned, grid, h, mean)
            direct = estimate_covariance(ds, grid, h, mean)
        assert _rel(fft.values, direct.values) < 1e-10

    def test_fine_binning_matches_direct(self):
        rng = np.random.default_rng(12)
        samples = []
        for _ in range(40):
            x = rng.random(10)
            a, b = rng.standard_normal(2)
            samples.append((x, a * np.cos(np.pi * x) + b * x + 0.1 * rng.standard_normal(10)))
        ds = FunctionalDataset.from_samples(samples, bounding_box=[[0, 1]])
        h = Bandwidth((0.2,))
        coarse = EvaluationGrid.regular([0], [1], 11)
        mean = estimate_mean(ds, coarse, h)
        direct = estimate_covariance(ds, coarse, h, mean).values
        fine = EvaluationGrid.regular([0], [1], 401)
        fmean = fft_local_linear(linear_bin(ds, fine), fine, h, "mean")
        fcov = fft_covariance(linear_bin(ds, fine), fine, h, fmean).values[::40, ::40]
        assert np.linalg.norm(fcov - direct) / np.linalg.norm(direct) < 1e-3

    def test_exact_symmetry(self):
        grid = EvaluationGrid.regular([0, 0], [1, 1], 6)
        ds = FunctionalDataset.from_samples(gridded_samples(grid, 10, seed=2), bounding_box=[[0, 1]] * 2)
        binned = linear_bin(ds, grid)
        h = Bandwidth((0.4, 0.4))
        with quiet():
            S = fft_covariance(binned, grid, h, fft_local_linear(binned, grid, h)).as_matrix()
        assert np.array_equal(S, S.T)

    def test_matmat_and_entries(self):
        grid = EvaluationGrid.regular([0], [1], 15)
        ds = FunctionalDataset.from_samples(gridded_samples(grid, 10, seed=3), bounding_box=[[0, 1]])
        binned = linear_bin(ds, grid)
        h = Bandwidth((0.3,))
        with quiet():
            eng = FftCovariance(binned, h, fft_local_linear(binned, grid, h))
            dense = eng.dense()
        V = np.random.default_rng(0).standard_normal((15, 3))
        np.testing.assert_allclose(eng.matmat(V), dense @ V, atol=1e-12)
        rows, cols = np.array([0, 3, 7]), np.array([1, 14])
        np.testing.assert_array_equal(eng.entries(rows, cols), dense[np.ix_(rows, cols)])


class TestBlocks:
    def _setup(self, d=2, num=12, h=0.25):
        grid = EvaluationGrid.regular([0] * d, [1] * d, num)
        ds = FunctionalDataset.from_samples(gridded_samples(grid, 15, seed=9), bounding_box=[[0, 1]] * d)
        return grid, linear_bin(ds, grid), Bandwidth((h,) * d)

    def test_single_block_identical(self):
        grid, binned, h = self._setup()
        plan = BlockPlan.single(grid.shape)
        with quiet():
            a = blockwise_apply(plan, "mean", binned, h)
            b = fft_local_linear(binned, grid, h)
        np.testing.assert_array_equal(a.values, b.values)

    def test_two_blocks_mean(self):
        grid, binned, h = self._setup(d=1, num=40, h=0.1)
        plan = BlockPlan.split(grid.shape, 2, stencil_radius(h, grid))
        with quiet():
            a = blockwise_apply(plan, fft_local_linear, binned, h)
            b = fft_local_linear(binned, grid, h)
        np.testing.assert_allclose(a.values, b.values, atol=1e-12, rtol=0)

    def test_halo_too_small(self):
        grid, binned, h = self._setup()
        plan = BlockPlan.split(grid.shape, 2, stencil_radius(h, grid) - 1)
        with pytest.raises(HaloTooSmall):
            blockwise_apply(plan, "mean", binned, h)

    def test_covariance_bit_identical(self):
        grid, binned, h = self._setup()
        with quiet():
            mean = fft_local_linear(binned, grid, h)
            full = fft_covariance(binned, grid, h, mean)
            plan = BlockPlan.split(grid.shape, 2, stencil_radius(h, grid))
            blocked = blockwise_apply(plan, "covariance", binned, h, mean=mean)
        assert len(plan.cores) == 4
        assert np.array_equal(blocked.values, full.values)

    def test_plan_must_tile(self):
        with pytest.raises(ValueError, match="tile"):
            BlockPlan((10,), (((0, 4),), ((5, 10),)), (2,))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 2), st.integers(0, 10_000), st.integers(1, 2), st.floats(0.15, 0.85))
def test_fft_equals_direct_on_nodes(d, seed, whole, frac):
    # h = (whole + frac) spacings keeps the support edge off the nodes; at exact
    # multiples roundoff decides whether an edge node enters the window at all
    num = 9 if d == 1 else 6
    grid = EvaluationGrid.regular([0] * d, [1] * d, num)
    h = (whole + frac) * grid.spacing[0]
    ds = FunctionalDataset.from_samples(gridded_samples(grid, 8, seed=seed), bounding_box=[[0, 1]] * d)
    bw = Bandwidth((h,) * d)
    binned = linear_bin(ds, grid)
    with quiet():
        direct_mean = estimate_mean(ds, grid, bw)
        fft_mean = fft_local_linear(binned, grid, bw)
        direct_cov = estimate_covariance(ds, grid, bw, direct_mean)
        fft_cov = fft_covariance(binned, grid, bw, direct_mean)
    assert _rel(fft_mean.values, direct_mean.values) < 1e-10
    assert _rel(fft_cov.values, direct_cov.values) < 1e-10
