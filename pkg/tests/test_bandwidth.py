import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import loo_oracle, noisy_bowl, pairs_oracle
from dfpca.bandwidth import (
    CvObjective,
    cv_score,
    optimize_bandwidth,
    quadratic_features,
    rule_of_thumb_bandwidth,
    solve_trust_region,
    trust_region_minimize,
)
from dfpca.core import Bandwidth, EvaluationGrid, FunctionalDataset


def _noisy_sine(seed, n=10, m=5, noise=0.3, scale=1.0):
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        x = rng.random(m)
        y = np.sin(2 * np.pi * x) + 0.3 * rng.standard_normal() + noise * rng.standard_normal(m)
        samples.append((scale * x, y))
    return FunctionalDataset.from_samples(samples, bounding_box=[[0.0, scale]])


class TestCvScore:
    def test_linear_truth_whole_window(self):
        rng = np.random.default_rng(0)
        samples = [(x, 2.0 - 3.0 * x) for x in (rng.random(6) for _ in range(5))]
        ds = FunctionalDataset.from_samples(samples, bounding_box=[[0, 1]])
        assert cv_score(Bandwidth((1.0,)), CvObjective("mean", ds, scheme="loo")) < 1e-24

    def test_tiny_bandwidth_worse_than_optimum(self):
        ds = _noisy_sine(3, n=40, m=8)
        obj = CvObjective("mean", ds, scheme="loo")
        best = optimize_bandwidth(obj, budget=25)
        tiny = cv_score(Bandwidth((0.02,)), obj)
        assert tiny > best.value

    def test_shortcut_equals_refits_mean(self):
        ds = _noisy_sine(5)
        assert ds.values.size == 50
        h = Bandwidth((0.2,))
        got = cv_score(h, CvObjective("mean", ds, scheme="loo"))
        want = loo_oracle(ds.coords, ds.values, ds.observation_weights(), h.values)
        assert abs(got - want) <= 1e-10 * want

    def test_shortcut_equals_refits_squares(self):
        ds = _noisy_sine(6)
        h = Bandwidth((0.25,))
        got = cv_score(h, CvObjective("diag_plus_noise", ds, scheme="loo"))
        want = loo_oracle(ds.coords, ds.values**2, ds.observation_weights(), h.values)
        assert abs(got - want) <= 1e-10 * want

    def test_shortcut_equals_refits_covariance(self):
        ds = _noisy_sine(7, n=8, m=4)
        h = Bandwidth((0.3,))
        got = cv_score(h, CvObjective("covariance", ds, scheme="loo"))
        Z, p, w = pairs_oracle(list(ds))
        want = loo_oracle(Z, p, w, np.concatenate([h.values, h.values]))
        assert abs(got - want) <= 1e-10 * want

    def test_shortcut_2d(self):
        rng = np.random.default_rng(9)
        samples = [(rng.random((10, 2)), rng.standard_normal(10)) for _ in range(5)]
        ds = FunctionalDataset.from_samples(samples, bounding_box=[[0, 1], [0, 1]])
        h = Bandwidth((0.4, 0.5))
        got = cv_score(h, CvObjective("mean", ds, scheme="loo"))
        want = loo_oracle(ds.coords, ds.values, ds.observation_weights(), h.values)
        assert abs(got - want) <= 1e-10 * want

    def test_binned_equals_loo_one_observation_per_bin(self):
        grid = EvaluationGrid.regular([0], [1], 41)
        rng = np.random.default_rng(2)
        idx = rng.permutation(41)
        x = grid.axes[0]
        samples = [(x[idx[k:k + 8]], rng.standard_normal(8)) for k in range(0, 40, 8)]
        ds = FunctionalDataset.from_samples(samples, bounding_box=[[0, 1]])
        h = Bandwidth((0.13,))
        loo = cv_score(h, CvObjective("mean", ds, scheme="loo"))
        binned = cv_score(h, CvObjective("mean", ds, grid, scheme="binned"))
        assert binned == pytest.approx(loo, rel=1e-10)

    def test_deterministic(self):
        ds = _noisy_sine(1)
        obj = CvObjective("mean", ds, scheme="loo")
        assert cv_score(Bandwidth((0.2,)), obj) == cv_score(Bandwidth((0.2,)), obj)

    def test_binned_needs_grid(self):
        with pytest.raises(ValueError):
            CvObjective("mean", _noisy_sine(0), scheme="binned")

    def test_unknown_target(self):
        with pytest.raises(ValueError):
            CvObjective("median", _noisy_sine(0))


class TestRuleOfThumb:
    def test_targets_thirty_per_window(self):
        ds = _noisy_sine(0, n=30, m=10)
        assert rule_of_thumb_bandwidth(ds).values[0] == pytest.approx(0.1)

    def test_capped_at_half_range(self):
        ds = _noisy_sine(0, n=2, m=5)
        assert rule_of_thumb_bandwidth(ds).values[0] == pytest.approx(0.5)


class TestTrustRegionStep:
    def test_interior_newton_step(self):
        H = np.array([[2.0, 0.5], [0.5, 1.0]])
        g = np.array([0.1, -0.2])
        np.testing.assert_allclose(solve_trust_region(g, H, 1.0), -np.linalg.solve(H, g), rtol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_boundary_step_beats_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((2, 2))
        H = A + A.T
        g = rng.standard_normal(2)
        u = solve_trust_region(g, H, 1.0)
        assert np.linalg.norm(u) <= 1 + 1e-10
        theta = np.linspace(0, 2 * np.pi, 4001)
        rad = np.linspace(0, 1, 201)
        pts = (rad[:, None, None] * np.stack([np.cos(theta), np.sin(theta)], -1)).reshape(-1, 2)
        vals = pts @ g + 0.5 * np.einsum("ij,jk,ik->i", pts, H, pts)
        assert g @ u + 0.5 * u @ H @ u <= vals.min() + 1e-9

    def test_hard_case(self):
        H = np.diag([-1.0, 2.0])
        u = solve_trust_region(np.array([0.0, 0.0]), H, 0.5)
        assert np.linalg.norm(u) == pytest.approx(0.5)
        assert abs(u[0]) == pytest.approx(0.5)

    def test_quadratic_features_count(self):
        assert quadratic_features(np.zeros((4, 3))).shape == (4, 10)


class TestOptimizer:
    def test_noiseless_bowl_1d(self):
        res = trust_region_minimize(lambda x: float((x[0] - 0.7) ** 2), np.array([-1.0]), 30)
        assert abs(res.best[0] - 0.7) < 1e-3
        assert res.n_evals <= 30

    def test_noisy_bowl_20_seeds(self):
        hits = 0
        for s in range(20):
            h_star = np.array([0.08])
            res = trust_region_minimize(noisy_bowl(h_star, s), np.log([0.25]), 40, seed=s)
            hits += abs(np.exp(res.best[0]) / h_star[0] - 1) < 0.05
        assert hits >= 18

    def test_budget_precondition(self):
        with pytest.raises(ValueError, match="budget"):
            trust_region_minimize(lambda x: 0.0, np.zeros(2), 6)

    def test_failed_evaluations_skipped(self):
        def f(x):
            return float("inf") if x[0] < 0 else float((x[0] - 1) ** 2)

        res = trust_region_minimize(f, np.array([0.2]), 30, seed=1)
        assert abs(res.best[0] - 1) < 1e-2

    def test_bounds_respected(self):
        res = trust_region_minimize(lambda x: float(x[0]), np.array([0.0]), 20, lower=[-1.0], upper=[1.0])
        assert res.best[0] == pytest.approx(-1.0)
        assert all(-1 <= r.point[0] <= 1 for r in res.trace)

    def test_trace_csv(self):
        ds = _noisy_sine(2, n=20)
        res = optimize_bandwidth(CvObjective("mean", ds, scheme="loo"), budget=12)
        lines = res.trace_csv().splitlines()
        assert lines[0] == "iteration,h_1,objective,radius,accepted"
        assert len(lines) == res.optimizer.n_evals + 1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_best_so_far_nonincreasing(seed, d):
    rng = np.random.default_rng(seed)
    h_star = np.exp(rng.uniform(-4, -1, d))
    res = trust_region_minimize(noisy_bowl(h_star, seed), np.log(h_star) + 1.0, 30, seed=seed)
    b = res.best_so_far()
    assert np.all(np.diff(b) <= 0)
    assert res.value == b[-1]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([0.01, 0.37, 8.0, 250.0]))
def test_scale_covariance(seed, c):
    base = optimize_bandwidth(CvObjective("mean", _noisy_sine(seed, n=15), scheme="loo"), budget=15, seed=seed)
    scaled = optimize_bandwidth(
        CvObjective("mean", _noisy_sine(seed, n=15, scale=c), scheme="loo"), budget=15, seed=seed
    )
    assert scaled.bandwidth.values[0] == pytest.approx(c * base.bandwidth.values[0], rel=0.01)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_deterministic_and_within_extent(seed):
    obj = CvObjective("mean", _noisy_sine(seed, n=6, m=4), scheme="loo")
    a = optimize_bandwidth(obj, budget=15, seed=seed)
    b = optimize_bandwidth(obj, budget=15, seed=seed)
    assert a.trace_csv() == b.trace_csv()
    assert a.bandwidth.values[0] <= 1.0
