import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfpca.core import EvaluationGrid
from dfpca.simulate import (
    SIM2_RESCALE,
    SimSpec,
    empirical_rate_check,
    generate,
    ise,
    mise,
    quadrature_gram,
    summary_table,
)


def _flat_custom(**kw):
    base = dict(
        model="custom",
        n=5,
        points=20,
        mean_fn=lambda t: 1.0 + t[..., 0] ** 2,
        eigenfunctions=[lambda t: np.ones(t.shape[:-1])],
        eigenvalues=[0.0],
        domain=[[0.0, 1.0]],
    )
    base.update(kw)
    return SimSpec(**base)


class TestGenerate:
    def test_degenerate_process_equals_mean(self):
        spec = _flat_custom(noise_var=0.0)
        ds, truth = generate(spec)
        for c, v in ds:
            np.testing.assert_array_equal(v, spec.mean_fn(c))

    def test_sim1_defaults(self):
        spec = SimSpec("sim1", n=3)
        ds, truth = generate(spec)
        assert spec.points == 1000 and spec.noise_var == 0.25
        assert tuple(spec.eigenvalues) == (4.0, 1.0)
        assert ds.values.size == 3000
        np.testing.assert_array_equal(ds.bounding_box, [[0.0, 10.0]])

    def test_sim1_score_variance(self):
        _, truth = generate(SimSpec("sim1", n=10_000, points=2, seed=3))
        assert truth.scores[:, 0].var() == pytest.approx(4.0, rel=0.02)

    def test_sim2_design(self):
        spec = SimSpec("sim2", n=2, points=8)
        ds, truth = generate(spec)
        assert ds.d == 3 and ds.values.size == 2 * 8**3
        assert truth.metadata["grid_shape"] == [8, 8, 8]
        assert truth.metadata["eigenfunction_rescale"] == pytest.approx(np.sqrt(512))
        assert tuple(spec.eigenvalues) == (16.0, 4.0, 1.0, 0.25)

    def test_sim2_raw_norm(self):
        # each axis factor sin^2(2 l pi t) / 4 integrates to 1/8 over [0, 1]
        raw = SimSpec("sim2", n=1, rescale_sim2=False)
        gram = quadrature_gram(raw.eigenfunctions, raw.domain, total_nodes=64**3)
        np.testing.assert_allclose(np.diag(gram), 1 / 512, rtol=1e-10)
        scaled = SimSpec("sim2", n=1)
        gram = quadrature_gram(scaled.eigenfunctions, scaled.domain, total_nodes=64**3)
        np.testing.assert_allclose(gram, np.eye(4), atol=1e-10)
        assert SIM2_RESCALE**2 == pytest.approx(512)

    def test_sim2_riemann_orthonormal_on_design(self):
        spec = SimSpec("sim2", n=1, points=16)
        grid = spec.design_grid()
        _, truth = generate(spec)
        phi = truth.eigenfunctions_on(grid).reshape(4, -1)
        np.testing.assert_allclose(grid.cell_volume * phi @ phi.T, np.eye(4), atol=1e-12)

    def test_random_design(self):
        ds, _ = generate(SimSpec("sim1", n=4, points=7, random_design=True, seed=1))
        assert ds.values.size == 28
        assert np.all((ds.coords >= 0) & (ds.coords <= 10))

    def test_noiseless_truth(self):
        ds, truth = generate(SimSpec("sim1", n=3, points=50, noise_var=0.0))
        np.testing.assert_array_equal(ds.values, truth.noiseless)
        grid = EvaluationGrid.regular([0], [10], 50)
        np.testing.assert_allclose(truth.curves_on(grid).ravel(), truth.noiseless, atol=1e-12)

    def test_replicates_are_independent_and_reproducible(self):
        spec = SimSpec("sim1", n=5, points=10, seed=9)
        a, _ = generate(spec, replicate=0)
        b, _ = generate(spec, replicate=1)
        c, _ = generate(spec, replicate=0)
        assert not np.array_equal(a.values, b.values)
        assert np.array_equal(a.values, c.values)

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            SimSpec("sim3")
        with pytest.raises(ValueError):
            SimSpec("sim1", eigenvalues=(1.0, 4.0))
        with pytest.raises(ValueError):
            SimSpec("sim1", noise_var=-1.0)
        with pytest.raises(ValueError, match="orthonormal"):
            _flat_custom(eigenfunctions=[lambda t: 2 * np.ones(t.shape[:-1])])
        with pytest.raises(ValueError):
            SimSpec("custom", n=2)


class TestMetrics:
    def test_mise_identity(self):
        grid = EvaluationGrid.regular([0], [1], 11)
        x = np.random.default_rng(0).standard_normal((3, 11))
        assert mise(x, x, grid) == 0.0

    def test_mise_constant_offset(self):
        grid = EvaluationGrid.midpoints([0, 0], [2, 3], 10)
        x = np.zeros((2,) + grid.shape)
        assert mise(x + 0.5, x, grid) == pytest.approx(0.25 * 6.0, rel=1e-12)

    def test_ise_sign(self):
        grid = EvaluationGrid.midpoints([0], [1], 100)
        phi = np.sqrt(2) * np.sin(2 * np.pi * grid.axes[0])
        assert ise(-phi, phi, grid) == 0.0

    def test_ise_orthogonal_pair(self):
        grid = EvaluationGrid.midpoints([0], [1], 100)
        t = grid.axes[0]
        a, b = np.sqrt(2) * np.sin(2 * np.pi * t), np.sqrt(2) * np.cos(2 * np.pi * t)
        assert ise(a, b, grid) == pytest.approx(2.0, rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_nonnegative_and_zero_iff_equal(self, seed):
        grid = EvaluationGrid.regular([0], [1], 9)
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((2, 9))
        assert mise(a, b, grid) > 0 and ise(a, b, grid) > 0
        assert mise(a, a, grid) == 0 and ise(a, -a, grid) == 0

    def test_summary_table(self):
        out = summary_table({"mise": [0.01, 0.02, 0.03]})
        assert out.splitlines()[0].startswith("statistic,mise")
        assert "0.02" in out


class TestRateCheck:
    def test_sim1_mean_decreases(self):
        rep = empirical_rate_check("mean", SimSpec("sim1", points=60, seed=5), repeats=10)
        assert rep.decreasing and not rep.degenerate
        assert rep.slope < 0
        assert "reference_slope,-0.5" in rep.table()

    def test_noise_free_fixed_function_is_degenerate(self):
        spec = _flat_custom(noise_var=0.0, points=30)
        rep = empirical_rate_check("mean", spec, repeats=2, grid=EvaluationGrid.regular([0], [1], 30))
        assert rep.degenerate and np.isnan(rep.slope)

    def test_needs_three_sizes(self):
        with pytest.raises(ValueError):
            empirical_rate_check("mean", SimSpec("sim1"), ns=(50, 100))


def test_bit_reproducible():
    spec = SimSpec("sim1", n=6, points=40, seed=123, random_design=True)
    a, ta = generate(spec)
    b, tb = generate(spec)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.coords.tobytes() == b.coords.tobytes()
    assert ta.scores.tobytes() == tb.scores.tobytes()


def test_score_covariance_diagonal_dominant():
    # Sim I: the sampling sd of cov(A1, A2) is sqrt(4 * 1 / 5000) = 0.028
    _, truth = generate(SimSpec("sim1", n=5000, points=2, seed=4))
    C = np.cov(truth.scores.T)
    lam_min = 1.0
    off = C - np.diag(np.diag(C))
    assert np.max(np.abs(off)) < 0.1 * lam_min
