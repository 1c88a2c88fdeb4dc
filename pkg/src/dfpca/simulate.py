"""Seeded Karhunen-Loeve simulation models, error metrics and empirical-rate checks."""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from dfpca.core import Bandwidth, EvaluationGrid, FunctionalDataset

SIM2_RESCALE = np.sqrt(512.0)


def _sim1_mean(t):
    t = t[..., 0]
    return t + np.sin(t)


def _sim1_phi(k):
    def phi(t):
        t = t[..., 0]
        base = -np.cos(np.pi * t / 10) if k == 1 else np.sin(np.pi * t / 10)
        return base / np.sqrt(5.0)

    return phi


def _sim2_mean(t):
    c = t - 0.5
    return np.exp(np.sum(c * c, axis=-1))


def _sim2_phi(ell, rescale=True):
    def phi(t):
        v = np.prod(np.sin(2 * ell * np.pi * t) / 2, axis=-1)
        return v * SIM2_RESCALE if rescale else v

    return phi


def replicate_seed(seed: int, replicate: int) -> np.random.SeedSequence:
    """Independent substream for one replicate of a seeded experiment."""
    return np.random.SeedSequence(int(seed), spawn_key=(int(replicate),))


@dataclass
class SimSpec:
    """Simulation design.

    ``model`` is ``"sim1"`` (1-d, two components on ``[0, 10]``),
    ``"sim2"`` (3-d, four components on ``[0, 1]^3``) or ``"custom"``.
    The design is either a shared grid with ``points`` nodes per axis or,
    with ``random_design=True``, ``points`` uniform random locations per
    sample.  Fields left as ``None`` take the model's defaults.
    """

    model: str = "sim1"
    n: int = 100
    points: Optional[int] = None
    random_design: bool = False
    seed: int = 0
    eigenvalues: Optional[Sequence[float]] = None
    noise_var: Optional[float] = None
    mean_fn: Optional[Callable] = None
    eigenfunctions: Optional[Sequence[Callable]] = None
    domain: Optional[np.ndarray] = None
    rescale_sim2: bool = True

    def __post_init__(self):
        if self.model not in ("sim1", "sim2", "custom"):
            raise ValueError(f"unknown simulation model {self.model!r}")
        if self.model == "sim1":
            self.points = 1000 if self.points is None else self.points
            self.eigenvalues = (4.0, 1.0) if self.eigenvalues is None else self.eigenvalues
            self.noise_var = 0.25 if self.noise_var is None else self.noise_var
            self.mean_fn = self.mean_fn or _sim1_mean
            self.eigenfunctions = self.eigenfunctions or (_sim1_phi(1), _sim1_phi(2))
            self.domain = np.array([[0.0, 10.0]]) if self.domain is None else self.domain
        elif self.model == "sim2":
            self.points = 16 if self.points is None else self.points
            self.eigenvalues = tuple(4.0 ** (3 - k) for k in range(1, 5)) if self.eigenvalues is None else self.eigenvalues
            self.noise_var = 1.0 / 16 if self.noise_var is None else self.noise_var
            self.mean_fn = self.mean_fn or _sim2_mean
            self.eigenfunctions = self.eigenfunctions or tuple(_sim2_phi(k, self.rescale_sim2) for k in range(1, 5))
            self.domain = np.array([[0.0, 1.0]] * 3) if self.domain is None else self.domain
        else:
            if self.mean_fn is None or self.eigenfunctions is None or self.eigenvalues is None:
                raise ValueError("a custom model needs a mean, eigenfunctions and eigenvalues")
            if self.domain is None or self.points is None:
                raise ValueError("a custom model needs a domain and a design size")
            self.noise_var = 0.0 if self.noise_var is None else self.noise_var
        self.domain = np.atleast_2d(np.asarray(self.domain, dtype=float))
        lam = np.asarray(self.eigenvalues, dtype=float)
        if len(lam) != len(self.eigenfunctions):
            raise ValueError("one eigenvalue per eigenfunction is required")
        if np.any(lam < 0) or np.any(np.diff(lam) > 0):
            raise ValueError("score variances must be nonnegative and nonincreasing")
        if self.noise_var < 0:
            raise ValueError("noise variance must be nonnegative")
        if self.n < 1 or self.points < 1:
            raise ValueError("need at least one sample and one design point")
        if self.model == "custom":
            gram = quadrature_gram(self.eigenfunctions, self.domain)
            if np.max(np.abs(gram - np.eye(len(lam)))) > 1e-3:
                raise ValueError("custom eigenfunctions are not orthonormal on the domain")

    @property
    def d(self) -> int:
        return self.domain.shape[0]

    def design_grid(self) -> EvaluationGrid:
        """Shared observation grid.

        sim2 uses cell-centred nodes so that the four sine products stay
        exactly orthogonal under the Riemann sum; the other models use
        nodes including the end points.
        """
        lo, hi = self.domain[:, 0], self.domain[:, 1]
        if self.model == "sim2":
            return EvaluationGrid.midpoints(lo, hi, self.points)
        return EvaluationGrid.regular(lo, hi, self.points)

    def metadata(self) -> dict:
        meta = {
            "model": self.model,
            "n": int(self.n),
            "points": int(self.points),
            "random_design": bool(self.random_design),
            "seed": int(self.seed),
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "noise_var": float(self.noise_var),
            "domain": self.domain.tolist(),
        }
        if self.model == "sim2":
            meta["grid_shape"] = [int(self.points)] * 3
            meta["eigenfunction_rescale"] = float(SIM2_RESCALE) if self.rescale_sim2 else 1.0
        return meta


def quadrature_gram(functions: Sequence[Callable], domain: np.ndarray, total_nodes: int = 200_000) -> np.ndarray:
    """Midpoint-rule Gram matrix of ``functions`` on a box."""
    domain = np.atleast_2d(domain)
    d = domain.shape[0]
    per_axis = max(8, int(round(total_nodes ** (1.0 / d))))
    g = EvaluationGrid.midpoints(domain[:, 0], domain[:, 1], per_axis)
    F = np.stack([f(g.nodes()) for f in functions], axis=1)
    return g.cell_volume * (F.T @ F)


@dataclass
class SimTruth:
    """Ground truth of one generated dataset."""

    spec: SimSpec
    scores: np.ndarray
    noiseless: np.ndarray
    metadata: dict = field(default_factory=dict)

    def mean_on(self, grid: EvaluationGrid) -> np.ndarray:
        return self.spec.mean_fn(grid.nodes()).reshape(grid.shape)

    def eigenfunctions_on(self, grid: EvaluationGrid) -> np.ndarray:
        x = grid.nodes()
        return np.stack([f(x).reshape(grid.shape) for f in self.spec.eigenfunctions])

    def curves_on(self, grid: EvaluationGrid) -> np.ndarray:
        """Noiseless sample functions on ``grid``, shape ``(n,) + grid.shape``."""
        return self.mean_on(grid) + np.tensordot(self.scores, self.eigenfunctions_on(grid), axes=1)

    def covariance_on(self, grid: EvaluationGrid) -> np.ndarray:
        phi = self.eigenfunctions_on(grid).reshape(len(self.spec.eigenvalues), -1)
        lam = np.asarray(self.spec.eigenvalues, dtype=float)
        return ((phi.T * lam) @ phi).reshape(grid.shape * 2)


def generate(spec: SimSpec, replicate: Optional[int] = None) -> tuple[FunctionalDataset, SimTruth]:
    """Draw ``n`` noisy samples; scores ``N(0, lambda)`` and iid ``N(0, sigma^2)`` noise.

    ``replicate`` selects an independent substream of ``spec.seed``.
    """
    ss = np.random.SeedSequence(spec.seed) if replicate is None else replicate_seed(spec.seed, replicate)
    rng = np.random.default_rng(ss)
    lam = np.asarray(spec.eigenvalues, dtype=float)
    scores = rng.standard_normal((spec.n, len(lam))) * np.sqrt(lam)
    lo, hi = spec.domain[:, 0], spec.domain[:, 1]
    shared = None if spec.random_design else spec.design_grid().nodes()
    samples, clean = [], []
    for i in range(spec.n):
        x = shared if shared is not None else lo + (hi - lo) * rng.random((spec.points, spec.d))
        phi = np.stack([f(x) for f in spec.eigenfunctions], axis=1) if len(lam) else np.zeros((len(x), 0))
        xi = spec.mean_fn(x) + phi @ scores[i]
        noise = rng.standard_normal(len(x)) * np.sqrt(spec.noise_var) if spec.noise_var > 0 else 0.0
        samples.append((x, xi + noise))
        clean.append(xi)
    ds = FunctionalDataset.from_samples(samples, bounding_box=spec.domain)
    meta = spec.metadata()
    return ds, SimTruth(spec, scores, np.concatenate(clean), meta)


def mise(estimates: np.ndarray, truth: np.ndarray, grid: EvaluationGrid) -> float:
    """Mean over samples of the Riemann-sum integrated squared error on ``grid``."""
    est = np.asarray(estimates, dtype=float).reshape((-1,) + grid.shape)
    tru = np.asarray(truth, dtype=float).reshape((-1,) + grid.shape)
    inside = grid.in_mask
    diff = (est - tru)[:, inside]
    return float(grid.cell_volume * np.mean(np.sum(diff * diff, axis=1)))


def ise(phi_hat: np.ndarray, phi: np.ndarray, grid: EvaluationGrid) -> float:
    """Integrated squared error after choosing the sign of ``phi_hat`` that minimizes it."""
    inside = grid.in_mask
    a = np.asarray(phi_hat, dtype=float).reshape(grid.shape)[inside]
    b = np.asarray(phi, dtype=float).reshape(grid.shape)[inside]
    return float(grid.cell_volume * min(np.sum((a - b) ** 2), np.sum((a + b) ** 2)))


@dataclass
class RateReport:
    ns: np.ndarray
    errors: np.ndarray
    slope: float
    decreasing: bool
    degenerate: bool
    reference_slope: float = -0.5

    def table(self) -> str:
        lines = ["n,median_error"] + [f"{n},{e:.6g}" for n, e in zip(self.ns, self.errors)]
        lines.append(f"slope,{self.slope:.4g}")
        lines.append(f"reference_slope,{self.reference_slope}")
        return "\n".join(lines) + "\n"


def empirical_rate_check(
    estimator: str,
    spec: SimSpec,
    ns: Sequence[int] = (50, 100, 200),
    repeats: int = 10,
    grid: Optional[EvaluationGrid] = None,
    bandwidth: Optional[Bandwidth] = None,
) -> RateReport:
    """Median integrated squared error of the mean or covariance estimator as ``n`` grows.

    Fits ``log(error)`` against ``log(n)``.  Only monotone decrease is
    asserted by callers; the slope is reported next to the ``-1/2`` of the
    parametric rate for reference.  When every error is negligible the
    slope is undefined and the report is flagged as degenerate; the same
    holds when the errors do not change with ``n`` (noise-free data).
    """
    from dfpca.core import linear_bin
    from dfpca.fft_smoother import fft_covariance, fft_local_linear

    if estimator not in ("mean", "covariance"):
        raise ValueError("estimator must be 'mean' or 'covariance'")
    ns = np.asarray(sorted(ns), dtype=int)
    if len(ns) < 3:
        raise ValueError("need at least three sample sizes")
    grid = grid or EvaluationGrid.regular(spec.domain[:, 0], spec.domain[:, 1], 51 if spec.d == 1 else 11)
    if bandwidth is None:
        extent = spec.domain[:, 1] - spec.domain[:, 0]
        bandwidth = Bandwidth(tuple(np.maximum(0.05 * extent, 2.0 * grid.spacing)))
    # common random numbers: every repeat draws max(ns) samples once and the
    # smaller sizes use its leading samples, so error differences reflect n
    per_n = {int(n): [] for n in ns}
    big = SimSpec(**{**spec.__dict__, "n": int(ns[-1])})
    for r in range(repeats):
        full, truth_full = generate(big, replicate=r)
        for n in ns:
            keep = full.sample_index < n
            ds = full.subset(keep)
            binned = linear_bin(ds, grid, per_sample=estimator == "covariance")
            mean = fft_local_linear(binned, grid, bandwidth, "mean")
            if estimator == "mean":
                e = mise(mean.values, truth_full.mean_on(grid), grid)
            else:
                cov = fft_covariance(binned, grid, bandwidth, mean)
                inside = grid.in_mask.ravel()
                true_cov = truth_full.covariance_on(grid).reshape(grid.size, grid.size)
                diff = (cov.as_matrix() - true_cov)[np.ix_(inside, inside)]
                e = float(grid.cell_volume**2 * np.sum(diff * diff))
            per_n[int(n)].append(e)
    errors = [float(np.median(per_n[int(n)])) for n in ns]
    errors = np.array(errors)
    scale = max(1.0, float(np.max(np.abs(spec.mean_fn(grid.nodes())))) ** 2)
    # no dependence on n at all (noise-free data) leaves the slope undefined
    flat = np.max(errors) - np.min(errors) <= 1e-6 * np.max(errors)
    degenerate = bool(np.max(errors) <= 1e-20 * scale or flat)
    slope = float("nan") if degenerate else float(np.polyfit(np.log(ns), np.log(errors), 1)[0])
    decreasing = bool(np.all(np.diff(errors) < 0))
    return RateReport(ns, errors, slope, decreasing, degenerate)


def summary_table(columns: dict) -> str:
    """Delimiter-separated ``mean`` and ``std`` rows for each named column of replicate results."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    names = list(columns)
    wr.writerow(["statistic"] + names)
    vals = [np.asarray(columns[k], dtype=float) for k in names]
    wr.writerow(["mean"] + [repr(float(np.mean(v))) for v in vals])
    wr.writerow(["std"] + [repr(float(np.std(v, ddof=1))) if len(v) > 1 else "nan" for v in vals])
    return buf.getvalue()
