"""End-to-end fit: smoothing, eigendecomposition, component selection and scoring."""

from __future__ import annotations

import time
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from dfpca.bandwidth import CvObjective, optimize_bandwidth
from dfpca.core import (
    Bandwidth,
    EvaluationGrid,
    FunctionalDataset,
    SurfaceEstimate,
    linear_bin,
    normalize_domain,
    warn_if_extrapolating,
)
from dfpca.eigen import DEFAULT_L_MAX, DENSE_BUDGET_BYTES, dense_eig, matrixize, randomized_eig, select_components_fve
from dfpca.fft_smoother import BlockPlan, FftCovariance, blockwise_apply, fft_local_linear, stencil_radius
from dfpca.errors import DfpcaError
from dfpca.scores import FpcaModel, score_all

BandwidthSpec = Union[str, Sequence[float], float]


@dataclass
class FitConfig:
    """Settings of one fit.

    Bandwidths are per-axis values in data units, ``"auto"`` for
    cross-validated selection, or (covariance and diagonal only)
    ``"match"`` to reuse the mean bandwidth.  The covariance is the smoothed
    raw product minus ``mu(s) mu(t)``, so smoothing the two at different
    scales leaves a rank-two error proportional to ``|mu|``; matching is
    the default for that reason.  ``bandwidth_multiplier`` scales every
    resolved bandwidth.
    """

    grid_points: Union[int, Sequence[int], None] = None
    grid_kind: str = "regular"
    h_mean: BandwidthSpec = "auto"
    h_cov: BandwidthSpec = "match"
    h_diag: BandwidthSpec = "match"
    bandwidth_multiplier: float = 1.0
    cv_budget: int = 20
    fve: float = 0.95
    L_max: int = DEFAULT_L_MAX
    eig_method: str = "dense"
    q: Optional[int] = None
    seed: int = 0
    blocks_per_axis: Optional[int] = None
    score_method: str = "auto"
    workers: int = 1
    memory_budget: int = DENSE_BUDGET_BYTES

    def __post_init__(self):
        if not 0 < self.fve <= 1:
            raise ValueError("FVE threshold must lie in (0, 1]")
        if self.eig_method not in ("dense", "randomized"):
            raise ValueError(f"unknown eigensolver {self.eig_method!r}")
        if self.score_method not in ("auto", "pace", "integration"):
            raise ValueError(f"unknown score method {self.score_method!r}")
        if self.grid_kind not in ("regular", "midpoints"):
            raise ValueError(f"unknown grid kind {self.grid_kind!r}")
        if self.bandwidth_multiplier <= 0:
            raise ValueError("bandwidth multiplier must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        for k in ("h_mean", "h_cov", "h_diag", "grid_points"):
            if isinstance(out[k], (tuple, list, np.ndarray)):
                out[k] = [float(x) if k != "grid_points" else int(x) for x in out[k]]
        return out


@dataclass
class FitResult:
    model: FpcaModel
    bandwidths: dict
    timings: dict
    config: FitConfig
    report: dict = field(default_factory=dict)
    covariance: Optional[object] = None


@contextmanager
def _stage(name: str):
    """Tag errors raised inside the block with the pipeline stage."""
    try:
        yield
    except DfpcaError as exc:
        if not getattr(exc, "stage", None):
            exc.stage = name
        raise


def default_grid_points(d: int, memory_budget: int = DENSE_BUDGET_BYTES) -> int:
    """400 nodes per axis in 1-d, 64 in 2-d, 32 in 3-d, shrunk until the dense covariance fits the budget."""
    num = {1: 400, 2: 64, 3: 32}.get(d, 16)
    cap = int((memory_budget / 8) ** (1.0 / (2 * d)))
    return max(2, min(num, cap))


def build_grid(dataset: FunctionalDataset, config: FitConfig) -> EvaluationGrid:
    num = config.grid_points or default_grid_points(dataset.d, config.memory_budget)
    box = dataset.bounding_box
    make = EvaluationGrid.regular if config.grid_kind == "regular" else EvaluationGrid.midpoints
    return make(box[:, 0], box[:, 1], num)


def _auto_bandwidth(target: str, dataset: FunctionalDataset, grid: EvaluationGrid, config: FitConfig) -> Bandwidth:
    ds01, amap = normalize_domain(dataset)
    grid01 = EvaluationGrid(tuple((ax - lo) / s for ax, lo, s in zip(grid.axes, amap.lo, amap.scale)), grid.mask)
    obj = CvObjective(target, ds01, grid01)
    res = optimize_bandwidth(obj, budget=config.cv_budget, seed=config.seed)
    return Bandwidth(tuple(res.bandwidth.values * amap.scale))


def resolve_bandwidth(spec: BandwidthSpec, target: str, dataset, grid, config) -> Bandwidth:
    if isinstance(spec, str):
        if spec != "auto":
            raise ValueError(f"bandwidth must be numeric, 'auto' or 'match', got {spec!r}")
        h = _auto_bandwidth(target, dataset, grid, config)
    else:
        h = Bandwidth(tuple(np.broadcast_to(np.asarray(spec, dtype=float), (dataset.d,))))
    return h.scaled(config.bandwidth_multiplier)


def covariance_diagonal(engine: FftCovariance) -> np.ndarray:
    """``Gamma(t, t)`` at every grid node (NaN outside the mask)."""
    diag = np.empty(engine.m)
    for a in range(engine.n_tiles):
        rs = engine._tile_slice(a)
        diag[rs] = np.diagonal(engine.tile_values(a, a))
    out = np.full(engine.grid.size, np.nan)
    out[engine.nodes] = diag
    return out.reshape(engine.grid.shape)


def sigma2_from_surfaces(diag_plus_noise: SurfaceEstimate, gamma_diag: np.ndarray, mean: SurfaceEstimate) -> float:
    grid = mean.grid
    inside = grid.in_mask
    pointwise = diag_plus_noise.values - gamma_diag - mean.values**2
    return float(max(np.mean(pointwise[inside]), 0.0))


def choose_score_method(dataset: FunctionalDataset, grid: EvaluationGrid, method: str) -> str:
    """``auto`` integrates when the median sample covers a quarter of the in-mask nodes, else PACE."""
    if method != "auto":
        return method
    return "integration" if np.median(dataset.counts) >= 0.25 * grid.n_inside else "pace"


def fit(
    dataset: FunctionalDataset,
    config: Optional[FitConfig] = None,
    grid: Optional[EvaluationGrid] = None,
    keep_covariance: bool = False,
) -> FitResult:
    """Estimate mean, covariance, noise variance, eigenpairs and scores."""
    config = config or FitConfig()
    grid = grid or build_grid(dataset, config)
    warn_if_extrapolating(dataset, grid)
    timings = {}

    t0 = time.perf_counter()
    with _stage("bandwidth"):
        h = {"mean": resolve_bandwidth(config.h_mean, "mean", dataset, grid, config)}
        for key, spec in (("covariance", config.h_cov), ("diag_plus_noise", config.h_diag)):
            h[key] = h["mean"] if spec == "match" else resolve_bandwidth(spec, key, dataset, grid, config)
    timings["bandwidth"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("smoothing"):
        binned = linear_bin(dataset, grid, per_sample=True)
        if config.blocks_per_axis and config.blocks_per_axis > 1:
            halo = np.max([stencil_radius(x, grid) for x in h.values()], axis=0)
            plan = BlockPlan.split(grid.shape, config.blocks_per_axis, halo)
            mean = blockwise_apply(plan, "mean", binned, h["mean"], workers=config.workers)
            dpn = blockwise_apply(plan, "squares", binned, h["diag_plus_noise"], workers=config.workers)
        else:
            mean = fft_local_linear(binned, grid, h["mean"], "mean")
            dpn = fft_local_linear(binned, grid, h["diag_plus_noise"], "squares")
        engine = FftCovariance(binned, h["covariance"], mean)
        gamma_diag = covariance_diagonal(engine)
        sigma2 = sigma2_from_surfaces(dpn, gamma_diag, mean)
    timings["smoothing"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("eigen"):
        budget = config.memory_budget if config.eig_method == "dense" else 0
        S = matrixize(engine, memory_budget=budget, workers=config.workers)
        if config.eig_method == "dense":
            eig = dense_eig(S, config.L_max, grid)
        else:
            eig = randomized_eig(S, config.q, min(config.L_max, S.dim), grid, seed=config.seed)
        L = select_components_fve(eig, config.fve)
        eig = eig.truncate(L)
    timings["eigen"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("scoring"):
        method = choose_score_method(dataset, grid, config.score_method)
        model = FpcaModel(mean, eig, sigma2, np.zeros((dataset.n, L)), tuple(dataset.ids), {})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model.scores = score_all(dataset, model, method)
    timings["scoring"] = time.perf_counter() - t0

    bw = {k: [float(x) for x in v.values] for k, v in h.items()}
    model.metadata = {"bandwidths": bw, "score_method": method, "eig": dict(eig.info)}
    report = {
        "eigenvalues": eig.eigenvalues.tolist(),
        "fve": eig.fve.tolist(),
        "sigma2": sigma2,
        "L": L,
        "bandwidths": bw,
        "score_method": method,
        "timings": dict(timings),
    }
    return FitResult(model, bw, timings, config, report, S if keep_covariance else None)
