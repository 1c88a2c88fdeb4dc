"""Noise variance, principal component scores, reconstruction and hold-out prediction error."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import linalg

from dfpca.core import EvaluationGrid, FunctionalDataset, SurfaceEstimate
from dfpca.eigen import EigenSystem
from dfpca.errors import SingularCovariance

SIGMA2_FLOOR = 1e-6


@dataclass
class FpcaModel:
    """Fitted mean, eigen system, noise variance and per-sample scores."""

    mean: SurfaceEstimate
    eig: EigenSystem
    sigma2: float
    scores: np.ndarray
    ids: tuple = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1, self.eig.L)
        if not self.sigma2 >= 0:
            raise ValueError("sigma2 must be nonnegative")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if self.ids and len(self.ids) != self.scores.shape[0]:
            raise ValueError("one id per score row is required")

    @property
    def grid(self) -> EvaluationGrid:
        return self.mean.grid

    @property
    def L(self) -> int:
        return self.eig.L

    def basis_at(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean ``(N,)`` and eigenfunctions ``(N, L)`` interpolated at ``coords``."""
        grid = self.grid
        stacked = np.concatenate([self.mean.filled()[..., None], np.moveaxis(self.eig.filled(), 0, -1)], axis=-1)
        vals = grid.interpolate(stacked, coords)
        return vals[:, 0], vals[:, 1:]

    def index_of(self, sample) -> int:
        if isinstance(sample, (int, np.integer)):
            return int(sample)
        return self.ids.index(str(sample))


def estimate_sigma2(
    diag_plus_noise: SurfaceEstimate,
    cov: SurfaceEstimate,
    mean: SurfaceEstimate,
    grid: Optional[EvaluationGrid] = None,
) -> float:
    """Constant noise variance from the squared-response, covariance and mean surfaces.

    The pointwise estimate ``b0 - Gamma(t,t) - mu(t)^2`` is averaged over
    in-mask nodes (Riemann sum divided by the in-mask volume) and clamped at 0.
    """
    grid = grid or mean.grid
    for s in (diag_plus_noise, cov, mean):
        if s.grid.shape != grid.shape:
            raise ValueError("all surfaces must share the grid")
    inside = grid.in_mask
    pointwise = diag_plus_noise.values - cov.diagonal() - mean.values**2
    vol = grid.cell_volume * inside.sum()
    avg = grid.cell_volume * pointwise[inside].sum() / vol
    return float(max(avg, 0.0))


def pace_noise_floor(lam: np.ndarray, sigma2: float) -> float:
    """Noise variance actually used by PACE: ``max(sigma2, 1e-6 * lambda_1)``."""
    return float(max(sigma2, SIGMA2_FLOOR * float(lam[0]))) if len(lam) else float(sigma2)


def pace_scores(
    coords: np.ndarray,
    values: np.ndarray,
    model: FpcaModel,
) -> np.ndarray:
    """Conditional-expectation scores ``Lambda Phi' Sigma_Y^{-1} (Y - mu)`` of one sample.

    ``Sigma_Y = Phi Lambda Phi' + s2 I`` with ``s2 = max(sigma2, 1e-6 lambda_1)``.
    When ``N_i > L`` the equivalent ``(Phi'Phi + s2 Lambda^{-1})^{-1} Phi'``
    form is solved instead, which needs only an ``L x L`` factorization.
    """
    coords = np.asarray(coords, dtype=float)
    values = np.asarray(values, dtype=float).ravel()
    if coords.ndim == 1:
        coords = coords.reshape(len(values), -1)
    lam = model.eig.eigenvalues
    L = len(lam)
    if L == 0:
        return np.zeros(0)
    mu, phi = model.basis_at(coords)
    yc = values - mu
    s2 = pace_noise_floor(lam, model.sigma2)
    n = len(values)
    try:
        if n > L:
            A = phi.T @ phi + np.diag(s2 / lam)
            c = linalg.cho_factor(A)
            out = linalg.cho_solve(c, phi.T @ yc)
        else:
            Sy = (phi * lam) @ phi.T + s2 * np.eye(n)
            c = linalg.cho_factor(Sy)
            out = lam * (phi.T @ linalg.cho_solve(c, yc))
    except linalg.LinAlgError as exc:
        raise SingularCovariance(f"observation covariance is numerically singular: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise SingularCovariance("observation covariance is numerically singular")
    return out


def gridded_values(coords: np.ndarray, values: np.ndarray, grid: EvaluationGrid) -> np.ndarray:
    """Bin-averaged sample values on ``grid``; NaN at nodes that receive no mass."""
    from dfpca.core import linear_bin

    ds = FunctionalDataset.from_samples(
        [(coords, values)], bounding_box=np.stack([grid.lo, grid.hi], axis=1)
    )
    b = linear_bin(ds, grid, per_sample=False)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(b.weight_grid > 0, b.value_grid / np.where(b.weight_grid > 0, b.weight_grid, 1.0), np.nan)


def integration_scores(coords: np.ndarray, values: np.ndarray, model: FpcaModel) -> np.ndarray:
    """Riemann-sum scores ``cell_volume * sum (Y~ - mu) phi`` from the gridded sample.

    Nodes the sample does not reach contribute nothing.
    """
    grid = model.grid
    coords = np.asarray(coords, dtype=float)
    values = np.asarray(values, dtype=float).ravel()
    if coords.ndim == 1:
        coords = coords.reshape(len(values), -1)
    if len(values) < grid.n_inside / 4:
        warnings.warn(
            f"sample has {len(values)} observations for {grid.n_inside} nodes; integration scores may be poor",
            stacklevel=2,
        )
    y = gridded_values(coords, values, grid)
    centred = y - model.mean.values
    ok = grid.in_mask & np.isfinite(centred)
    phi = model.eig.filled()
    return grid.cell_volume * np.tensordot(np.where(ok, phi, 0.0), np.where(ok, centred, 0.0), axes=grid.d)


def score_all(dataset: FunctionalDataset, model: FpcaModel, method: str = "pace") -> np.ndarray:
    fn = pace_scores if method == "pace" else integration_scores
    if method not in ("pace", "integration"):
        raise ValueError(f"unknown score method {method!r}")
    with warnings.catch_warnings():
        if method == "integration":
            warnings.simplefilter("ignore")
        return np.array([fn(c, v, model) for c, v in dataset]).reshape(dataset.n, model.L)


def reconstruct(
    model: FpcaModel,
    sample_index: Union[int, str, None] = None,
    at: Union[EvaluationGrid, np.ndarray, None] = None,
    scores: Optional[np.ndarray] = None,
) -> np.ndarray:
    """``mu + sum_l A_l phi_l`` on a grid or at coordinates.

    Uses the stored scores of ``sample_index`` unless ``scores`` is given.
    On the model grid the values are exact; elsewhere multilinear
    interpolation is used and points outside the grid raise
    :class:`~dfpca.errors.OutOfDomain`.
    """
    if scores is None:
        if sample_index is None:
            raise ValueError("give a sample index or explicit scores")
        scores = model.scores[model.index_of(sample_index)]
    scores = np.asarray(scores, dtype=float)
    grid = model.grid
    if at is None or (isinstance(at, EvaluationGrid) and at.same_as(grid)):
        return model.mean.values + np.tensordot(scores, model.eig.eigenfunctions, axes=1)
    if isinstance(at, EvaluationGrid):
        mu, phi = model.basis_at(at.nodes())
        return (mu + phi @ scores).reshape(at.shape)
    mu, phi = model.basis_at(np.asarray(at, dtype=float))
    return mu + phi @ scores


@dataclass
class HoldoutResult:
    locations: np.ndarray
    errors: np.ndarray
    counts: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def standard_error(self) -> float:
        if len(self.errors) < 2:
            return float("nan")
        return float(np.std(self.errors, ddof=1) / np.sqrt(len(self.errors)))

    def table(self) -> str:
        return f"average,standard_error\n{self.mean:.4f},{self.standard_error:.4f}\n"


def holdout_prediction_error(
    dataset: FunctionalDataset,
    held_out_locations: Optional[np.ndarray] = None,
    config=None,
    refit: bool = True,
    model: Optional[FpcaModel] = None,
    atol: float = 1e-9,
) -> HoldoutResult:
    """Leave-one-location-out squared prediction error.

    For each location, every observation made there is removed, the model is
    refitted (or, with ``refit=False``, the given model re-scores the
    remaining observations) and the held-out values are predicted by
    reconstruction.  Returns per-location sums of squared errors.
    """
    from dfpca.pipeline import FitConfig, fit

    config = config or FitConfig()
    if held_out_locations is None:
        held_out_locations = np.unique(dataset.coords, axis=0)
    locs = np.atleast_2d(np.asarray(held_out_locations, dtype=float))
    if len(locs) < 2:
        raise ValueError("need at least two locations")
    if not refit and model is None:
        raise ValueError("re-scoring needs a fitted model")
    errors, counts = [], []
    sidx = dataset.sample_index
    for loc in locs:
        at_loc = np.all(np.abs(dataset.coords - loc) <= atol, axis=1)
        if not at_loc.any():
            raise ValueError(f"no observations at location {loc}")
        train = dataset.subset(~at_loc)
        fitted = fit(train, config).model if refit else model
        total = 0.0
        for row in np.flatnonzero(at_loc):
            sid = dataset.ids[sidx[row]]
            if sid in train.ids:
                c, v = train.sample(train.ids.index(sid))
                a = pace_scores(c, v, fitted)
            else:
                a = np.zeros(fitted.L)
            pred = reconstruct(fitted, at=dataset.coords[row][None], scores=a)[0]
            total += (dataset.values[row] - pred) ** 2
        errors.append(total)
        counts.append(int(at_loc.sum()))
    return HoldoutResult(locs, np.array(errors), np.array(counts))
