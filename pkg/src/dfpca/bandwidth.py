"""Leave-one-out cross-validation for bandwidths and a trust-region optimizer for noisy objectives.

The optimizer works in log-bandwidth space.  Each iteration samples
scrambled Sobol points in the current region, fits a full quadratic to the
evaluated points by least squares (rather than interpolating them), and
steps to the model minimizer inside the region.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from dfpca.core import Bandwidth, EvaluationGrid, FunctionalDataset, linear_bin
from dfpca.errors import BandwidthTooSmall, DfpcaError
from dfpca.smoother import local_linear_at, pair_observations

Target = Literal["mean", "covariance", "diag_plus_noise"]
Scheme = Literal["loo", "binned"]

ACCEPT = 0.1
EXPAND = 0.75
RADIUS_MIN = 1e-3
RTOL_STOP = 1e-4
_DIRECT_LIMIT = 5_000
LEVERAGE_TOL = 1e-8
MIN_BINS_PER_WINDOW = 5


def _loo_direct(X: np.ndarray, y: np.ndarray, w: np.ndarray, h: Bandwidth) -> float:
    """Weighted mean of squared leave-one-out residuals via the self-influence shortcut.

    Leaving observation ``j`` out deletes its term from the weighted least
    squares; the other weights are unchanged.  For a local linear fit at
    ``t_j`` the design row of ``j`` is ``e_0``, so its self-influence is
    ``w_j K_h(0) [N^{-1}]_{00}``.
    """
    b0, status, inv00, _ = local_linear_at(X, X, y, w, h, want_inverse00=True, enlarge=False)
    k0 = float(np.prod(0.75 / h.values))
    return _average_loo(y, b0, w * k0 * inv00, w, status)


def _average_loo(y, fit, lev, w, status) -> float:
    """Weighted mean of ``((y - fit) / (1 - H))^2`` over points whose leave-one-out fit exists.

    A self-influence of one means the fit interpolates the point (for
    example a boundary window holding only two bins), so its leave-one-out
    prediction is undefined and the point is skipped.
    """
    if np.any(status == 2):
        raise BandwidthTooSmall(int(np.sum(status == 2)))
    ok = (1.0 - lev > LEVERAGE_TOL) & np.isfinite(fit)
    if not np.any(ok):
        return float("inf")
    r = (y[ok] - fit[ok]) / (1.0 - lev[ok])
    return float(np.sum(w[ok] * r * r) / np.sum(w[ok]))


@dataclass
class CvObjective:
    """Leave-one-observation-out CV score for one estimator's bandwidth.

    ``scheme="loo"`` treats every observation (or, for the covariance,
    every within-sample pair) individually.  ``scheme="binned"`` works on
    the binned pseudo-data and leaves one bin out at a time, which is the
    exact analogue for the FFT estimator.  ``"auto"`` picks ``"loo"`` for
    up to 5 000 (pseudo-)observations.
    """

    target: Target
    dataset: FunctionalDataset
    grid: Optional[EvaluationGrid] = None
    scheme: str = "auto"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.target not in ("mean", "covariance", "diag_plus_noise"):
            raise ValueError(f"unknown CV target {self.target!r}")
        if self.scheme == "auto":
            size = self.dataset.values.size
            if self.target == "covariance":
                c = self.dataset.counts.astype(float)
                size = float(np.sum(c * (c - 1)))
            self.scheme = "loo" if size <= _DIRECT_LIMIT or self.grid is None else "binned"
        if self.scheme not in ("loo", "binned"):
            raise ValueError(f"unknown CV scheme {self.scheme!r}")
        if self.scheme == "binned" and self.grid is None:
            raise ValueError("binned CV needs a grid")

    @property
    def d(self) -> int:
        return self.dataset.d

    def extent(self) -> np.ndarray:
        box = self.dataset.bounding_box
        return box[:, 1] - box[:, 0]

    def _binned(self):
        if "binned" not in self._cache:
            self._cache["binned"] = linear_bin(self.dataset, self.grid, per_sample=self.target == "covariance")
        return self._cache["binned"]

    def __call__(self, h: Bandwidth) -> float:
        return cv_score(h, self)


def cv_score(h: Bandwidth, obj: CvObjective) -> float:
    """Mean squared leave-one-out residual; ``inf`` when a residual is undefined."""
    h = h if isinstance(h, Bandwidth) else Bandwidth(h)
    h.validate(obj.extent())
    ds = obj.dataset
    if obj.scheme == "loo":
        if obj.target == "covariance":
            if "pairs" not in obj._cache:
                obj._cache["pairs"] = pair_observations(ds)
            Z, prod, w = obj._cache["pairs"]
            return _loo_direct(Z, prod, w, h.doubled())
        y = ds.values if obj.target == "mean" else ds.values**2
        return _loo_direct(ds.coords, y, ds.observation_weights(), h)
    return _loo_binned(h, obj)


def _loo_binned(h: Bandwidth, obj: CvObjective) -> float:
    from dfpca.fft_smoother import FftCovariance, fft_fit

    binned = obj._binned()
    if obj.target == "covariance":
        from dfpca.core import SurfaceEstimate

        zero_mean = SurfaceEstimate(binned.grid, np.zeros(binned.grid.shape), "mean")
        eng = FftCovariance(binned, h, zero_mean)
        k0 = eng.kernel_at_zero()
        ys, fits, levs, ws, sts = [], [], [], [], []
        for a, b in eng.tile_pairs():
            raw, status, inv00 = eng.raw_tile(a, b, want_inverse00=True)
            mass, value = eng.pair_bins(a, b)
            if a == b:
                mass = np.triu(mass)
            use = mass > 0
            ys.append(value[use] / mass[use])
            fits.append(raw[use])
            levs.append(mass[use] * k0 * inv00[use])
            sts.append(status[use])
            # tile (b, a) holds the mirrored pairs and is never formed
            if a == b:
                ws.append(np.where(np.eye(mass.shape[0], dtype=bool)[use], 1.0, 2.0) * mass[use])
            else:
                ws.append(2.0 * mass[use])
        cat = np.concatenate
        return _average_loo(cat(ys), cat(fits), cat(levs), cat(ws), cat(sts))
    target = "mean" if obj.target == "mean" else "squares"
    b0, status, inv00, _ = fft_fit(binned, h, target, want_inverse00=True)
    W = binned.weight_grid
    use = W > 0
    resp = binned.value_grid if target == "mean" else binned.square_grid
    ybar = resp[use] / W[use]
    k0 = float(np.prod(0.75 / h.values))
    return _average_loo(ybar, b0[use], W[use] * k0 * inv00[use], W[use], status[use])


def rule_of_thumb_bandwidth(
    dataset: FunctionalDataset, per_window: int = 30, h_min: Optional[np.ndarray] = None
) -> Bandwidth:
    """``range * (per_window / N)^(1/d)`` per axis, clamped to ``[h_min, range / 2]``."""
    box = dataset.bounding_box
    extent = box[:, 1] - box[:, 0]
    N = dataset.values.size
    h = extent * min(1.0, per_window / N) ** (1.0 / dataset.d)
    lo = np.zeros_like(h) if h_min is None else np.asarray(h_min, dtype=float)
    return Bandwidth(tuple(np.clip(h, lo, extent / 2)))


@dataclass
class TraceRecord:
    iteration: int
    point: np.ndarray
    value: float
    radius: float
    accepted: bool


@dataclass
class OptimizeResult:
    best: np.ndarray
    value: float
    n_evals: int
    trace: list
    stop_reason: str

    def best_so_far(self) -> np.ndarray:
        vals = np.array([r.value for r in self.trace], dtype=float)
        vals = np.where(np.isfinite(vals), vals, np.inf)
        return np.minimum.accumulate(vals)


@dataclass
class TrustRegionState:
    center: np.ndarray
    center_value: float
    radius: float
    radius_min: float
    radius_max: float
    points: list = field(default_factory=list)
    values: list = field(default_factory=list)
    model: Optional[np.ndarray] = None

    def __post_init__(self):
        self.radius = float(np.clip(self.radius, self.radius_min, self.radius_max))


def quadratic_features(u: np.ndarray) -> np.ndarray:
    """``[1, u_k, u_k u_m (k <= m)]`` for rows of ``u``."""
    u = np.atleast_2d(u)
    n, d = u.shape
    iu, ju = np.triu_indices(d)
    return np.concatenate([np.ones((n, 1)), u, u[:, iu] * u[:, ju]], axis=1)


def _unpack(coef: np.ndarray, d: int):
    g = coef[1 : d + 1]
    H = np.zeros((d, d))
    iu, ju = np.triu_indices(d)
    for c, i, j in zip(coef[d + 1 :], iu, ju):
        if i == j:
            H[i, i] = 2.0 * c
        else:
            H[i, j] = H[j, i] = c
    return coef[0], g, H


def solve_trust_region(g: np.ndarray, H: np.ndarray, radius: float = 1.0) -> np.ndarray:
    """Minimize ``g'u + u'Hu/2`` over ``||u|| <= radius`` (exact, via the secular equation)."""
    d = len(g)
    lam, Q = np.linalg.eigh(H)
    gq = Q.T @ g
    if lam[0] > 0:
        u = -Q @ (gq / lam)
        if np.linalg.norm(u) <= radius:
            return u

    def step(mu):
        return -Q @ (gq / (lam + mu))

    lo = max(0.0, -lam[0])

    def phi(mu):
        return np.linalg.norm(step(mu)) - radius

    hard = abs(gq[0]) < 1e-12 * max(1.0, np.abs(gq).max())
    if not hard:
        a = lo + 1e-14 * max(1.0, abs(lo))
        if phi(a) > 0:
            b = a + 1.0
            while phi(b) > 0:
                b = 2 * b + 1.0
            mu = optimize.brentq(phi, a, b, xtol=1e-14, rtol=1e-12)
            return step(mu)
    # hard case: move along the lowest eigenvector to the boundary
    with np.errstate(divide="ignore", invalid="ignore"):
        shifted = lam + lo
        coef = np.where(shifted > 1e-14, gq / np.where(shifted > 1e-14, shifted, 1.0), 0.0)
    u = -Q @ coef
    tau = np.sqrt(max(radius**2 - u @ u, 0.0))
    return u + tau * Q[:, 0]


def trust_region_minimize(
    f: Callable[[np.ndarray], float],
    x0: np.ndarray,
    budget: int,
    lower: Optional[np.ndarray] = None,
    upper: Optional[np.ndarray] = None,
    radius0: float = 0.5,
    radius_min: float = RADIUS_MIN,
    radius_max: float = 4.0,
    seed: int = 0,
) -> OptimizeResult:
    """Derivative-free trust-region search with regression quadratic models.

    Returns the best point ever evaluated.  Evaluations returning a
    non-finite value or raising :class:`DfpcaError` count against the
    budget and are left out of the model fits.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = len(x0)
    n_quad = (d + 1) * (d + 2) // 2
    if budget < n_quad + 1:
        raise ValueError(f"budget {budget} is below the {n_quad + 1} evaluations a quadratic model needs")
    lower = np.full(d, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(d, np.inf) if upper is None else np.asarray(upper, dtype=float)
    x0 = np.clip(x0, lower, upper)
    sobol = qmc.Sobol(d, scramble=True, seed=np.random.default_rng(seed))
    trace: list = []
    pts: list = []
    vals: list = []

    def evaluate(x, it, radius, accepted=False):
        try:
            v = float(f(x))
        except (DfpcaError, FloatingPointError, np.linalg.LinAlgError):
            v = float("inf")
        if not np.isfinite(v):
            v = float("inf")
        pts.append(np.array(x))
        vals.append(v)
        trace.append(TraceRecord(it, np.array(x), v, radius, accepted))
        return v

    state = TrustRegionState(x0, 0.0, radius0, radius_min, radius_max)
    state.center_value = evaluate(x0, 0, state.radius, True)
    reason = "budget"
    it = 0
    while len(vals) < budget:
        it += 1
        P = np.array(pts)
        V = np.array(vals)
        inside = np.all(np.abs(P - state.center) <= state.radius * (1 + 1e-12), axis=1) & np.isfinite(V)
        need = max(n_quad + 1 - int(inside.sum()), 1)
        need = min(need, budget - len(vals) - 1)
        if need > 0:
            raw = sobol.random(int(2 ** np.ceil(np.log2(max(need, 1)))))[:need]
            for z in raw:
                x = np.clip(state.center + state.radius * (2 * z - 1), lower, upper)
                evaluate(x, it, state.radius)
        if len(vals) >= budget:
            break
        P = np.array(pts)
        V = np.array(vals)
        inside = np.all(np.abs(P - state.center) <= state.radius * (1 + 1e-12), axis=1) & np.isfinite(V)
        if inside.sum() < n_quad:
            state.radius *= 0.5
            if state.radius < radius_min:
                reason = "radius"
                break
            continue
        U = (P[inside] - state.center) / state.radius
        F = quadratic_features(U)
        coef, *_ = np.linalg.lstsq(F, V[inside], rcond=None)
        state.model = coef
        c0, g, H = _unpack(coef, d)
        u = solve_trust_region(g, H, 1.0)
        x_trial = np.clip(state.center + state.radius * u, lower, upper)
        u_eff = (x_trial - state.center) / state.radius
        predicted = -(g @ u_eff + 0.5 * u_eff @ H @ u_eff)
        f_trial = evaluate(x_trial, it, state.radius)
        actual = state.center_value - f_trial
        rho = actual / predicted if predicted > 0 else (-np.inf if actual <= 0 else np.inf)
        accepted = bool(np.isfinite(f_trial) and rho > ACCEPT)
        trace[-1].accepted = accepted
        if accepted:
            old = state.center_value
            state.center, state.center_value = x_trial, f_trial
            if rho > EXPAND:
                state.radius = min(2 * state.radius, radius_max)
            if np.isfinite(old) and abs(old - f_trial) <= RTOL_STOP * max(abs(old), 1e-300):
                reason = "stalled"
                break
        else:
            state.radius *= 0.5
            if state.radius < radius_min:
                reason = "radius"
                break
    V = np.array(vals)
    k = int(np.argmin(np.where(np.isfinite(V), V, np.inf)))
    return OptimizeResult(pts[k], float(V[k]), len(vals), trace, reason)


@dataclass
class BandwidthResult:
    bandwidth: Bandwidth
    value: float
    optimizer: OptimizeResult

    def trace_csv(self) -> str:
        """Optimizer trace as delimiter-separated text with bandwidths in data units."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        d = len(self.bandwidth.per_axis)
        wr.writerow(["iteration"] + [f"h_{k + 1}" for k in range(d)] + ["objective", "radius", "accepted"])
        for r in self.optimizer.trace:
            wr.writerow(
                [r.iteration]
                + [repr(float(x)) for x in np.exp(r.point)]
                + [repr(r.value), repr(r.radius), int(r.accepted)]
            )
        return buf.getvalue()


def optimize_bandwidth(
    obj: CvObjective,
    h0: Optional[Bandwidth] = None,
    budget: int = 30,
    seed: int = 0,
    h_min: Optional[np.ndarray] = None,
    radius0: float = 0.5,
) -> BandwidthResult:
    """Minimize the CV score over log-bandwidths; returns the best evaluated bandwidth.

    ``h_min`` defaults to ``MIN_BINS_PER_WINDOW / 2`` grid spacings when the
    objective has a grid, so every kernel window covers at least that many
    bins.  Observation-level CV keeps decreasing towards one bin on shared
    dense designs (neighbouring bins carry the same smooth per-curve
    deviations), so this floor is what keeps the covariance from being
    undersmoothed there.
    """
    extent = obj.extent()
    if h_min is None:
        h_min = 0.5 * MIN_BINS_PER_WINDOW * obj.grid.spacing if obj.grid is not None else extent * 1e-3
    h_min = np.minimum(np.asarray(h_min, dtype=float), extent)
    if h0 is None:
        h0 = rule_of_thumb_bandwidth(obj.dataset, h_min=h_min)
    lower, upper = np.log(h_min), np.log(extent)

    def f(x):
        return cv_score(Bandwidth(tuple(np.exp(x))), obj)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = trust_region_minimize(
            f, np.log(h0.values), budget, lower, upper, radius0=radius0, seed=seed
        )
    h = Bandwidth(tuple(np.minimum(np.exp(res.best), extent)))
    return BandwidthResult(h, res.value, res)
