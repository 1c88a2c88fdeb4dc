"""Direct local linear estimators of the mean, covariance and diagonal-plus-noise surfaces.

These evaluate the kernel-weighted least-squares problems node by node and
serve as the reference for the binned FFT path.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from dfpca.core import (
    OUTSIDE,
    Bandwidth,
    EvaluationGrid,
    FunctionalDataset,
    SurfaceEstimate,
    scaled_kernel,
    warn_if_extrapolating,
)
from dfpca.errors import BandwidthTooSmall, NoPairs

RIDGE = 1e-10
PIVOT_TOL = 1e-6
ENLARGE_FACTOR = 1.5
MAX_ENLARGE = 3
_CHUNK_ENTRIES = 200_000


@dataclass(frozen=True)
class LocalLinearSystem:
    """Kernel-weighted normal equations ``normal_matrix @ b = rhs`` at one target."""

    normal_matrix: np.ndarray
    rhs: np.ndarray

    def __post_init__(self):
        nm = np.asarray(self.normal_matrix, dtype=float)
        if nm.ndim != 2 or nm.shape[0] != nm.shape[1] or nm.shape[0] != len(self.rhs):
            raise ValueError("normal matrix must be square and match rhs")

    def solve(self) -> np.ndarray:
        b, _, _ = solve_local_systems(self.normal_matrix[None], self.rhs[None])
        return b[0]


def solve_local_systems(
    normal: np.ndarray,
    rhs: np.ndarray,
    ridge: float = RIDGE,
    want_inverse00: bool = False,
):
    """Solve a stack of small symmetric systems for their intercepts.

    Parameters
    ----------
    normal : ndarray, shape (K, p, p)
    rhs : ndarray, shape (K, p)
    ridge : float
        Added to the diagonal of the Jacobi-equilibrated matrix, scaled by
        its trace.
    want_inverse00 : bool
        Also return ``[N^{-1}]_{00}``, the self-influence factor used by CV.

    Returns
    -------
    b0 : ndarray, shape (K,)
        Intercepts; NaN where the window is empty.
    status : ndarray of int8, shape (K,)
        0 solved, 1 local-constant fallback, 2 empty window.
    inv00 : ndarray or None
    """
    normal = np.asarray(normal, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    K, p = rhs.shape
    s0 = normal[:, 0, 0]
    t0 = rhs[:, 0]
    empty = ~(s0 > 0)

    diag = np.einsum("kii->ki", normal)
    scale = np.where(diag > 0, 1.0 / np.sqrt(np.where(diag > 0, diag, 1.0)), 1.0)
    # work in (p, p, K) layout so every step is a contiguous vector op
    E = np.transpose(normal * scale[:, :, None] * scale[:, None, :], (1, 2, 0)).copy()
    A = E.copy()
    trace = np.einsum("iik->k", A)
    for i in range(p):
        A[i, i] += ridge * trace
    n_rhs = 2 if want_inverse00 else 1
    B = np.zeros((p, n_rhs, K))
    B[:, 0, :] = (rhs * scale).T
    if want_inverse00:
        B[0, 1, :] = scale[:, 0]

    min_pivot = np.full(K, np.inf)
    # LU without pivoting is stable for SPD matrices; multipliers kept below the diagonal
    for k in range(p):
        piv = A[k, k]
        min_pivot = np.minimum(min_pivot, piv)
        safe = np.where(np.abs(piv) > 0, piv, 1.0)
        for i in range(k + 1, p):
            f = A[i, k] / safe
            A[i, k + 1 :] -= f * A[k, k + 1 :]
            A[i, k] = f

    def lu_solve(rhs_):
        y = rhs_.copy()
        for i in range(1, p):
            for k in range(i):
                y[i] -= A[i, k] * y[k]
        x = np.zeros_like(y)
        for k in range(p - 1, -1, -1):
            acc = y[k]
            for j in range(k + 1, p):
                acc = acc - A[k, j] * x[j]
            x[k] = acc / np.where(np.abs(A[k, k]) > 0, A[k, k], 1.0)
        return x

    X = lu_solve(B)
    # one refinement step against the unridged matrix removes the ridge bias
    resid = B - np.einsum("ijk,jrk->irk", E, X)
    X = X + lu_solve(resid)

    singular = ~(min_pivot >= PIVOT_TOL) | ~np.isfinite(X[0, 0])
    with np.errstate(invalid="ignore", divide="ignore"):
        b0 = X[0, 0] * scale[:, 0]
        nw = t0 / np.where(empty, 1.0, s0)
    b0 = np.where(singular, nw, b0)
    status = np.where(singular, 1, 0).astype(np.int8)
    status[empty] = 2
    b0[empty] = np.nan
    inv00 = None
    if want_inverse00:
        with np.errstate(invalid="ignore", divide="ignore"):
            inv00 = np.where(singular, 1.0 / np.where(empty, 1.0, s0), X[0, 1] * scale[:, 0])
        inv00[empty] = np.nan
    return b0, status, inv00


def local_moments(targets: np.ndarray, X: np.ndarray, y: np.ndarray, w: np.ndarray, h: np.ndarray):
    """Normal matrices and right-hand sides of the local linear fit at ``targets``.

    The design row of observation ``j`` at target ``t`` is ``(1, t - x_j)``.
    Only observations inside each window are visited (KD-tree search in
    bandwidth-scaled coordinates).
    """
    targets = np.atleast_2d(targets)
    K, q = targets.shape
    p = q + 1
    h = np.asarray(h, dtype=float)
    normal = np.zeros((K, p, p))
    rhs = np.zeros((K, p))
    if K == 0 or len(X) == 0:
        return normal, rhs
    tree = cKDTree(X / h)
    iu, ju = np.triu_indices(p)
    chunk = max(1, _CHUNK_ENTRIES // max(1, min(len(X), 64)))
    for start in range(0, K, chunk):
        t = targets[start : start + chunk]
        hits = tree.query_ball_point(t / h, r=1.0, p=np.inf)
        lens = np.fromiter((len(x) for x in hits), dtype=np.int64, count=len(hits))
        if not lens.sum():
            continue
        obs = np.concatenate([np.asarray(x, dtype=np.int64) for x in hits if len(x)])
        tid = np.repeat(np.arange(len(t)), lens)
        diff = t[tid] - X[obs]
        kw = scaled_kernel(diff, h) * w[obs]
        z = np.concatenate([np.ones((len(obs), 1)), diff], axis=1)
        nk = len(t)
        block_n = np.empty((nk, p, p))
        for a, b in zip(iu, ju):
            v = np.bincount(tid, kw * z[:, a] * z[:, b], minlength=nk)
            block_n[:, a, b] = v
            block_n[:, b, a] = v
        normal[start : start + chunk] = block_n
        for a in range(p):
            rhs[start : start + chunk, a] = np.bincount(tid, kw * z[:, a] * y[obs], minlength=nk)
    return normal, rhs


def local_linear_at(
    targets: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    h: Bandwidth,
    want_inverse00: bool = False,
    enlarge: bool = True,
):
    """Local linear intercepts at arbitrary targets, with the empty-window fallback.

    Returns ``(b0, status, inv00, factor)`` where ``factor`` is the per-target
    bandwidth multiplier that was finally used.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    hv = h.values
    normal, rhs = local_moments(targets, X, y, w, hv)
    b0, status, inv00 = solve_local_systems(normal, rhs, want_inverse00=want_inverse00)
    factor = np.ones(len(targets))
    tries = 0
    while enlarge and np.any(status == 2) and tries < MAX_ENLARGE:
        tries += 1
        idx = np.flatnonzero(status == 2)
        f = ENLARGE_FACTOR**tries
        nm, r = local_moments(targets[idx], X, y, w, hv * f)
        b, st, iv = solve_local_systems(nm, r, want_inverse00=want_inverse00)
        b0[idx], status[idx], factor[idx] = b, st, f
        if want_inverse00:
            inv00[idx] = iv
    return b0, status, inv00, factor


def _report(status: np.ndarray, factor: np.ndarray, what: str) -> None:
    bad = int(np.sum(status == 2))
    if bad:
        raise BandwidthTooSmall(bad, f"{bad} grid node(s) have empty {what} windows after enlarging the bandwidth")
    if np.any(factor > 1):
        warnings.warn(f"{int(np.sum(factor > 1))} node(s) needed an enlarged {what} window", stacklevel=3)
    if np.any(status == 1):
        warnings.warn(f"{int(np.sum(status == 1))} node(s) fell back to local-constant {what} fits", stacklevel=3)


def _surface_from_nodes(grid: EvaluationGrid, inside_values: np.ndarray, kind: str, info: dict) -> SurfaceEstimate:
    out = np.full(grid.size, OUTSIDE)
    out[grid.node_index] = inside_values
    return SurfaceEstimate(grid, out.reshape(grid.shape), kind, info)


def _check_h(dataset: FunctionalDataset, grid: EvaluationGrid, h: Bandwidth) -> None:
    if h.d != dataset.d or grid.d != dataset.d:
        raise ValueError("bandwidth, grid and data dimensions must agree")
    box = dataset.bounding_box
    h.validate(np.maximum(box[:, 1] - box[:, 0], grid.hi - grid.lo))


def estimate_mean(dataset: FunctionalDataset, grid: EvaluationGrid, h: Bandwidth) -> SurfaceEstimate:
    """Local linear mean with per-sample weight ``1/N_i``."""
    _check_h(dataset, grid, h)
    warn_if_extrapolating(dataset, grid)
    targets = grid.nodes()[grid.node_index]
    b0, status, _, factor = local_linear_at(
        targets, dataset.coords, dataset.values, dataset.observation_weights(), h
    )
    _report(status, factor, "mean")
    return _surface_from_nodes(grid, b0, "mean", {"h": h.per_axis, "method": "direct"})


def estimate_diag_plus_noise(dataset: FunctionalDataset, grid: EvaluationGrid, h: Bandwidth) -> SurfaceEstimate:
    """Local linear fit to the squared responses; estimates ``Gamma(t,t) + sigma^2 + mu^2``."""
    _check_h(dataset, grid, h)
    warn_if_extrapolating(dataset, grid)
    targets = grid.nodes()[grid.node_index]
    b0, status, _, factor = local_linear_at(
        targets, dataset.coords, dataset.values**2, dataset.observation_weights(), h
    )
    _report(status, factor, "diagonal")
    return _surface_from_nodes(grid, b0, "diagonal_plus_noise", {"h": h.per_axis, "method": "direct"})


def pair_observations(dataset: FunctionalDataset):
    """All within-sample ordered pairs ``j != l`` as 2d-dimensional pseudo-observations.

    Returns ``(Z, products, weights)`` with ``Z = (t_j, t_l)``.
    """
    zs, ps, ws = [], [], []
    pw = dataset.pair_weights()
    for i, (c, v) in enumerate(dataset):
        m = len(v)
        if m < 2:
            continue
        j, l = np.nonzero(~np.eye(m, dtype=bool))
        zs.append(np.concatenate([c[j], c[l]], axis=1))
        ps.append(v[j] * v[l])
        ws.append(np.full(len(j), pw[i]))
    if not zs:
        raise NoPairs("every sample has fewer than two observations")
    return np.concatenate(zs), np.concatenate(ps), np.concatenate(ws)


def estimate_covariance(
    dataset: FunctionalDataset, grid: EvaluationGrid, h: Bandwidth, mean: SurfaceEstimate
) -> SurfaceEstimate:
    """Local planar fit to within-sample raw products, minus ``mu(s) mu(t)``.

    Literally enumerates all pairs, so cost grows with ``sum N_i^2``; meant
    for small datasets and as an oracle.  Both orders of every pair enter the
    fit, which makes ``G(s, t) = G(t, s)``; the fit is evaluated for
    ``s <= t`` (row-major order) and mirrored, which is the symmetrized
    surface with bitwise symmetry.
    """
    _check_h(dataset, grid, h)
    if mean.grid.shape != grid.shape:
        raise ValueError("mean must be estimated on the same grid")
    warn_if_extrapolating(dataset, grid)
    Z, prod, w = pair_observations(dataset)
    nodes = grid.nodes()[grid.node_index]
    m = len(nodes)
    si, ti = np.triu_indices(m)
    targets = np.concatenate([nodes[si], nodes[ti]], axis=1)
    b0, status, _, factor = local_linear_at(targets, Z, prod, w, h.doubled())
    _report(status, factor, "covariance")
    mu = mean.values.ravel()[grid.node_index]
    upper = np.zeros((m, m))
    upper[si, ti] = b0 - mu[si] * mu[ti]
    inner = upper + np.triu(upper, 1).T
    full = np.full((grid.size, grid.size), OUTSIDE)
    full[np.ix_(grid.node_index, grid.node_index)] = inner
    return SurfaceEstimate(grid, full.reshape(grid.shape * 2), "covariance", {"h": h.per_axis, "method": "direct"})
