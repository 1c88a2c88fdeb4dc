"""Binned local linear smoothing evaluated with FFT convolutions.

Moment grids ``S_r(t) = sum_g W(g) K_h(t - g) (t - g)^r`` are discrete
convolutions of binned data with separable kernel stencils.  The kernel has
compact support so the stencils are exact, and zero padding keeps the
convolution linear rather than circular.

The covariance path never forms the 2d-dimensional product grid.  Each
sample's binned grid is convolved once in d dimensions; the raw-product
moments are then sums over samples of outer products of those convolutions,
computed tile by tile over the (s, t) node pairs.  Same-observation terms are
removed with a sparse correction so only pairs ``j != l`` remain.
"""

from __future__ import annotations

import itertools
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy import fft as sfft

from dfpca.core import (
    OUTSIDE,
    Bandwidth,
    BinnedData,
    EvaluationGrid,
    SurfaceEstimate,
)
from dfpca.errors import BandwidthTooSmall, BlockTooSmall, HaloTooSmall, NoPairs
from dfpca.smoother import ENLARGE_FACTOR, MAX_ENLARGE, solve_local_systems

EMPTY_RTOL = 1e-10
FFT_ZERO_RTOL = 1e-13
CANCEL_RTOL = 1e-11
TILE_BUDGET_BYTES = 48 * 2**20


def stencil_radius(h: Bandwidth, grid: EvaluationGrid) -> np.ndarray:
    """Kernel radius in nodes, ``ceil(h_k / spacing_k)`` per axis."""
    return np.ceil(h.values / grid.spacing - 1e-12).astype(int)


def multi_indices(d: int, max_order: int) -> list[tuple]:
    """Exponent tuples with total degree <= ``max_order``, ordered by degree."""
    out = []
    for order in range(max_order + 1):
        for combo in itertools.product(range(order + 1), repeat=d):
            if sum(combo) == order:
                out.append(combo)
    return sorted(out, key=lambda a: (sum(a), [-x for x in a]))


def axis_stencils(h: float, step: float, radius: int, max_power: int = 2) -> np.ndarray:
    """Rows ``a = 0..max_power`` of ``K_h(u) u^a`` sampled at ``u = k * step``, ``|k| <= radius``."""
    u = np.arange(-radius, radius + 1) * step
    x = u / h
    k = np.where(np.abs(x) < 1.0, 0.75 * (1.0 - x * x), 0.0) / h
    return np.stack([k * u**a for a in range(max_power + 1)])


def _outer(vectors: Sequence[np.ndarray]) -> np.ndarray:
    out = vectors[0]
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return out


class _Convolver:
    """Zero-padded linear convolution of grids with centred stencils via real FFTs."""

    def __init__(self, shape: Sequence[int], radii: Sequence[int]):
        self.shape = tuple(int(m) for m in shape)
        self.radii = tuple(int(r) for r in radii)
        self.d = len(self.shape)
        self.fshape = tuple(sfft.next_fast_len(m + 2 * r, real=True) for m, r in zip(self.shape, self.radii))
        self.axes = tuple(range(-self.d, 0))
        self._stencil_cache: dict = {}

    def transform(self, data: np.ndarray) -> np.ndarray:
        return sfft.rfftn(data, s=self.fshape, axes=self.axes)

    def stencil_hat(self, key, stencil: np.ndarray) -> np.ndarray:
        if key not in self._stencil_cache:
            self._stencil_cache[key] = sfft.rfftn(stencil, s=self.fshape)
        return self._stencil_cache[key]

    def apply(self, data_hat: np.ndarray, stencil_hat: np.ndarray) -> np.ndarray:
        full = sfft.irfftn(data_hat * stencil_hat, s=self.fshape, axes=self.axes)
        lead = (slice(None),) * (full.ndim - self.d)
        crop = tuple(slice(r, r + m) for r, m in zip(self.radii, self.shape))
        out = full[lead + crop]
        # exact zeros (e.g. a second moment of bins on the target's own axis line)
        # come back as FFT roundoff; snap values at that level to 0
        scale = np.max(np.abs(out), axis=self.axes, keepdims=True)
        return np.where(np.abs(out) <= FFT_ZERO_RTOL * scale, 0.0, out)


class KernelStencils:
    """Per-axis moment stencils for one bandwidth on one grid."""

    def __init__(self, h: Bandwidth, grid: EvaluationGrid, max_power: int = 2):
        grid.require_equispaced()
        self.h = h
        self.radii = stencil_radius(h, grid)
        self.axis = [
            axis_stencils(hk, dk, int(rk), max_power) for hk, dk, rk in zip(h.values, grid.spacing, self.radii)
        ]
        self.support = [(s[0] > 0).astype(float) for s in self.axis]

    def stencil(self, alpha: tuple) -> np.ndarray:
        return _outer([self.axis[k][a] for k, a in enumerate(alpha)])

    def support_stencil(self) -> np.ndarray:
        return _outer(self.support)


def _window_counts(conv: _Convolver, st: KernelStencils, mass: np.ndarray) -> np.ndarray:
    """Number of positive-mass bins inside each open kernel window, exact after rounding."""
    ind = (mass > 0).astype(float)
    out = conv.apply(conv.transform(ind), conv.stencil_hat("support", st.support_stencil()))
    return np.rint(out)


def binned_moments(binned: BinnedData, h: Bandwidth, target: str = "mean"):
    """Kernel moment grids of the binned data.

    Returns ``(normal, rhs, nonempty)`` with ``normal`` shaped
    ``grid.shape + (d+1, d+1)`` and ``rhs`` shaped ``grid.shape + (d+1,)``.
    """
    grid = binned.grid
    d = grid.d
    if target == "mean":
        resp = binned.value_grid
    elif target == "squares":
        resp = binned.square_grid
    else:
        raise ValueError(f"unknown moment target {target!r}")
    st = KernelStencils(h, grid)
    conv = _Convolver(grid.shape, st.radii)
    w_hat = conv.transform(binned.weight_grid)
    y_hat = conv.transform(resp)
    nonempty = _window_counts(conv, st, binned.weight_grid) > 0

    def moment(data_hat, alpha):
        out = conv.apply(data_hat, conv.stencil_hat(alpha, st.stencil(alpha)))
        return np.where(nonempty, out, 0.0)

    e = [tuple(int(j == k) for j in range(d)) for k in range(d)]
    zero = (0,) * d
    normal = np.empty(grid.shape + (d + 1, d + 1))
    rhs = np.empty(grid.shape + (d + 1,))
    normal[..., 0, 0] = moment(w_hat, zero)
    rhs[..., 0] = moment(y_hat, zero)
    for k in range(d):
        m1 = moment(w_hat, e[k])
        normal[..., 0, k + 1] = m1
        normal[..., k + 1, 0] = m1
        rhs[..., k + 1] = moment(y_hat, e[k])
        for m in range(k, d):
            alpha = tuple(a + b for a, b in zip(e[k], e[m]))
            m2 = moment(w_hat, alpha)
            normal[..., k + 1, m + 1] = m2
            normal[..., m + 1, k + 1] = m2
    return normal, rhs, nonempty


def fft_fit(binned: BinnedData, h: Bandwidth, target: str = "mean", want_inverse00: bool = False):
    """Intercepts on every node of ``binned.grid`` with the empty-window fallback.

    Returns ``(b0, status, inv00, factor)``, each shaped like the grid.
    """
    grid = binned.grid
    p = grid.d + 1
    normal, rhs, _ = binned_moments(binned, h, target)
    b0, status, inv00 = solve_local_systems(normal.reshape(-1, p, p), rhs.reshape(-1, p), want_inverse00=want_inverse00)
    factor = np.ones(grid.size)
    for attempt in range(1, MAX_ENLARGE + 1):
        idx = np.flatnonzero(status == 2)
        if not idx.size:
            break
        f = ENLARGE_FACTOR**attempt
        nm, r, _ = binned_moments(binned, h.scaled(f), target)
        b, s, iv = solve_local_systems(nm.reshape(-1, p, p)[idx], r.reshape(-1, p)[idx], want_inverse00=want_inverse00)
        b0[idx], status[idx], factor[idx] = b, s, f
        if want_inverse00:
            inv00[idx] = iv
    shape = grid.shape
    return (
        b0.reshape(shape),
        status.reshape(shape),
        None if inv00 is None else inv00.reshape(shape),
        factor.reshape(shape),
    )


def _finish(grid: EvaluationGrid, b0, status, factor, what: str, inside=None):
    inside = grid.in_mask if inside is None else inside
    bad = int(np.sum((status == 2) & inside))
    if bad:
        raise BandwidthTooSmall(bad, f"{bad} grid node(s) have empty {what} windows after enlarging the bandwidth")
    if np.any((factor > 1) & inside):
        warnings.warn(f"{int(np.sum((factor > 1) & inside))} node(s) needed an enlarged {what} window", stacklevel=3)
    return np.where(inside, b0, OUTSIDE)


def fft_local_linear(
    binned: BinnedData,
    grid: Optional[EvaluationGrid] = None,
    h: Optional[Bandwidth] = None,
    moment_targets: str = "mean",
) -> SurfaceEstimate:
    """Binned local linear fit of the mean (``"mean"``) or of squared responses (``"squares"``).

    The result equals the direct estimator applied to the binned data.
    """
    grid = binned.grid if grid is None else grid
    if grid.shape != binned.grid.shape:
        raise ValueError("binned data do not conform to the grid")
    grid.require_equispaced()
    if h is None:
        raise ValueError("a bandwidth is required")
    b0, status, _, factor = fft_fit(binned, h, moment_targets)
    kind = "mean" if moment_targets == "mean" else "diagonal_plus_noise"
    values = _finish(grid, b0, status, factor, kind)
    return SurfaceEstimate(grid, values, kind, {"h": h.per_axis, "method": "fft"})


def _conv_matrix(grid: EvaluationGrid, rows: np.ndarray, st: KernelStencils, alpha: tuple) -> sp.csr_matrix:
    """Sparse ``P[s, g] = K_h(s - g) (s - g)^alpha`` for ``s`` in ``rows`` (flat indices)."""
    shape = np.array(grid.shape)
    sidx = np.stack(np.unravel_index(rows, grid.shape), axis=1)
    stencil = st.stencil(alpha)
    offs = np.stack(np.nonzero(stencil), axis=1)
    vals = stencil[tuple(offs.T)]
    keep = vals != 0
    offs, vals = offs[keep] - st.radii, vals[keep]
    r_list, c_list, v_list = [], [], []
    for o, v in zip(offs, vals):
        g = sidx - o
        ok = np.all((g >= 0) & (g < shape), axis=1)
        r_list.append(np.flatnonzero(ok))
        c_list.append(np.ravel_multi_index(tuple(g[ok].T), grid.shape))
        v_list.append(np.full(int(ok.sum()), v))
    r = np.concatenate(r_list) if r_list else np.zeros(0, int)
    c = np.concatenate(c_list) if c_list else np.zeros(0, int)
    v = np.concatenate(v_list) if v_list else np.zeros(0)
    return sp.csr_matrix((v, (r, c)), shape=(len(rows), grid.size))


def _shift_matrix(grid: EvaluationGrid, delta: tuple) -> sp.csr_matrix:
    """``S[g + delta, g] = 1`` for every node ``g`` whose shift stays on the grid."""
    idx = np.stack(np.unravel_index(np.arange(grid.size), grid.shape), axis=1)
    tgt = idx + np.asarray(delta)
    ok = np.all((tgt >= 0) & (tgt < np.array(grid.shape)), axis=1)
    rows = np.ravel_multi_index(tuple(tgt[ok].T), grid.shape)
    return sp.csr_matrix((np.ones(int(ok.sum())), (rows, np.flatnonzero(ok))), shape=(grid.size, grid.size))


def tile_rows(m: int, p: int, budget: int = TILE_BUDGET_BYTES) -> int:
    """Canonical tile edge; depends only on the node count and system size."""
    per_entry = 8 * (3 * p * p + 4 * p + 16)
    return int(max(1, min(m, math.isqrt(max(1, budget // per_entry)))))


class FftCovariance:
    """Tiled evaluation of the binned covariance estimator over in-mask node pairs.

    Tiles are fixed ``R x R`` squares of the in-mask node list (row-major
    order).  Only tiles on or above the diagonal are computed; the lower half
    is their transpose, so the result is exactly symmetric and every entry is
    produced by the same arithmetic however the work is scheduled.
    """

    def __init__(self, binned: BinnedData, h: Bandwidth, mean: SurfaceEstimate, tile: Optional[int] = None):
        if binned.sample_mass is None:
            raise ValueError("covariance smoothing needs per-sample binned grids")
        grid = binned.grid
        grid.require_equispaced()
        if mean.grid.shape != grid.shape:
            raise ValueError("mean must be estimated on the binning grid")
        if not np.any(binned.counts >= 2):
            raise NoPairs("every sample has fewer than two observations")
        self.binned, self.grid, self.h, self.mean = binned, grid, h, mean
        self.d = grid.d
        self.p = 2 * self.d + 1
        self.nodes = grid.node_index
        self.m = len(self.nodes)
        self.tile = tile or tile_rows(self.m, self.p)
        self.n_tiles = -(-self.m // self.tile)
        self.mu = mean.values.ravel()[self.nodes]
        self._enlarged: dict = {}
        self._prepare()

    def _prepare(self) -> None:
        grid, binned, d = self.grid, self.binned, self.d
        st = KernelStencils(self.h, grid)
        conv = _Convolver(grid.shape, st.radii)
        w = binned.pair_weights
        use = w > 0
        mass_hat = conv.transform(binned.sample_mass[use])
        val_hat = conv.transform(binned.sample_value[use])
        counts = _window_counts(conv, st, binned.sample_mass[use].sum(axis=0))
        nonempty = (counts > 0).ravel()[self.nodes]
        self.alphas = multi_indices(d, 2)
        self.cb, self.cbw, self.cy, self.cyw = {}, {}, {}, {}
        wu = w[use]
        n_use = int(use.sum())
        for a in self.alphas:
            c = conv.apply(mass_hat, conv.stencil_hat(a, st.stencil(a))).reshape(n_use, -1)[:, self.nodes].T
            c = np.where(nonempty[:, None], c, 0.0)
            self.cb[a] = np.ascontiguousarray(c)
            self.cbw[a] = np.ascontiguousarray(c * wu)
            if sum(a) <= 1:
                c = conv.apply(val_hat, conv.stencil_hat(a, st.stencil(a))).reshape(n_use, -1)[:, self.nodes].T
                c = np.where(nonempty[:, None], c, 0.0)
                self.cy[a] = np.ascontiguousarray(c)
                self.cyw[a] = np.ascontiguousarray(c * wu)
        # unsmoothed per-sample grids, used by binned cross-validation
        bm = binned.sample_mass[use].reshape(n_use, -1)[:, self.nodes].T
        bv = binned.sample_value[use].reshape(n_use, -1)[:, self.nodes].T
        self.bm, self.bmw = np.ascontiguousarray(bm), np.ascontiguousarray(bm * wu)
        self.bv, self.bvw = np.ascontiguousarray(bv), np.ascontiguousarray(bv * wu)
        cm_total = sp.csr_matrix((grid.size, grid.size))
        cy_total = sp.csr_matrix((grid.size, grid.size))
        for delta in binned.pair_mass:
            st_delta = _shift_matrix(grid, delta).T
            cm_total = cm_total + sp.diags(binned.pair_mass[delta].ravel()) @ st_delta
            cy_total = cy_total + sp.diags(binned.pair_square[delta].ravel()) @ st_delta
        self.pair_mass_matrix = sp.csr_matrix(cm_total)[self.nodes][:, self.nodes].tocsr()
        self.pair_square_matrix = sp.csr_matrix(cy_total)[self.nodes][:, self.nodes].tocsr()
        # same-observation corrections: D = P_alpha @ R_beta^T
        self.P = {a: _conv_matrix(grid, self.nodes, st, a) for a in self.alphas}
        self.Rm, self.Ry = {}, {}
        for delta in binned.pair_mass:
            shift = _shift_matrix(grid, delta)
            cm = sp.diags(binned.pair_mass[delta].ravel())
            cy = sp.diags(binned.pair_square[delta].ravel())
            for a in self.alphas:
                q = self.P[a] @ shift
                self.Rm[a] = self.Rm.get(a, 0) + q @ cm
                if sum(a) <= 1:
                    self.Ry[a] = self.Ry.get(a, 0) + q @ cy
        for store in (self.Rm, self.Ry):
            for a in list(store):
                store[a] = sp.csr_matrix(store[a])
        # design column u carries (alpha_u, beta_u) exponents on (s, t)
        zero = (0,) * d
        e = [tuple(int(j == k) for j in range(d)) for k in range(d)]
        self.design = [(zero, zero)] + [(ek, zero) for ek in e] + [(zero, ek) for ek in e]

    def _tile_slice(self, k: int) -> slice:
        return slice(k * self.tile, min(self.m, (k + 1) * self.tile))

    def _moments(self, rs: slice, cs: slice):
        d, p = self.d, self.p
        nr, nc = rs.stop - rs.start, cs.stop - cs.start
        add = lambda a, b: tuple(x + y for x, y in zip(a, b))
        cache: dict = {}

        def mass_moment(al, be):
            key = (al, be)
            if key not in cache:
                raw = self.cbw[al][rs] @ self.cb[be][cs].T
                corr = 0.0
                if al in self.P and be in self.Rm:
                    corr = (self.P[al][rs] @ self.Rm[be][cs].T).toarray()
                cache[key] = (raw - corr, raw)
            return cache[key]

        normal = np.empty((nr, nc, p, p))
        for u in range(p):
            for v in range(u, p):
                al = add(self.design[u][0], self.design[v][0])
                be = add(self.design[u][1], self.design[v][1])
                mom, raw = mass_moment(al, be)
                if u == v and u > 0:
                    mom = np.where(mom <= CANCEL_RTOL * raw, 0.0, mom)
                normal[:, :, u, v] = mom
                normal[:, :, v, u] = mom
        rhs = np.empty((nr, nc, p))
        for u in range(p):
            al, be = self.design[u]
            raw = self.cyw[al][rs] @ self.cy[be][cs].T
            corr = 0.0
            if be in self.Ry:
                corr = (self.P[al][rs] @ self.Ry[be][cs].T).toarray()
            rhs[:, :, u] = raw - corr
        _, uncorrected = mass_moment((0,) * d, (0,) * d)
        empty = ~(normal[:, :, 0, 0] > EMPTY_RTOL * uncorrected)
        normal[empty] = 0.0
        rhs[empty] = 0.0
        return normal, rhs, empty

    def raw_tile(self, a: int, b: int, want_inverse00: bool = False):
        """Raw-product fits ``G(s, t)`` on tile ``(a, b)`` plus solver status.

        The pair set is symmetric under swapping ``j`` and ``l``, so
        ``G(t, s) = G(s, t)`` exactly in real arithmetic; symmetrization
        therefore reduces to mirroring the upper triangle.
        """
        rs, cs = self._tile_slice(a), self._tile_slice(b)
        normal, rhs, empty = self._moments(rs, cs)
        p = self.p
        shape = normal.shape[:2]
        raw, status, inv00 = solve_local_systems(
            normal.reshape(-1, p, p), rhs.reshape(-1, p), want_inverse00=want_inverse00
        )
        if want_inverse00:
            return raw.reshape(shape), status.reshape(shape), inv00.reshape(shape)
        return raw.reshape(shape), status.reshape(shape)

    def pair_bins(self, a: int, b: int):
        """Binned pair pseudo-data on tile ``(a, b)``: mass and mean raw product per node pair."""
        rs, cs = self._tile_slice(a), self._tile_slice(b)
        mass = self.bmw[rs] @ self.bm[cs].T - self.pair_mass_matrix[rs][:, cs].toarray()
        value = self.bvw[rs] @ self.bv[cs].T - self.pair_square_matrix[rs][:, cs].toarray()
        mass = np.where(mass > EMPTY_RTOL * (self.bmw[rs] @ self.bm[cs].T), mass, 0.0)
        return mass, value

    def kernel_at_zero(self) -> float:
        return float(np.prod((0.75 / self.h.values) ** 2))

    def _enlarged_engine(self, attempt: int) -> "FftCovariance":
        if attempt not in self._enlarged:
            self._enlarged[attempt] = FftCovariance(
                self.binned, self.h.scaled(ENLARGE_FACTOR**attempt), self.mean, self.tile
            )
        return self._enlarged[attempt]

    def tile_values(self, a: int, b: int) -> np.ndarray:
        """Covariance on tile ``(a, b)`` with ``a <= b``; mean product subtracted."""
        if a > b:
            return self.tile_values(b, a).T
        raw, status = self.raw_tile(a, b)
        attempt = 0
        while np.any(status == 2) and attempt < MAX_ENLARGE:
            attempt += 1
            r2, s2 = self._enlarged_engine(attempt).raw_tile(a, b)
            fix = status == 2
            raw[fix], status[fix] = r2[fix], s2[fix]
        if np.any(status == 2):
            raise BandwidthTooSmall(int(np.sum(status == 2)), "covariance windows empty after enlarging the bandwidth")
        rs, cs = self._tile_slice(a), self._tile_slice(b)
        out = raw - np.multiply.outer(self.mu[rs], self.mu[cs])
        if a == b:
            out = np.triu(out) + np.triu(out, 1).T
        return out

    def tile_pairs(self):
        return [(a, b) for a in range(self.n_tiles) for b in range(a, self.n_tiles)]

    def dense(self, workers: int = 1) -> np.ndarray:
        """Full in-mask covariance matrix, ``m x m``."""
        out = np.empty((self.m, self.m))
        pairs = self.tile_pairs()
        for (a, b), vals in zip(pairs, _map(lambda ab: self.tile_values(*ab), pairs, workers)):
            rs, cs = self._tile_slice(a), self._tile_slice(b)
            out[rs, cs] = vals
            if a != b:
                out[cs, rs] = vals.T
        return out

    def entries(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Covariance at in-mask index sets ``rows x cols`` computed from the tiles they touch."""
        rows, cols = np.asarray(rows), np.asarray(cols)
        out = np.empty((len(rows), len(cols)))
        rt, ct = rows // self.tile, cols // self.tile
        for a in np.unique(rt):
            ri = np.flatnonzero(rt == a)
            for b in np.unique(ct):
                ci = np.flatnonzero(ct == b)
                vals = self.tile_values(int(a), int(b))
                out[np.ix_(ri, ci)] = vals[np.ix_(rows[ri] - a * self.tile, cols[ci] - b * self.tile)]
        return out

    def matmat(self, V: np.ndarray, workers: int = 1) -> np.ndarray:
        """``Gamma @ V`` streamed over tiles in a fixed order; ``Gamma`` is never stored."""
        V = np.asarray(V, dtype=float)
        out = np.zeros((self.m,) + V.shape[1:])
        pairs = self.tile_pairs()
        for (a, b), vals in zip(pairs, _map(lambda ab: self.tile_values(*ab), pairs, workers)):
            rs, cs = self._tile_slice(a), self._tile_slice(b)
            out[rs] += vals @ V[cs]
            if a != b:
                out[cs] += vals.T @ V[rs]
        return out

    def surface(self, workers: int = 1) -> SurfaceEstimate:
        full = np.full((self.grid.size, self.grid.size), OUTSIDE)
        full[np.ix_(self.nodes, self.nodes)] = self.dense(workers)
        return SurfaceEstimate(
            self.grid, full.reshape(self.grid.shape * 2), "covariance", {"h": self.h.per_axis, "method": "fft"}
        )


def _map(fn: Callable, items: list, workers: int):
    """Ordered map; results are yielded in input order whatever the worker count."""
    if workers <= 1:
        for it in items:
            yield fn(it)
        return
    with ThreadPoolExecutor(max_workers=workers) as ex:
        yield from ex.map(fn, items)


def fft_covariance(
    binned: BinnedData,
    grid: Optional[EvaluationGrid] = None,
    h: Optional[Bandwidth] = None,
    mean: Optional[SurfaceEstimate] = None,
    workers: int = 1,
) -> SurfaceEstimate:
    """Binned covariance estimator restricted to within-sample pairs ``j != l``."""
    grid = binned.grid if grid is None else grid
    if grid.shape != binned.grid.shape:
        raise ValueError("binned data do not conform to the grid")
    if h is None or mean is None:
        raise ValueError("bandwidth and mean surface are required")
    return FftCovariance(binned, h, mean).surface(workers)


@dataclass(frozen=True)
class BlockPlan:
    """Axis-aligned block cores tiling a grid, each processed with a halo of extra nodes."""

    shape: tuple
    cores: tuple
    halo: tuple

    def __post_init__(self):
        shape = tuple(int(m) for m in self.shape)
        d = len(shape)
        halo = tuple(int(x) for x in np.broadcast_to(np.asarray(self.halo), (d,)))
        cores = tuple(tuple((int(a), int(b)) for a, b in core) for core in self.cores)
        cover = np.zeros(shape, dtype=np.int64)
        for core in cores:
            if len(core) != d or any(not (0 <= a < b <= m) for (a, b), m in zip(core, shape)):
                raise ValueError(f"invalid block core {core}")
            cover[tuple(slice(a, b) for a, b in core)] += 1
        if not np.all(cover == 1):
            raise ValueError("block cores must tile the grid exactly once")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "cores", cores)
        object.__setattr__(self, "halo", halo)

    @classmethod
    def split(cls, shape: Sequence[int], blocks_per_axis, halo) -> "BlockPlan":
        shape = tuple(int(m) for m in shape)
        nb = np.broadcast_to(np.asarray(blocks_per_axis), (len(shape),))
        edges = [np.linspace(0, m, int(k) + 1).round().astype(int) for m, k in zip(shape, nb)]
        ranges = [list(zip(e[:-1], e[1:])) for e in edges]
        return cls(shape, tuple(itertools.product(*ranges)), halo)

    @classmethod
    def single(cls, shape: Sequence[int]) -> "BlockPlan":
        return cls(tuple(shape), (tuple((0, int(m)) for m in shape),), (0,) * len(shape))

    def haloed(self, core) -> tuple:
        return tuple((max(0, a - h), min(m, b + h)) for (a, b), h, m in zip(core, self.halo, self.shape))

    def validate(self, grid: EvaluationGrid, h: Bandwidth) -> None:
        if tuple(grid.shape) != self.shape:
            raise ValueError("plan does not match the grid")
        need = stencil_radius(h, grid)
        if len(self.cores) > 1 and np.any(np.array(self.halo) < need):
            raise HaloTooSmall(f"halo {self.halo} is below the kernel radius {tuple(int(x) for x in need)}")
        for core in self.cores:
            for (a, b), hk, m in zip(core, self.halo, self.shape):
                if b - a < hk and b - a < m:
                    raise BlockTooSmall(f"block core {core} is smaller than its halo {self.halo}")


def _as_name(op: Union[str, Callable]) -> str:
    if op in ("mean", "squares", "covariance"):
        return op
    if op is fft_local_linear:
        return "mean"
    if op is fft_covariance:
        return "covariance"
    raise ValueError(f"unsupported block operation {op!r}")


def blockwise_apply(
    plan: BlockPlan,
    op: Union[str, Callable],
    binned: BinnedData,
    h: Bandwidth,
    mean: Optional[SurfaceEstimate] = None,
    moment_targets: str = "mean",
    workers: int = 1,
) -> SurfaceEstimate:
    """Run an FFT smoother block by block and stitch the core outputs.

    d-dimensional fits run a separate FFT on every haloed block, so cores
    agree with the unblocked fit to rounding.  Covariance blocks are pairs of
    cores ``(s-block, t-block)`` evaluated from the canonical tiles of
    :class:`FftCovariance`, which makes the stitched surface bit-identical.
    """
    grid = binned.grid
    plan.validate(grid, h)
    name = _as_name(op)
    if name == "covariance":
        if mean is None:
            raise ValueError("covariance blocks need the mean surface")
        engine = FftCovariance(binned, h, mean)
        pos = np.full(grid.size, -1)
        pos[engine.nodes] = np.arange(engine.m)
        core_idx = []
        for core in plan.cores:
            flat = np.arange(grid.size).reshape(grid.shape)[tuple(slice(a, b) for a, b in core)].ravel()
            core_idx.append(pos[flat][pos[flat] >= 0])
        jobs = [(i, j) for i in range(len(core_idx)) for j in range(len(core_idx))]
        out = np.empty((engine.m, engine.m))
        results = _map(lambda ij: engine.entries(core_idx[ij[0]], core_idx[ij[1]]), jobs, workers)
        for (i, j), vals in zip(jobs, results):
            out[np.ix_(core_idx[i], core_idx[j])] = vals
        full = np.full((grid.size, grid.size), OUTSIDE)
        full[np.ix_(engine.nodes, engine.nodes)] = out
        info = {"h": h.per_axis, "method": "fft", "blocks": len(plan.cores)}
        return SurfaceEstimate(grid, full.reshape(grid.shape * 2), "covariance", info)

    target = "squares" if name == "squares" else moment_targets

    def run(core):
        ext = plan.haloed(core)
        b0, status, _, factor = fft_fit(binned.restrict(ext), h, target)
        inner = tuple(slice(a - e0, b - e0) for (a, b), (e0, _) in zip(core, ext))
        return b0[inner], status[inner], factor[inner]

    b0 = np.empty(grid.shape)
    status = np.empty(grid.shape, dtype=np.int8)
    factor = np.empty(grid.shape)
    for core, (b, s, f) in zip(plan.cores, _map(run, list(plan.cores), workers)):
        sl = tuple(slice(a, b_) for a, b_ in core)
        b0[sl], status[sl], factor[sl] = b, s, f
    kind = "mean" if target == "mean" else "diagonal_plus_noise"
    values = _finish(grid, b0, status, factor, kind)
    return SurfaceEstimate(grid, values, kind, {"h": h.per_axis, "method": "fft", "blocks": len(plan.cores)})
