"""Domain types, grids, the product Epanechnikov kernel and linear binning."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Literal, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from dfpca.errors import DegenerateAxis, GridNotEquispaced, ObservationOutsideGrid, OutOfDomain

#: Marker stored at grid nodes outside the domain mask.  Integrations treat it as 0.
OUTSIDE = np.nan

_SNAP_TOL = 1e-9
_HULL_RTOL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.flags.writeable = False
    return a


def kernel_eval(u) -> float:
    """Product Epanechnikov kernel at a single point ``u`` (length d)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return float(epanechnikov(u[None, :])[0])


def epanechnikov(u: np.ndarray) -> np.ndarray:
    """Vectorised product kernel; the last axis of ``u`` indexes dimensions."""
    u = np.asarray(u, dtype=float)
    k = np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    return np.prod(k, axis=-1)


def scaled_kernel(diff: np.ndarray, h: np.ndarray) -> np.ndarray:
    """``K_h(diff) = K(diff / h) / prod(h)`` with ``diff`` shaped (..., d)."""
    h = np.asarray(h, dtype=float)
    return epanechnikov(diff / h) / np.prod(h)


@dataclass(frozen=True, eq=False)
class FunctionalDataset:
    """Scattered functional observations ``(t_ij, Y_ij)`` stored in flat arrays.

    Sample ``i`` owns rows ``offsets[i]:offsets[i + 1]`` of ``coords`` and
    ``values``.  Use :meth:`from_samples` to build one from per-sample arrays.
    """

    ids: tuple
    coords: np.ndarray
    values: np.ndarray
    offsets: np.ndarray
    bounding_box: np.ndarray
    axis_names: tuple = ()

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, None]
        values = np.asarray(self.values, dtype=float).ravel()
        offsets = np.asarray(self.offsets, dtype=np.int64)
        d = coords.shape[1]
        if d < 1:
            raise ValueError("coordinates must have at least one dimension")
        if coords.shape[0] != values.shape[0]:
            raise ValueError("coords and values disagree in length")
        n = len(self.ids)
        if n < 1:
            raise ValueError("a dataset needs at least one sample")
        if offsets.shape != (n + 1,) or offsets[0] != 0 or offsets[-1] != values.shape[0]:
            raise ValueError("offsets do not partition the observations")
        if np.any(np.diff(offsets) < 1):
            raise ValueError("every sample needs at least one observation")
        if len(set(self.ids)) != n:
            raise ValueError("sample ids must be unique")
        if not np.all(np.isfinite(coords)) or not np.all(np.isfinite(values)):
            raise ValueError("observations must be finite")
        box = np.asarray(self.bounding_box, dtype=float).reshape(d, 2)
        if np.any(box[:, 0] > box[:, 1]):
            raise ValueError("bounding box has lo > hi")
        tol = _HULL_RTOL * np.maximum(1.0, np.abs(box).max(axis=1))
        if np.any(coords < box[:, 0] - tol) or np.any(coords > box[:, 1] + tol):
            raise ValueError("observations fall outside the bounding box")
        names = tuple(self.axis_names) or tuple(f"t_{k + 1}" for k in range(d))
        if len(names) != d:
            raise ValueError("axis_names must have one entry per dimension")
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "coords", _readonly(coords))
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "offsets", _readonly(offsets))
        object.__setattr__(self, "bounding_box", _readonly(box))
        object.__setattr__(self, "axis_names", names)

    @classmethod
    def from_samples(
        cls,
        samples: Sequence[tuple],
        ids: Optional[Sequence] = None,
        bounding_box=None,
        axis_names: Sequence[str] = (),
    ) -> "FunctionalDataset":
        """Build from a sequence of ``(coords, values)`` pairs, one per sample."""
        cs, vs = [], []
        for c, v in samples:
            v = np.atleast_1d(np.asarray(v, dtype=float)).ravel()
            c = np.asarray(c, dtype=float)
            if c.ndim <= 1:
                c = c.reshape(len(v), -1)
            cs.append(c)
            vs.append(v)
        coords = np.concatenate(cs, axis=0)
        values = np.concatenate(vs)
        offsets = np.concatenate([[0], np.cumsum([len(v) for v in vs])])
        if ids is None:
            ids = [str(i) for i in range(len(vs))]
        if bounding_box is None:
            bounding_box = np.stack([coords.min(axis=0), coords.max(axis=0)], axis=1)
        return cls(tuple(ids), coords, values, offsets, bounding_box, tuple(axis_names))

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def sample_index(self) -> np.ndarray:
        """Sample number of every observation row."""
        return np.repeat(np.arange(self.n), self.counts)

    def sample(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return self.coords[lo:hi], self.values[lo:hi]

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for i in range(self.n):
            yield self.sample(i)

    def observation_weights(self) -> np.ndarray:
        """The ``1 / N_i`` weight of every observation."""
        return np.repeat(1.0 / self.counts, self.counts)

    def pair_weights(self) -> np.ndarray:
        """Per-sample ``1 / (N_i (N_i - 1))``; zero for samples with a single point."""
        c = self.counts.astype(float)
        with np.errstate(divide="ignore"):
            return np.where(c >= 2, 1.0 / (c * (c - 1.0)), 0.0)

    def subset(self, keep: np.ndarray) -> "FunctionalDataset":
        """Drop observations where ``keep`` is False; empty samples are removed."""
        keep = np.asarray(keep, dtype=bool)
        samples, ids = [], []
        for i, (c, v) in enumerate(self):
            m = keep[self.offsets[i] : self.offsets[i + 1]]
            if m.any():
                samples.append((c[m], v[m]))
                ids.append(self.ids[i])
        return FunctionalDataset.from_samples(samples, ids, self.bounding_box, self.axis_names)

    def with_coords(self, coords: np.ndarray, bounding_box) -> "FunctionalDataset":
        return FunctionalDataset(self.ids, coords, self.values, self.offsets, bounding_box, self.axis_names)


@dataclass(frozen=True, eq=False)
class EvaluationGrid:
    """Tensor-product grid with an optional in-domain mask (True = inside)."""

    axes: tuple
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        axes = tuple(_readonly(np.asarray(a, dtype=float).ravel()) for a in self.axes)
        if not axes:
            raise ValueError("grid needs at least one axis")
        for a in axes:
            if a.size < 2 or np.any(np.diff(a) <= 0):
                raise ValueError("each axis needs >= 2 strictly increasing nodes")
        object.__setattr__(self, "axes", axes)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != self.shape:
                raise ValueError(f"mask shape {mask.shape} != grid shape {self.shape}")
            object.__setattr__(self, "mask", _readonly(mask))

    @classmethod
    def regular(cls, lo, hi, num, mask=None) -> "EvaluationGrid":
        """Equispaced nodes including both end points on every axis."""
        lo, hi = np.atleast_1d(lo).astype(float), np.atleast_1d(hi).astype(float)
        num = np.broadcast_to(np.atleast_1d(num), lo.shape)
        return cls(tuple(np.linspace(a, b, int(m)) for a, b, m in zip(lo, hi, num)), mask)

    @classmethod
    def midpoints(cls, lo, hi, num, mask=None) -> "EvaluationGrid":
        """Cell-centred nodes; the Riemann sum is then the midpoint rule."""
        lo, hi = np.atleast_1d(lo).astype(float), np.atleast_1d(hi).astype(float)
        num = np.broadcast_to(np.atleast_1d(num), lo.shape)
        axes = []
        for a, b, m in zip(lo, hi, num):
            step = (b - a) / int(m)
            axes.append(a + step * (np.arange(int(m)) + 0.5))
        return cls(tuple(axes), mask)

    @classmethod
    def covering(cls, dataset: FunctionalDataset, num, mask=None) -> "EvaluationGrid":
        box = dataset.bounding_box
        return cls.regular(box[:, 0], box[:, 1], num, mask)

    def same_as(self, other: "EvaluationGrid") -> bool:
        """Identical axes and mask."""
        if self is other:
            return True
        if not isinstance(other, EvaluationGrid) or self.shape != other.shape:
            return False
        if not all(np.array_equal(a, b) for a, b in zip(self.axes, other.axes)):
            return False
        return np.array_equal(self.in_mask, other.in_mask)

    @property
    def d(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(a[-1] - a[0]) / (a.size - 1) for a in self.axes])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def lo(self) -> np.ndarray:
        return np.array([a[0] for a in self.axes])

    @property
    def hi(self) -> np.ndarray:
        return np.array([a[-1] for a in self.axes])

    @property
    def in_mask(self) -> np.ndarray:
        """Boolean array over the grid; all True when no mask is set."""
        if self.mask is None:
            return np.ones(self.shape, dtype=bool)
        return self.mask

    @property
    def node_index(self) -> np.ndarray:
        """Flat (row-major) indices of in-mask nodes."""
        return np.flatnonzero(self.in_mask.ravel())

    @property
    def n_inside(self) -> int:
        return int(self.in_mask.sum())

    def is_equispaced(self, rtol: float = 1e-9) -> bool:
        for a in self.axes:
            step = np.diff(a)
            if np.any(np.abs(step - step.mean()) > rtol * max(abs(step.mean()), 1e-300)):
                return False
        return True

    def require_equispaced(self) -> None:
        if not self.is_equispaced():
            raise GridNotEquispaced("this operation needs equispaced axes")

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape (size, d), last axis varying fastest."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def sub(self, ranges: Sequence[tuple]) -> "EvaluationGrid":
        """Sub-grid over per-axis index ranges ``[(start, stop), ...]``."""
        sl = tuple(slice(a, b) for a, b in ranges)
        mask = None if self.mask is None else self.mask[sl]
        return EvaluationGrid(tuple(ax[s] for ax, s in zip(self.axes, sl)), mask)

    def contains(self, coords: np.ndarray) -> np.ndarray:
        coords = np.atleast_2d(coords)
        tol = _HULL_RTOL * np.maximum(1.0, np.maximum(np.abs(self.lo), np.abs(self.hi)))
        return np.all((coords >= self.lo - tol) & (coords <= self.hi + tol), axis=1)

    def interpolate(self, values: np.ndarray, coords: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of grid ``values`` at ``coords`` (N, d).

        ``values`` may carry extra trailing axes (e.g. several components).
        Raises :class:`OutOfDomain` for points outside the grid hull.
        """
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        if coords.shape[1] != self.d:
            raise ValueError("coordinate dimension does not match the grid")
        if not np.all(self.contains(coords)):
            raise OutOfDomain("coordinates outside the grid hull")
        coords = np.clip(coords, self.lo, self.hi)
        interp = RegularGridInterpolator(self.axes, values, method="linear", bounds_error=False)
        return interp(coords)


@dataclass(frozen=True)
class Bandwidth:
    per_axis: tuple

    def __post_init__(self):
        h = tuple(float(x) for x in np.atleast_1d(self.per_axis))
        if not h or any(not np.isfinite(x) or x <= 0 for x in h):
            raise ValueError("bandwidths must be positive and finite")
        object.__setattr__(self, "per_axis", h)

    @property
    def values(self) -> np.ndarray:
        return np.array(self.per_axis)

    @property
    def d(self) -> int:
        return len(self.per_axis)

    def validate(self, extent) -> "Bandwidth":
        extent = np.broadcast_to(np.asarray(extent, dtype=float), (self.d,))
        if np.any(self.values > extent * (1 + 1e-12)):
            raise ValueError(f"bandwidth {self.per_axis} exceeds the domain extent {tuple(extent)}")
        return self

    def scaled(self, factor) -> "Bandwidth":
        return Bandwidth(tuple(self.values * np.asarray(factor, dtype=float)))

    def doubled(self) -> "Bandwidth":
        """Bandwidth over the ``(s, t)`` product domain of a covariance surface."""
        return Bandwidth(self.per_axis + self.per_axis)


SurfaceKind = Literal["mean", "covariance", "diagonal_plus_noise", "noise_variance"]


@dataclass(frozen=True, eq=False)
class SurfaceEstimate:
    """A fitted function sampled on ``grid``.

    Covariance surfaces carry the logical shape ``grid.shape + grid.shape``.
    Nodes outside the mask hold :data:`OUTSIDE`.
    """

    grid: EvaluationGrid
    values: np.ndarray
    kind: SurfaceKind = "mean"
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        expected = self.grid.shape * 2 if self.kind == "covariance" else self.grid.shape
        if values.shape != expected:
            raise ValueError(f"surface shape {values.shape} != expected {expected}")
        inside = self.inside_mask()
        if not np.all(np.isfinite(values[inside])):
            raise ValueError("surface must be finite at every in-mask node")
        object.__setattr__(self, "values", _readonly(values))

    def inside_mask(self) -> np.ndarray:
        m = self.grid.in_mask
        if self.kind == "covariance":
            return np.multiply.outer(m, m)
        return m

    def filled(self) -> np.ndarray:
        """Values with outside nodes replaced by 0, as integrations expect."""
        return np.where(self.inside_mask(), self.values, 0.0)

    def as_matrix(self) -> np.ndarray:
        """Covariance only: the full ``size x size`` matrix (outside nodes zero)."""
        if self.kind != "covariance":
            raise ValueError("only covariance surfaces can be matrixized")
        m = self.grid.size
        return self.filled().reshape(m, m)

    def diagonal(self) -> np.ndarray:
        """Covariance only: ``Gamma(t, t)`` on the grid."""
        m = self.grid.size
        diag = np.diagonal(self.values.reshape(m, m)).reshape(self.grid.shape)
        return np.where(self.grid.in_mask, diag, OUTSIDE)


@dataclass(frozen=True)
class AffineMap:
    """Per-axis map ``u -> lo + scale * u`` from the unit box to original units."""

    lo: np.ndarray
    scale: np.ndarray

    def __call__(self, u) -> np.ndarray:
        return np.asarray(self.lo) + np.asarray(self.scale) * np.asarray(u, dtype=float)

    def inverse(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - np.asarray(self.lo)) / np.asarray(self.scale)

    @property
    def volume(self) -> float:
        return float(np.prod(self.scale))


def normalize_domain(dataset: FunctionalDataset) -> tuple[FunctionalDataset, AffineMap]:
    """Map coordinates onto ``[0, 1]^d`` using the dataset's bounding box.

    Returns the normalised dataset and the map back to original units.
    """
    box = dataset.bounding_box
    extent = box[:, 1] - box[:, 0]
    if np.any(extent <= 0):
        bad = [dataset.axis_names[k] for k in np.flatnonzero(extent <= 0)]
        raise DegenerateAxis(f"axis {', '.join(bad)} has zero extent")
    amap = AffineMap(_readonly(box[:, 0].copy()), _readonly(extent.copy()))
    unit = np.clip(amap.inverse(dataset.coords), 0.0, 1.0)
    unit_box = np.tile([0.0, 1.0], (dataset.d, 1))
    return dataset.with_coords(unit, unit_box), amap


def corner_offsets(d: int) -> np.ndarray:
    """The 2^d corners {0,1}^d of a grid cell, first axis slowest."""
    return np.array(list(itertools.product((0, 1), repeat=d)), dtype=np.int64)


@dataclass
class BinnedData:
    """Linear-binning output consumed by the FFT smoothers.

    ``weight_grid``/``value_grid``/``square_grid`` carry the ``1/N_i``
    observation weight.  The per-sample arrays hold unit masses (covariance
    pair weights are applied later), and ``pair_mass``/``pair_square`` are the
    same-observation correction grids keyed by the neighbour offset ``delta``:
    entry ``g`` of ``pair_mass[delta]`` is
    ``sum_i w_i sum_j b_ij(g) b_ij(g + delta)`` with ``w_i = 1/(N_i(N_i-1))``.
    """

    grid: EvaluationGrid
    weight_grid: np.ndarray
    value_grid: np.ndarray
    square_grid: np.ndarray
    counts: np.ndarray
    pair_weights: np.ndarray
    sample_mass: Optional[np.ndarray] = None
    sample_value: Optional[np.ndarray] = None
    pair_mass: dict = field(default_factory=dict)
    pair_square: dict = field(default_factory=dict)
    cell_index: Optional[np.ndarray] = None
    cell_weights: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return len(self.counts)

    def restrict(self, ranges: Sequence[tuple]) -> "BinnedData":
        """The d-dimensional grids sliced to a sub-box (per-sample data dropped)."""
        sl = tuple(slice(a, b) for a, b in ranges)
        return BinnedData(
            self.grid.sub(ranges),
            self.weight_grid[sl],
            self.value_grid[sl],
            self.square_grid[sl],
            self.counts,
            self.pair_weights,
        )


def _cell_coordinates(coords: np.ndarray, grid: EvaluationGrid) -> tuple[np.ndarray, np.ndarray]:
    """Lower-corner index and fractional position of every point in its cell."""
    lo, step, shape = grid.lo, grid.spacing, np.array(grid.shape)
    pos = (coords - lo) / step
    near = np.rint(pos)
    pos = np.where(np.abs(pos - near) < _SNAP_TOL, near, pos)
    base = np.clip(np.floor(pos), 0, shape - 2).astype(np.int64)
    frac = np.clip(pos - base, 0.0, 1.0)
    return base, frac


def linear_bin(dataset: FunctionalDataset, grid: EvaluationGrid, per_sample: bool = True) -> BinnedData:
    """Distribute every observation's mass multilinearly to its 2^d cell corners.

    Parameters
    ----------
    dataset : FunctionalDataset
    grid : EvaluationGrid
        Must be equispaced and contain every observation.
    per_sample : bool, default=True
        Also build the per-sample grids and same-observation correction grids
        needed by the covariance smoother.  Costs O(n * grid) memory.

    Raises
    ------
    ObservationOutsideGrid
        If a coordinate lies outside the grid hull.
    """
    grid.require_equispaced()
    if dataset.d != grid.d:
        raise ValueError("dataset and grid dimensions differ")
    inside = grid.contains(dataset.coords)
    if not np.all(inside):
        raise ObservationOutsideGrid(f"{int((~inside).sum())} observation(s) outside the grid hull")

    d, shape, size = grid.d, grid.shape, grid.size
    base, frac = _cell_coordinates(dataset.coords, grid)
    corners = corner_offsets(d)
    # (N, 2^d) multilinear weights and flat node indices
    cw = np.ones((len(frac), len(corners)))
    for k in range(d):
        cw *= np.where(corners[:, k][None, :] == 1, frac[:, k : k + 1], 1.0 - frac[:, k : k + 1])
    idx = np.ravel_multi_index(tuple((base[:, None, k] + corners[None, :, k]) for k in range(d)), shape)

    y = dataset.values
    w_obs = dataset.observation_weights()
    flat_idx, flat_w = idx.ravel(), cw.ravel()
    wrep = np.repeat(w_obs, len(corners))
    yrep = np.repeat(y, len(corners))
    weight_grid = np.bincount(flat_idx, flat_w * wrep, minlength=size).reshape(shape)
    value_grid = np.bincount(flat_idx, flat_w * wrep * yrep, minlength=size).reshape(shape)
    square_grid = np.bincount(flat_idx, flat_w * wrep * yrep * yrep, minlength=size).reshape(shape)

    out = BinnedData(
        grid,
        weight_grid,
        value_grid,
        square_grid,
        dataset.counts.copy(),
        dataset.pair_weights(),
        cell_index=idx,
        cell_weights=cw,
    )
    if not per_sample:
        return out

    n = dataset.n
    srep = np.repeat(dataset.sample_index, len(corners))
    sflat = srep * size + flat_idx
    out.sample_mass = np.bincount(sflat, flat_w, minlength=n * size).reshape((n,) + shape)
    out.sample_value = np.bincount(sflat, flat_w * yrep, minlength=n * size).reshape((n,) + shape)

    pw = dataset.pair_weights()[dataset.sample_index]
    for a, b in itertools.product(range(len(corners)), repeat=2):
        prod = cw[:, a] * cw[:, b]
        if not np.any(prod):
            continue
        delta = tuple(int(x) for x in corners[b] - corners[a])
        m = np.bincount(idx[:, a], prod * pw, minlength=size).reshape(shape)
        s = np.bincount(idx[:, a], prod * pw * y * y, minlength=size).reshape(shape)
        if delta in out.pair_mass:
            out.pair_mass[delta] = out.pair_mass[delta] + m
            out.pair_square[delta] = out.pair_square[delta] + s
        else:
            out.pair_mass[delta] = m
            out.pair_square[delta] = s
    for delta in [k for k, v in out.pair_mass.items() if not np.any(v)]:
        del out.pair_mass[delta]
        del out.pair_square[delta]
    return out


def gridded_sample(binned: BinnedData, i: int) -> np.ndarray:
    """Bin-averaged values of sample ``i``; NaN where the sample has no mass."""
    mass = binned.sample_mass[i]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(mass > 0, binned.sample_value[i] / np.where(mass > 0, mass, 1.0), np.nan)


def warn_if_extrapolating(dataset: FunctionalDataset, grid: EvaluationGrid) -> None:
    box = dataset.bounding_box
    if np.any(grid.lo < box[:, 0] - 1e-12) or np.any(grid.hi > box[:, 1] + 1e-12):
        warnings.warn("grid extends beyond the data bounding box; edge nodes are extrapolated", stacklevel=3)
