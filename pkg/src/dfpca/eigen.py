"""Matrixized covariance, Riemann-sum eigendecomposition and random-projection eigensolving."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy import linalg

from dfpca.core import OUTSIDE, EvaluationGrid, SurfaceEstimate
from dfpca.errors import EigFailure, SketchTooSmall

DENSE_BUDGET_BYTES = 2 * 2**30
DEFAULT_L_MAX = 99
_ROW_BLOCK = 512


@dataclass
class MatrixizedCovariance:
    """Covariance over in-mask nodes as an ``M x M`` operator.

    ``node_index`` maps matrix rows to flat grid indices (row-major, last
    axis fastest).  Either ``dense`` holds the matrix or ``provider``
    returns ``Sigma @ V`` for a tall ``V``.
    """

    dim: int
    node_index: np.ndarray
    dense: Optional[np.ndarray] = None
    provider: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.dense is None and self.provider is None:
            raise ValueError("need a dense matrix or a block provider")
        if self.dense is not None and self.dense.shape != (self.dim, self.dim):
            raise ValueError("dense matrix shape does not match dim")

    @property
    def is_dense(self) -> bool:
        return self.dense is not None

    def matmat(self, V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=float)
        if self.dense is not None:
            return self.dense @ V
        return self.provider(V)

    def to_dense(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense
        return self.matmat(np.eye(self.dim))

    def symmetry_gap(self, n_probes: int = 8, seed: int = 0) -> float:
        """Largest ``|e_i' S e_j - e_j' S e_i|`` over random index pairs."""
        rng = np.random.default_rng(seed)
        idx = rng.choice(self.dim, size=min(self.dim, n_probes), replace=False)
        E = np.zeros((self.dim, len(idx)))
        E[idx, np.arange(len(idx))] = 1.0
        block = self.matmat(E)[idx]
        return float(np.max(np.abs(block - block.T)))


def _row_block_provider(matrix: np.ndarray, rows: int = _ROW_BLOCK) -> Callable:
    def provider(V):
        out = np.empty((matrix.shape[0],) + V.shape[1:])
        for start in range(0, matrix.shape[0], rows):
            out[start : start + rows] = matrix[start : start + rows] @ V
        return out

    return provider


def matrixize(cov, memory_budget: int = DENSE_BUDGET_BYTES, workers: int = 1) -> MatrixizedCovariance:
    """Reshape a covariance surface (or a tiled covariance engine) into a matrix operator.

    A dense matrix is used when ``8 M^2`` fits ``memory_budget``; otherwise a
    provider streams row blocks.  Passing an ``FftCovariance`` engine gives a
    provider that recomputes tiles on demand and never stores ``Sigma``.
    """
    if isinstance(cov, SurfaceEstimate):
        if cov.kind != "covariance":
            raise ValueError("matrixize needs a covariance surface")
        idx = cov.grid.node_index
        full = cov.values.reshape(cov.grid.size, cov.grid.size)
        if 8 * len(idx) ** 2 <= memory_budget:
            return MatrixizedCovariance(len(idx), idx, dense=np.ascontiguousarray(full[np.ix_(idx, idx)]))
        inner = full[np.ix_(idx, idx)] if len(idx) < cov.grid.size else full
        return MatrixizedCovariance(len(idx), idx, provider=_row_block_provider(inner))
    # tiled engine from fft_smoother
    engine = cov
    if 8 * engine.m**2 <= memory_budget and memory_budget > 0:
        return MatrixizedCovariance(engine.m, engine.nodes, dense=engine.dense(workers))
    return MatrixizedCovariance(engine.m, engine.nodes, provider=lambda V: engine.matmat(V, workers))


@dataclass(frozen=True, eq=False)
class EigenSystem:
    """Eigenvalues (descending, positive) and grid-sampled eigenfunctions.

    ``eigenfunctions`` has shape ``(L,) + grid.shape`` with :data:`OUTSIDE`
    at masked nodes; ``fve`` is the cumulative explained fraction.
    """

    grid: EvaluationGrid
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    fve: np.ndarray
    total_variance: float
    info: dict = field(default_factory=dict, compare=False)

    @property
    def L(self) -> int:
        return len(self.eigenvalues)

    def vectors(self) -> np.ndarray:
        """Eigenfunctions at in-mask nodes, shape ``(M, L)``."""
        return self.eigenfunctions.reshape(self.L, -1)[:, self.grid.node_index].T

    def filled(self) -> np.ndarray:
        return np.where(np.isnan(self.eigenfunctions), 0.0, self.eigenfunctions)

    def truncate(self, L: int) -> "EigenSystem":
        L = int(L)
        return EigenSystem(
            self.grid,
            self.eigenvalues[:L].copy(),
            self.eigenfunctions[:L].copy(),
            self.fve[:L].copy(),
            self.total_variance,
            dict(self.info),
        )

    def gram(self) -> np.ndarray:
        """Riemann inner products ``cell_volume * sum phi_k phi_l``."""
        v = self.vectors()
        return self.grid.cell_volume * (v.T @ v)


def canonical_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so ``sum(v) > 0``, or the first non-negligible entry is positive when the sum vanishes."""
    v = np.array(vectors, dtype=float)
    for k in range(v.shape[1]):
        col = v[:, k]
        scale = np.abs(col).max() if col.size else 0.0
        total = col.sum()
        if abs(total) > 1e-8 * max(scale, 1e-300) * np.sqrt(col.size):
            sign = np.sign(total)
        else:
            nz = np.flatnonzero(np.abs(col) > 1e-8 * scale)
            sign = np.sign(col[nz[0]]) if nz.size else 1.0
        v[:, k] = col * sign
    return v


def _assemble(grid: EvaluationGrid, lam_tilde: np.ndarray, psi: np.ndarray, L_max: Optional[int], info: dict) -> EigenSystem:
    order = np.argsort(lam_tilde)[::-1]
    lam_tilde, psi = lam_tilde[order], psi[:, order]
    M = psi.shape[0]
    lam_max = lam_tilde[0] if lam_tilde.size else 0.0
    keep = lam_tilde > max(M * np.finfo(float).eps * abs(lam_max), 0.0)
    lam_tilde, psi = lam_tilde[keep], psi[:, keep]
    total = float(lam_tilde.sum()) * grid.cell_volume
    if L_max is not None:
        lam_tilde, psi = lam_tilde[:L_max], psi[:, :L_max]
    cv = grid.cell_volume
    lam = lam_tilde * cv
    phi = canonical_signs(psi) / np.sqrt(cv)
    L = len(lam)
    funcs = np.full((L, grid.size), OUTSIDE)
    funcs[:, grid.node_index] = phi.T
    fve = np.cumsum(lam) / total if total > 0 else np.zeros(0)
    return EigenSystem(grid, lam, funcs.reshape((L,) + grid.shape), fve, total, info)


def dense_eig(S: MatrixizedCovariance, L_max: Optional[int], grid: EvaluationGrid) -> EigenSystem:
    """Symmetric eigendecomposition with Riemann rescaling.

    ``lambda = lambda_tilde * cell_volume`` and ``phi = psi / sqrt(cell_volume)``
    so that ``cell_volume * sum phi^2 = 1``.  Nonpositive eigenvalues are
    dropped.  With ``L_max`` set only the leading ``L_max`` pairs are
    computed, and FVE is relative to their positive sum.
    """
    if not S.is_dense:
        raise ValueError("dense_eig needs a dense covariance; use randomized_eig for block providers")
    if S.dim != grid.n_inside:
        raise ValueError("covariance dimension does not match the grid's in-mask node count")
    A = S.dense
    M = S.dim
    try:
        if L_max is None or L_max >= M:
            lam, psi = linalg.eigh(A)
        else:
            lam, psi = linalg.eigh(A, subset_by_index=[M - int(L_max), M - 1])
    except (linalg.LinAlgError, ValueError) as exc:
        raise EigFailure(f"symmetric eigensolver failed: {exc}") from exc
    if not np.all(np.isfinite(lam)):
        raise EigFailure("eigensolver returned non-finite values")
    return _assemble(grid, lam, psi, L_max, {"method": "dense"})


def default_sketch_size(L_max: int, M: int) -> int:
    return int(min(M, max(2 * L_max + 10, 99)))


def randomized_eig(
    S: MatrixizedCovariance,
    q: Optional[int],
    L_max: int,
    grid: EvaluationGrid,
    seed: int = 0,
) -> EigenSystem:
    """Random-projection eigensolver.

    Draws ``Q`` (``M x q``, iid ``N(0, 1/q)``), forms ``Y = Sigma Q`` through
    the provider and ``Sigma' = Q' Y``.  Eigenvectors are lifted with the
    Nystrom factor ``F = Y V D^{-1/2}`` so that ``Sigma ~ F F'``; the left
    singular vectors of ``F`` are orthonormal and exact whenever
    ``rank(Sigma) <= q``.
    """
    if q is None:
        q = default_sketch_size(L_max, S.dim)
    q = int(q)
    if q < L_max:
        raise SketchTooSmall(f"sketch size q={q} is below L_max={L_max}")
    if q < 1:
        raise SketchTooSmall("sketch size must be positive")
    if S.dim != grid.n_inside:
        raise ValueError("covariance dimension does not match the grid's in-mask node count")
    rng = np.random.default_rng(seed)
    Q = rng.normal(0.0, np.sqrt(1.0 / q), size=(S.dim, q))
    Y = S.matmat(Q)
    small = Q.T @ Y
    small = 0.5 * (small + small.T)
    try:
        d, V = linalg.eigh(small)
    except linalg.LinAlgError as exc:
        raise EigFailure(f"sketch eigensolver failed: {exc}") from exc
    keep = d > 1e-10 * max(d.max(), 0.0)
    if not np.any(keep):
        return _assemble(grid, np.zeros(0), np.zeros((S.dim, 0)), L_max, {"method": "randomized", "q": q})
    F = Y @ (V[:, keep] / np.sqrt(d[keep]))
    try:
        U, sv, _ = linalg.svd(F, full_matrices=False)
    except linalg.LinAlgError as exc:
        raise EigFailure(f"lift SVD failed: {exc}") from exc
    info = {"method": "randomized", "q": q, "seed": int(seed)}
    return _assemble(grid, sv**2, U, L_max, info)


def eigen_residuals(S: MatrixizedCovariance, eig: EigenSystem) -> np.ndarray:
    """``||Sigma psi - lambda_tilde psi||`` per pair in matrix units (``psi`` unit vectors)."""
    cv = eig.grid.cell_volume
    psi = eig.vectors() * np.sqrt(cv)
    lam_tilde = eig.eigenvalues / cv
    r = S.matmat(psi) - psi * lam_tilde
    return np.linalg.norm(r, axis=0)


def select_components_fve(eig: Union[EigenSystem, np.ndarray], threshold: float) -> int:
    """Smallest ``L`` whose cumulative explained fraction reaches ``threshold``."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    if isinstance(eig, EigenSystem):
        fve = eig.fve
    else:
        lam = np.asarray(eig, dtype=float)
        lam = lam[lam > 0]
        fve = np.cumsum(lam) / lam.sum()
    if len(fve) == 0:
        return 0
    return int(min(len(fve), np.searchsorted(fve, threshold - 1e-12) + 1))
