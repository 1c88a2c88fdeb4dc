"""Multi-dimensional functional principal component analysis.

Local linear smoothing of the mean and covariance (direct or binned with
FFT convolutions), Riemann-sum and random-projection eigendecomposition,
PACE and integration scores, cross-validated bandwidths and simulation
utilities.
"""

from dfpca.core import (
    AffineMap,
    Bandwidth,
    BinnedData,
    EvaluationGrid,
    FunctionalDataset,
    SurfaceEstimate,
    linear_bin,
    normalize_domain,
)
from dfpca.eigen import EigenSystem, MatrixizedCovariance, dense_eig, matrixize, randomized_eig, select_components_fve
from dfpca.errors import DfpcaError
from dfpca.fft_smoother import BlockPlan, FftCovariance, blockwise_apply, fft_covariance, fft_local_linear
from dfpca.pipeline import FitConfig, FitResult, fit
from dfpca.scores import FpcaModel, holdout_prediction_error, integration_scores, pace_scores, reconstruct
from dfpca.smoother import estimate_covariance, estimate_diag_plus_noise, estimate_mean

__version__ = "0.1.0"

__all__ = [
    "AffineMap",
    "Bandwidth",
    "BinnedData",
    "BlockPlan",
    "DfpcaError",
    "EigenSystem",
    "EvaluationGrid",
    "FftCovariance",
    "FitConfig",
    "FitResult",
    "FpcaModel",
    "FunctionalDataset",
    "MatrixizedCovariance",
    "SurfaceEstimate",
    "blockwise_apply",
    "dense_eig",
    "estimate_covariance",
    "estimate_diag_plus_noise",
    "estimate_mean",
    "fft_covariance",
    "fft_local_linear",
    "fit",
    "holdout_prediction_error",
    "integration_scores",
    "linear_bin",
    "matrixize",
    "normalize_domain",
    "pace_scores",
    "randomized_eig",
    "reconstruct",
    "select_components_fve",
]
