"""Exception hierarchy shared by every stage of the d-FPCA pipeline."""


class DfpcaError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ParseError(DfpcaError):
    exit_code = 2


class DegenerateAxis(DfpcaError):
    exit_code = 3


class ObservationOutsideGrid(DfpcaError):
    exit_code = 3


class GridNotEquispaced(DfpcaError):
    exit_code = 3


class OutOfDomain(DfpcaError):
    exit_code = 3


class AllWeightsZero(DfpcaError):
    exit_code = 4


class BandwidthTooSmall(AllWeightsZero):
    """Raised when kernel windows stay empty after every fallback enlargement."""

    def __init__(self, n_nodes: int, message: str | None = None):
        self.n_nodes = int(n_nodes)
        super().__init__(message or f"{self.n_nodes} grid node(s) have empty kernel windows")


class NoPairs(DfpcaError):
    exit_code = 4


class BlockTooSmall(DfpcaError):
    exit_code = 5


class HaloTooSmall(DfpcaError):
    exit_code = 5


class EigFailure(DfpcaError):
    exit_code = 6


class SketchTooSmall(DfpcaError):
    exit_code = 6


class SingularCovariance(DfpcaError):
    exit_code = 7


class VersionMismatch(DfpcaError):
    exit_code = 8
