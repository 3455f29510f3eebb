"""Exception types shared across the package."""


class MsclusterError(Exception):
    """Base class for all package-specific failures."""


class DimensionMismatchError(MsclusterError, ValueError):
    """Sizes of grids, fields, or index sets do not line up."""


class SolverError(MsclusterError, RuntimeError):
    """A linear solve did not reach the required residual."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class EigenError(MsclusterError, RuntimeError):
    """A spectral decomposition failed."""


class RankDeficiencyError(MsclusterError, RuntimeError):
    """The reduced coarse system is (numerically) singular."""

    def __init__(self, message: str, coarse_node: int | None = None):
        super().__init__(message)
        self.coarse_node = coarse_node


class PretrainError(MsclusterError, RuntimeError):
    """Adversary pretraining did not reduce its reconstruction loss."""


class TrainingError(MsclusterError, RuntimeError):
    """Cluster training aborted (non-finite loss or invalid state)."""
