"""Exception types shared across the package."""


class AnisoAlignError(Exception):
    """Base class for all package errors."""


class InvalidInput(AnisoAlignError):
    """Arguments violate an operation's preconditions."""


class InsufficientSamples(AnisoAlignError):
    """Too few samples to compute the requested statistic."""


class FormatError(AnisoAlignError):
    """A binary file does not conform to its declared layout."""


class PairMismatch(AnisoAlignError):
    """Two index-aligned sets disagree in length or dimension."""


class DegenerateRow(AnisoAlignError):
    """A row cannot be normalized (norm numerically zero)."""

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"row {index} has numerically zero norm")


class InvalidSplit(AnisoAlignError):
    """A split specification yields an empty part."""


class DegenerateSpectrum(AnisoAlignError):
    """A spectrum has too little usable structure for the statistic."""


class DegenerateCovariance(AnisoAlignError):
    """A covariance matrix is rank-deficient beyond repair by flooring."""


class DegenerateResidual(AnisoAlignError):
    """Residual covariance has zero trace."""


class InvalidFrame(AnisoAlignError):
    """A basis fails its orthonormality requirement."""


class RequiresPairs(AnisoAlignError):
    """Operation needs index-aligned paired data."""


class InvalidConfig(AnisoAlignError):
    """A configuration tree is malformed or has unknown keys."""


class TrainingDiverged(AnisoAlignError):
    """Training produced a non-finite loss."""


class DependencyMissing(AnisoAlignError):
    """A pipeline stage requires an artifact that was not produced yet."""

    def __init__(self, stage, message=None):
        self.stage = stage
        super().__init__(message or f"missing artifact from stage '{stage}'")
