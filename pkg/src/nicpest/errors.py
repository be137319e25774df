"""Domain exception types shared across the pipeline.

Every error carries a stable machine-readable ``code`` used by the CLI
when mapping failures to exit statuses.
"""


class PipelineError(Exception):
    """Base class for all domain errors raised by this package."""

    code = "E_RUNTIME"


class ConfigInvalid(PipelineError):
    code = "E_VALIDATION"


class EmptySignal(PipelineError):
    code = "E_VALIDATION"


class DegenerateSignal(PipelineError):
    """Signal has no dynamic range (max equals min)."""

    code = "E_VALIDATION"


class NoBeatsFound(PipelineError):
    code = "E_VALIDATION"


class TooShort(PipelineError):
    """Recording holds fewer usable beats than one entry requires."""

    code = "E_VALIDATION"


class RankDeficientInput(PipelineError):
    """Input block Hankel matrix is not persistently exciting."""

    code = "E_VALIDATION"


class UnstableModel(PipelineError):
    """Identified dynamics matrix has spectral radius >= 1.05."""

    code = "E_VALIDATION"


class AllNegligible(PipelineError):
    """Every singular value is below the detection floor."""

    code = "E_VALIDATION"


class SingularSystem(PipelineError):
    """Normal equations are singular and no regularizer was given."""

    code = "E_VALIDATION"


class MaxIterations(PipelineError):
    """Iterative solver exhausted its iteration budget."""

    code = "E_RUNTIME"


class IllConditionedKernel(PipelineError):
    code = "E_VALIDATION"


class RegistryMismatch(PipelineError):
    """Feature vector was produced under a different feature registry."""

    code = "E_VALIDATION"


class InsufficientModels(PipelineError):
    """Database holds fewer models than the scenario needs."""

    code = "E_VALIDATION"


class NoLandmarks(PipelineError):
    """Pulse contains no detectable peak candidates."""

    code = "E_VALIDATION"


class TooFew(PipelineError):
    """Not enough samples for the requested statistic."""

    code = "E_VALIDATION"


class Degenerate(PipelineError):
    """Statistic undefined for constant input."""

    code = "E_VALIDATION"


class MissingPatientIds(PipelineError):
    code = "E_VALIDATION"
