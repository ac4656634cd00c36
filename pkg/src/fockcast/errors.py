"""Error taxonomy shared by the library and the CLI.

ValidationError maps to CLI exit code 2, NumericalError to exit code 3.
"""


class FockcastError(Exception):
    pass


class ValidationError(FockcastError):
    """Bad configuration, bad arguments, or unusable cache state."""


class NumericalError(FockcastError):
    """A numerical procedure failed on otherwise valid inputs."""


class IntegrationDivergedError(NumericalError):
    pass


class TuningFailedError(NumericalError):
    pass


class InvalidKernelError(NumericalError):
    pass


class NormalizationFailedError(NumericalError):
    pass


class BNotSPDError(NumericalError):
    """Cholesky factorization of the B form failed."""


class UndefinedFrequencyError(NumericalError):
    pass


class InsufficientSpectrumError(NumericalError):
    pass


class DenominatorUnderflowError(NumericalError):
    pass


class MissingUpstreamError(ValidationError):
    pass


class StaleCacheError(ValidationError):
    pass
