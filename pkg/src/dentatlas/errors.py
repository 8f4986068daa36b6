"""Exception hierarchy. The CLI maps each family onto an exit status."""


class DentAtlasError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(DentAtlasError, ValueError):
    exit_code = 2


class InvalidArgument(DentAtlasError, ValueError):
    exit_code = 3


class DataError(DentAtlasError):
    exit_code = 3


class DegenerateInput(DataError, ValueError):
    pass


class EmptyForeground(DataError, ValueError):
    pass


class MissingLabel(DataError, KeyError):
    def __init__(self, label):
        self.label = int(label)
        super().__init__(f"label {self.label} has no entry in the reassignment table")

    def __str__(self):
        return self.args[0]


class GenerationFailure(DataError):
    pass


class NumericalFailure(DentAtlasError):
    exit_code = 4


class RegistrationFailure(NumericalFailure):
    def __init__(self, message, subject=None):
        self.subject = subject
        if subject is not None:
            message = f"subject {subject}: {message}"
        super().__init__(message)


class InversionFailure(NumericalFailure):
    def __init__(self, residual):
        self.residual = float(residual)
        super().__init__(f"field inversion did not converge (residual {self.residual:.3g} voxel)")


class AveragingFailure(NumericalFailure):
    pass


class AlignmentFailure(NumericalFailure):
    pass


class NotReachable(DataError, ValueError):
    pass
