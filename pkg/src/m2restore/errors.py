"""Exception hierarchy shared across the package."""


class M2RestoreError(Exception):
    pass


class ShapeError(M2RestoreError, ValueError):
    """Operand extents are incompatible."""


class ConfigError(M2RestoreError, ValueError):
    """A configuration value is invalid (unknown key, bad variant, groups not dividing C, ...)."""


class ContractError(M2RestoreError, ValueError):
    """A precondition of an operation was violated."""


class DegenerateAxisError(M2RestoreError, ValueError):
    pass


class NumericalError(M2RestoreError, ArithmeticError):
    """Non-finite loss encountered during training."""

    def __init__(self, message, step=None, batch_id=None):
        super().__init__(message)
        self.step = step
        self.batch_id = batch_id


class ProviderNotReadyError(M2RestoreError, RuntimeError):
    pass


class CheckpointFormatError(M2RestoreError):
    pass


class CheckpointIntegrityError(M2RestoreError):
    pass
