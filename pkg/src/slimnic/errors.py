"""Exception types raised across the package."""


class SlimNICError(Exception):
    """Base class for all package errors."""


class DimensionError(SlimNICError, ValueError):
    """Operand shapes do not line up."""


class NumericError(SlimNICError, ArithmeticError):
    """Non-finite values or an argument outside an operation's domain."""


class ContractError(SlimNICError, ValueError):
    """A precondition of an operation was violated."""


class GeometryError(SlimNICError, ValueError):
    """Spatial size incompatible with the model's down/upsampling."""


class DegeneratePlanError(SlimNICError):
    """A keep plan would remove every channel of a layer."""

    def __init__(self, layer: str):
        super().__init__(f"degenerate plan: layer {layer} keeps zero channels")
        self.layer = layer


class PlanMismatchError(SlimNICError, ValueError):
    """A keep plan does not belong to the model it is applied to."""


class TrainingError(SlimNICError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str = "non-finite loss", report=None):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.report = report


class FormatError(SlimNICError, ValueError):
    """Malformed image or model container file."""
