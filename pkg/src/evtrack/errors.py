"""Exception types shared across the package."""


class EvtrackError(Exception):
    """Base class for all package errors."""


class FormatError(EvtrackError):
    """A file does not match its declared binary or text layout."""


class ValidationError(EvtrackError):
    """Data parsed correctly but violates a domain invariant."""


class ShapeError(EvtrackError, ValueError):
    pass


class ContractError(EvtrackError):
    """A caller broke an operation's precondition."""


class ConfigError(EvtrackError, ValueError):
    pass


class CheckpointError(EvtrackError):
    pass


class UnsupportedFactorError(ValidationError):
    pass


class BatchTooSmallError(ContractError):
    pass


class DegenerateLossError(ContractError):
    pass


class SingularDenominatorError(EvtrackError):
    """LRP-0 met a zero denominator; the epsilon rule avoids this."""

    def __init__(self, layer: str):
        self.layer = layer
        super().__init__(
            f"singular denominator in layer {layer!r} under LRP-0; use the epsilon rule instead"
        )


class UnsupportedLayerError(EvtrackError):
    pass
