"""Shared exception types."""


class CondenserError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CondenserError):
    """Operands have incompatible shapes for the requested op."""


class GradientError(CondenserError):
    """Invalid differentiation request (non-scalar loss, off-tape tensor, ...)."""


class DataFormatError(CondenserError):
    """A binary file did not match its documented layout."""


class ConfigError(CondenserError):
    """Bad configuration key or value."""


class NanLossError(CondenserError):
    """Matching loss became NaN; carries the step indices where it happened."""

    def __init__(self, message, *, outer_step=None, inner_step=None, class_id=None,
                 image_lr=None, net_lr=None):
        super().__init__(message)
        self.outer_step = outer_step
        self.inner_step = inner_step
        self.class_id = class_id
        self.image_lr = image_lr
        self.net_lr = net_lr
