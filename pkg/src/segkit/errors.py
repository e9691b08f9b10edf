"""Exception hierarchy shared by every module."""


class SegkitError(Exception):
    """Base class for all errors raised by segkit."""


class DimensionError(SegkitError, ValueError):
    """Tensor shapes are incompatible."""


class DTypeError(SegkitError, TypeError):
    """Tensor dtypes do not match or are unsupported."""


class ConfigError(SegkitError, ValueError):
    """An operation or model was configured with invalid values."""


class StateError(SegkitError, RuntimeError):
    """Required mutable state is missing or inconsistent."""


class UsageError(SegkitError, ValueError):
    """An API was called in a way its contract forbids."""


class LabelError(SegkitError, ValueError):
    """Label values fall outside the valid class range or label map."""


class FormatError(SegkitError, ValueError):
    """A file could not be parsed.

    ``offset`` is the byte offset of the problem when known, ``section``
    names the checkpoint section for checkpoint files.
    """

    def __init__(self, message, offset=None, section=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        if section is not None:
            message = f"{message} [section {section!r}]"
        super().__init__(message)
        self.offset = offset
        self.section = section


class CoverageError(SegkitError, ValueError):
    """Tiles fail to cover the requested extent."""

    def __init__(self, message, bbox=None):
        super().__init__(message)
        self.bbox = bbox


class DivergenceError(SegkitError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.value = value
