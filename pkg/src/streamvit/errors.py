"""Exception types shared across the package."""


class StreamViTError(Exception):
    """Base class for every error raised by streamvit."""


class DimensionError(StreamViTError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(StreamViTError, ValueError):
    """A configuration value is invalid or unsupported."""


class EmptyMemoryError(StreamViTError):
    """Attention was requested over an empty key set."""


class MemoryOrderError(StreamViTError, ValueError):
    """A memory entry was pushed with a non-increasing frame index."""


class FormatError(StreamViTError, ValueError):
    """A binary or text file does not match its declared layout."""
