class ShapeError(ValueError):
    """Tensor or config extents do not fit together."""


class ConfigError(ValueError):
    """A model, attention, or run configuration is invalid."""


class DataFormatError(ValueError):
    """A dataset or checkpoint file is malformed or inconsistent."""
