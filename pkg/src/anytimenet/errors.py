class AnytimeError(Exception):
    """Base class for all package errors."""


class ShapeError(AnytimeError, ValueError):
    pass


class InputError(AnytimeError, ValueError):
    pass


class GraphStateError(AnytimeError, RuntimeError):
    pass


class ConstructionError(AnytimeError, ValueError):
    pass


class ConfigError(AnytimeError, ValueError):
    pass


class NumericError(AnytimeError, FloatingPointError):
    pass


class DatasetError(AnytimeError, ValueError):
    pass


class FormatError(DatasetError):
    pass


class CheckpointError(AnytimeError, ValueError):
    pass
