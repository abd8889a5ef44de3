"""Exception hierarchy shared by all mrxray modules."""


class MrxrayError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MrxrayError):
    """Tensor/image shapes are incompatible; message names the offending axis."""


class GeometryError(MrxrayError):
    """Invalid acquisition geometry or non-realizable output size."""


class ConfigError(MrxrayError):
    """Invalid configuration, spec, split, or file-format parameter."""


class TapeError(MrxrayError):
    """Gradient tape misuse: consumed tape, detached root, missing recording."""


class ContractError(MrxrayError):
    """An operation was called outside its contract (e.g. non-scalar backward root)."""


class LoadError(MrxrayError):
    """A weight bundle, checkpoint, or data file could not be loaded."""


class NumericsError(MrxrayError):
    """Numerical abort: NaN gradients, diverging loss."""
