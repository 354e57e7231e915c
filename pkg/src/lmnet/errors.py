class LmnetError(Exception):
    """Base class for errors raised by lmnet."""


class ShapeError(LmnetError, ValueError):
    """Tensor extents are incompatible with an operation or a config."""


class SizeError(LmnetError, ValueError):
    """Requested tensor size overflows the addressable range."""


class NonFiniteError(LmnetError, FloatingPointError):
    """A tensor that must be finite contains NaN or Inf."""


class GradientError(LmnetError, RuntimeError):
    """Misuse of the autodiff tape (non-scalar root, non-deterministic f, ...)."""


class ContainerError(LmnetError, ValueError):
    """An LMW weight container is malformed or does not match its config."""


class FusionError(LmnetError, ValueError):
    """A model or branch set cannot be re-parameterized."""
