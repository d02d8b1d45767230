"""Exception types shared across the dfxtrain package."""


class DfxError(Exception):
    """Base class for all dfxtrain errors."""


class NonFiniteInput(DfxError):
    """A NaN or infinity reached an operation that requires finite values."""


class InvalidBitWidth(DfxError):
    """Requested mantissa bit width is outside the supported range."""


class ExponentOverflow(DfxError):
    """A normalized exponent exceeded the binary32 maximum of 127."""


class ShapeMismatch(DfxError):
    """Operand shapes are incompatible."""


class AccumulatorOverflow(DfxError):
    """An inner dimension is too large for exact int32 accumulation."""


class DegenerateBatch(DfxError):
    """Normalization statistics requested over fewer than two values."""


class CacheMismatch(DfxError):
    """A backward pass received a cache from a different forward pass."""


class NonPositiveInput(DfxError):
    """fxp_rsqrt requires a strictly positive argument."""


class LearningRateTooLarge(DfxError):
    """A fixed learning rate violates the convergence constraint."""


class DatasetNotFound(DfxError):
    """The configured dataset path does not exist."""


class ConfigInvalid(DfxError):
    """A run configuration failed validation."""


class MalformedIdx(DfxError):
    """An IDX file is truncated or has a bad magic number."""


class DimMismatch(DfxError):
    """Image and label counts of an IDX dataset disagree."""


class UnknownSuite(DfxError):
    """`verify` was asked for a suite that does not exist."""
