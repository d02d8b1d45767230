"""Fully integer neural-network training on a dynamic fixed-point format."""

from .numfmt import (
    NEAREST,
    STOCHASTIC,
    FxpTensor,
    RoundingContext,
    UnpackedFloat,
    inverse_map,
    map_to_fixed,
    renormalize,
    shared_exponent,
    stochastic_round,
    unpack,
)

__version__ = "0.1.0"

__all__ = [
    "NEAREST",
    "STOCHASTIC",
    "FxpTensor",
    "RoundingContext",
    "UnpackedFloat",
    "inverse_map",
    "map_to_fixed",
    "renormalize",
    "shared_exponent",
    "stochastic_round",
    "unpack",
    "__version__",
]
