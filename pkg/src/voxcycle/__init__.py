"""Volumetric CycleGAN: 3D generator/discriminator, training and NIfTI tooling."""

from .networks import (
    LayerSpec,
    Network,
    NetworkSpec,
    build_discriminator,
    build_generator,
    init_weights,
    parameter_count,
    receptive_field,
)
from .tensor import ConfigurationError, ConvParams, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ConvParams",
    "LayerSpec",
    "Network",
    "NetworkSpec",
    "ShapeError",
    "build_discriminator",
    "build_generator",
    "init_weights",
    "parameter_count",
    "receptive_field",
]
