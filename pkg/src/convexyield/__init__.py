"""Convex anisotropic yield functions: phenomenological and neural models,
calibration against uniaxial yield/Lankford data, and material-point tools."""

import jax

jax.config.update("jax_enable_x64", True)

from .stress import (  # noqa: E402
    build_L,
    deviator,
    principal_values,
    specimen_rotation,
    uniaxial_stress,
)
from .models import YieldModel, load_model, save_model  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "YieldModel",
    "build_L",
    "deviator",
    "load_model",
    "principal_values",
    "save_model",
    "specimen_rotation",
    "uniaxial_stress",
]
