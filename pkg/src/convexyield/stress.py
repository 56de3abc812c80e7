"""Voigt stress algebra and specimen geometry.

Conventions used throughout the package:

* Voigt order ``(11, 22, 33, 12, 23, 13)`` holding the raw tensor components
  (no factor 2 on shears), in MPa for stresses.
* Material axes ``1 = xi`` (axial), ``2 = theta`` (circumferential),
  ``3 = rho`` (radial / through-thickness of the extrusion).
* A specimen frame ``{x, y, z}`` has ``y`` along the loading axis, ``x`` the
  width direction and ``z`` the thickness direction.  For planes A and B the
  thickness is the plane normal; for plane C the plane normal is the width.
"""

import jax.numpy as jnp
import numpy as np

from .spectral import principal_values, tensor_to_voigt, voigt_to_tensor

ANISO_KEYS = ("c12", "c13", "c21", "c23", "c31", "c32", "c44", "c55", "c66")

#: deviatoric projector acting on Voigt vectors
T_DEV = np.array(
    [
        [2.0, -1.0, -1.0, 0.0, 0.0, 0.0],
        [-1.0, 2.0, -1.0, 0.0, 0.0, 0.0],
        [-1.0, -1.0, 2.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 3.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 3.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, 3.0],
    ]
) / 3.0

MATERIAL_AXES = {"xi": 0, "theta": 1, "rho": 2}

# plane -> (axis the angle is measured from, axis it rotates toward, plane normal)
PLANES = {
    "A": ("xi", "theta", "rho"),
    "B": ("xi", "rho", "theta"),
    "C": ("theta", "rho", "xi"),
}

# whether the plane normal is the specimen thickness; plane-C specimens are
# thin in-plane and wide along the extrusion axis (this is the only reading
# that reproduces the published Hill-48 calibration of the data set)
NORMAL_IS_THICKNESS = {"A": True, "B": True, "C": False}

__all__ = [
    "ANISO_KEYS",
    "PLANES",
    "T_DEV",
    "build_L",
    "deviator",
    "principal_values",
    "rotate_voigt",
    "specimen_rotation",
    "tensor_to_voigt",
    "uniaxial_stress",
    "voigt_to_tensor",
]


def deviator(sigma):
    """Deviatoric part of a Voigt stress (batched over leading axes)."""
    return jnp.asarray(sigma) @ T_DEV.T


def build_L(c):
    """Linear transformation ``L = C T`` from nine anisotropy coefficients.

    ``c`` is a sequence ordered as :data:`ANISO_KEYS` or a mapping with those
    keys.  All coefficients equal to one gives ``L == T_DEV``.
    """
    if isinstance(c, dict):
        c = [c[k] for k in ANISO_KEYS]
    c = jnp.asarray(c)
    c12, c13, c21, c23, c31, c32, c44, c55, c66 = (c[..., k] for k in range(9))
    z = jnp.zeros_like(c12)
    rows = [
        [c12 + c13, -2.0 * c12 + c13, c12 - 2.0 * c13, z, z, z],
        [-2.0 * c21 + c23, c21 + c23, c21 - 2.0 * c23, z, z, z],
        [-2.0 * c31 + c32, c31 - 2.0 * c32, c31 + c32, z, z, z],
        [z, z, z, 3.0 * c44, z, z],
        [z, z, z, z, 3.0 * c55, z],
        [z, z, z, z, z, 3.0 * c66],
    ]
    return jnp.stack([jnp.stack(r, axis=-1) for r in rows], axis=-2) / 3.0


def specimen_rotation(plane, angle):
    """Rotation whose columns are the specimen axes (x, y, z) in material axes.

    ``angle`` is in radians and measured inside ``plane`` from its first axis
    toward its second (see :data:`PLANES`).  ``y`` is the loading axis, ``x``
    the width and ``z`` the thickness direction (see
    :data:`NORMAL_IS_THICKNESS`).  The triad is right-handed.
    """
    key = str(plane).upper()
    try:
        first, second, normal = PLANES[key]
    except KeyError:
        raise ValueError(f"unknown plane {plane!r}; expected one of {sorted(PLANES)}") from None
    e = np.eye(3)
    y = np.cos(angle) * e[MATERIAL_AXES[first]] + np.sin(angle) * e[MATERIAL_AXES[second]]
    n = e[MATERIAL_AXES[normal]]
    if NORMAL_IS_THICKNESS[key]:
        z = n
        x = np.cross(y, z)
    else:
        x = n
        z = np.cross(x, y)
    return np.column_stack([x, y, z])


def uniaxial_stress(R, magnitude):
    """Voigt form of ``magnitude * d (x) d`` with ``d = R e_y``."""
    d = np.asarray(R)[:, 1]
    return magnitude * np.array(
        [d[0] ** 2, d[1] ** 2, d[2] ** 2, d[0] * d[1], d[1] * d[2], d[0] * d[2]]
    )


def rotate_voigt(v, Q):
    """Voigt form of ``Q S Q^T``."""
    S = voigt_to_tensor(v)
    Q = jnp.asarray(Q)
    return tensor_to_voigt(Q @ S @ Q.T)
