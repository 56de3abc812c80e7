"""Deviatoric (pi-) plane maps and yield-locus tracing.

The forward map rotates projected deviatoric scalars ``(s1, s2, s3)`` so the
hydrostatic axis drops out and scales by sqrt(3/2); a uniaxial deviator
``(2/3, -1/3, -1/3)`` lands at radius 1, polar angle -pi/6, and the plane
radius of a deviator in its eigenbasis equals its von Mises stress.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .models import ModelError, effective_residual
from .spectral import tensor_to_voigt

_R3 = np.sqrt(3.0)

# rows: pi1, pi2.  Product of the two rotations and the sqrt(3/2) scaling.
FORWARD = np.array([[_R3 / 2.0, 0.0, -_R3 / 2.0], [-0.5, 1.0, -0.5]])
INVERSE = np.array([[1.0 / _R3, -1.0 / 3.0], [0.0, 2.0 / 3.0], [-1.0 / _R3, -1.0 / 3.0]])

RADIUS_BRACKET = (1e-3, 1e2)


class LocusError(RuntimeError):
    def __init__(self, message, angle=None):
        super().__init__(message)
        self.angle = angle


@dataclass(frozen=True)
class PiPoint:
    pi1: float
    pi2: float

    @property
    def radius(self):
        return float(np.hypot(self.pi1, self.pi2))

    @property
    def angle(self):
        return float(np.arctan2(self.pi2, self.pi1))

    @classmethod
    def polar(cls, radius, angle):
        return cls(radius * np.cos(angle), radius * np.sin(angle))


def to_pi_plane(s_tilde):
    """(..., 3) projected deviatoric scalars -> (..., 2) plane coordinates."""
    return np.asarray(s_tilde, dtype=float) @ FORWARD.T


def from_pi_plane(p):
    """(..., 2) plane coordinates -> (..., 3) zero-sum projected scalars."""
    return np.asarray(p, dtype=float) @ INVERSE.T


def psi_point(psi):
    """Projected scalars on the unit circle parameterized by psi (angle psi - pi/6)."""
    return (2.0 / 3.0) * np.array([np.cos(psi), np.cos(psi - 2 * np.pi / 3), np.cos(psi + 2 * np.pi / 3)])


def resolve_basis(basis="material", specimens=None):
    """Orthonormal projection basis as a 3x3 matrix whose rows are e~1, e~2, e~3.

    ``basis`` is ``"material"``, ``"specimen:ID"`` (e~1 = loading axis,
    e~2 = thickness, e~3 = width) or nine numbers given row-major.
    """
    if isinstance(basis, str):
        key = basis.strip().lower()
        if key == "material":
            return np.eye(3)
        if key.startswith("specimen:"):
            from . import dataset as ds

            sid = int(key.split(":", 1)[1])
            specimens = specimens if specimens is not None else ds.load_specimens()
            (s,) = ds.select(specimens, [sid])
            R = s.rotation
            return np.array([R[:, 1], R[:, 2], R[:, 0]])
        values = [float(v) for v in key.replace(",", " ").split()]
    else:
        values = list(np.asarray(basis, dtype=float).ravel())
    B = np.asarray(values, dtype=float)
    if B.size != 9:
        raise ValueError("basis must be 'material', 'specimen:ID' or nine numbers")
    B = B.reshape(3, 3)
    if not np.allclose(B @ B.T, np.eye(3), atol=1e-10):
        raise ValueError("basis vectors must be orthonormal")
    return B


def stress_from_projection(s_tilde, basis):
    """Voigt stress sum_i s~_i e~_i (x) e~_i for basis rows e~_i."""
    B = np.asarray(basis, dtype=float)
    S = np.einsum("i,ij,ik->jk", np.asarray(s_tilde, dtype=float), B, B)
    return np.asarray(tensor_to_voigt(S))


def trace_locus(model, n_angles=360, basis="material", tol=1e-8):
    """Yield locus f = 0 in the plane spanned by ``basis``; one point per polar angle.

    Each point is a bracketed radial root of ``effective_residual`` with radius
    searched in ``[1e-3, 1e2] * Y0``.  Returns a list of :class:`PiPoint`.
    """
    if int(n_angles) < 8:
        raise ValueError("n_angles must be >= 8")
    B = resolve_basis(basis)
    Y0 = model.Y0
    lo, hi = RADIUS_BRACKET[0] * Y0, RADIUS_BRACKET[1] * Y0
    points = []
    for a in 2 * np.pi * np.arange(int(n_angles)) / int(n_angles):
        unit = stress_from_projection(from_pi_plane([np.cos(a), np.sin(a)]), B)

        def f(rho, unit=unit):
            return effective_residual(model, rho * unit)

        try:
            f_lo, f_hi = f(lo), f(hi)
        except ModelError as exc:
            raise LocusError(f"angle {a:.6g}: {exc}", a) from exc
        if not (f_lo < 0.0 < f_hi):
            raise LocusError(f"yield radius not bracketed at angle {a:.6g}", a)
        rho = brentq(f, lo, hi, xtol=tol * Y0 * 1e-3, rtol=4 * np.finfo(float).eps, maxiter=200)
        if abs(f(rho)) > tol * Y0:
            raise LocusError(f"radial root inaccurate at angle {a:.6g}", a)
        points.append(PiPoint.polar(rho, a))
    return points


def is_convex_polygon(points):
    """True when all consecutive edge cross products share a sign."""
    P = np.array([[p.pi1, p.pi2] for p in points])
    e = np.roll(P, -1, axis=0) - P
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    return bool(np.all(cross > 0) or np.all(cross < 0))


def write_locus_csv(points, path, metadata=()):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in metadata:
            fh.write(f"# {line}\n")
        fh.write("angle,pi1,pi2,radius\n")
        for p in points:
            fh.write(f"{p.angle:.17g},{p.pi1:.17g},{p.pi2:.17g},{p.radius:.17g}\n")
