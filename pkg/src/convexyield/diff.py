"""Differentiation entry points: stress gradients and (second-order) parameter gradients.

JAX forward/reverse mode replaces hand-written dual numbers.  Eigenvalues and
the ray scale carry custom derivative rules (eigenprojectors and the
implicit-function rule respectively), so differentiation never passes
through iterative solver internals.
"""

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from .models import stress_gradient
from .spectral import eigenvalue_jacobian


class GradientError(FloatingPointError):
    def __init__(self, index, message):
        super().__init__(message)
        self.index = index


def grad_wrt_stress(model, sigma):
    """d f / d sigma of the homogenized residual, 6 Voigt components."""
    return stress_gradient(model, sigma)


def grad_wrt_params(loss_fn, params):
    """Flat gradient of ``loss_fn(params)`` (params may be any pytree).

    Returns ``(flat_grad, unravel)``.  Raises :class:`GradientError` naming the
    first non-finite coordinate.
    """
    flat, unravel = ravel_pytree(params)
    g = np.asarray(jax.grad(lambda f: loss_fn(unravel(f)))(flat))
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise GradientError(int(bad[0]), f"non-finite gradient at parameter index {bad[0]}")
    return g, unravel


def flatten(params):
    return ravel_pytree(params)


def eigen_jacobian(sigma):
    """d(s1, s2, s3) / d(Voigt components) as a NumPy 3x6 array."""
    return np.asarray(eigenvalue_jacobian(jnp.asarray(sigma, dtype=float)))
