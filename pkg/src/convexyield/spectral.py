"""Eigenvalues of symmetric 3x3 tensors in Voigt form and their derivatives.

Eigenvalues come from the trigonometric solution of the characteristic cubic.
The derivative rule uses eigenprojectors ``n_i (x) n_i``; when eigenvalues
coincide (gap below ``1e-8 * |S|``) the rows of the degenerate cluster are
averaged, which is the exact derivative of any symmetric function of the
eigenvalues.  Second derivatives are available away from degenerate points.
"""

import jax
import jax.numpy as jnp
import numpy as np

DEGENERACY_TOL = 1e-8

_SHEAR_PAIRS = ((0, 1), (1, 2), (0, 2))


def voigt_to_tensor(v):
    """(..., 6) Voigt vector -> (..., 3, 3) symmetric tensor."""
    v = jnp.asarray(v)
    s11, s22, s33, s12, s23, s13 = (v[..., k] for k in range(6))
    row0 = jnp.stack([s11, s12, s13], axis=-1)
    row1 = jnp.stack([s12, s22, s23], axis=-1)
    row2 = jnp.stack([s13, s23, s33], axis=-1)
    return jnp.stack([row0, row1, row2], axis=-2)


def tensor_to_voigt(S):
    S = jnp.asarray(S)
    return jnp.stack(
        [S[..., 0, 0], S[..., 1, 1], S[..., 2, 2], S[..., 0, 1], S[..., 1, 2], S[..., 0, 2]],
        axis=-1,
    )


def _trig_eigenvalues(v):
    s11, s22, s33, s12, s23, s13 = (v[..., k] for k in range(6))
    q = (s11 + s22 + s33) / 3.0
    b11, b22, b33 = s11 - q, s22 - q, s33 - q
    off = s12**2 + s23**2 + s13**2
    p2 = (b11**2 + b22**2 + b33**2 + 2.0 * off) / 6.0
    zero = p2 <= 0.0
    p = jnp.sqrt(jnp.where(zero, 1.0, p2))
    det_b = (
        b11 * (b22 * b33 - s23**2)
        - s12 * (s12 * b33 - s23 * s13)
        + s13 * (s12 * s23 - b22 * s13)
    )
    r = jnp.clip(det_b / (2.0 * p**3), -1.0, 1.0)
    phi = jnp.arccos(r) / 3.0
    lam1 = q + 2.0 * p * jnp.cos(phi)
    lam3 = q + 2.0 * p * jnp.cos(phi + 2.0 * jnp.pi / 3.0)
    lam2 = 3.0 * q - lam1 - lam3
    lam = jnp.stack([lam1, lam2, lam3], axis=-1)
    lam = jnp.where(zero[..., None], q[..., None] * jnp.ones_like(lam), lam)
    # trig ordering is descending up to rounding; enforce it
    lam = -jnp.sort(-lam, axis=-1)
    return _deflate(v, lam)


def _deflate(v, lam):
    """Recompute the clustered pair from a 2x2 deflation.

    The trig solution loses about sqrt(eps) near a double root.  The most
    isolated eigenvalue is accurate; its eigenvector is the largest cross
    product of rows of ``S - lam I`` and the remaining pair follows from the
    2x2 block on its orthogonal complement without cancellation.
    """
    S = voigt_to_tensor(v)
    upper = (lam[..., 0] - lam[..., 1]) < (lam[..., 1] - lam[..., 2])
    iso = jnp.where(upper, lam[..., 2], lam[..., 0])
    A = S - iso[..., None, None] * jnp.eye(3)
    c = jnp.stack([jnp.cross(A[..., 0, :], A[..., 1, :]),
                   jnp.cross(A[..., 1, :], A[..., 2, :]),
                   jnp.cross(A[..., 0, :], A[..., 2, :])], axis=-2)
    nrm = jnp.sum(c * c, axis=-1)
    k = jnp.argmax(nrm, axis=-1)
    n2 = jnp.take_along_axis(nrm, k[..., None], axis=-1)[..., 0]
    scale2 = jnp.sum(A * A, axis=(-2, -1)) ** 2
    ok = n2 > 1e-6 * scale2
    n = jnp.take_along_axis(c, k[..., None, None], axis=-2)[..., 0, :]
    n = n / jnp.sqrt(jnp.where(ok, n2, 1.0))[..., None]
    # any unit vector orthogonal to n, then the third by cross product
    j = jnp.argmin(jnp.abs(n), axis=-1)
    e = jax.nn.one_hot(j, 3, dtype=n.dtype)
    u = e - jnp.sum(e * n, axis=-1, keepdims=True) * n
    u = u / jnp.linalg.norm(u, axis=-1, keepdims=True)
    w = jnp.cross(n, u)
    a = jnp.einsum("...i,...ij,...j->...", u, S, u)
    d = jnp.einsum("...i,...ij,...j->...", w, S, w)
    b = jnp.einsum("...i,...ij,...j->...", u, S, w)
    mid = 0.5 * (a + d)
    half = 0.5 * jnp.hypot(a - d, 2.0 * b)
    pair_hi, pair_lo = mid + half, mid - half
    polished = jnp.where(upper[..., None],
                         jnp.stack([pair_hi, pair_lo, iso], axis=-1),
                         jnp.stack([iso, pair_hi, pair_lo], axis=-1))
    return jnp.where(ok[..., None], polished, lam)


def eigenvalue_jacobian(v):
    """d(s1, s2, s3)/d(Voigt components), shape (..., 3, 6).

    Rows are ``n_i (x) n_i`` in Voigt layout, i.e. shear columns carry
    ``2 n_a n_b`` because each off-diagonal entry appears twice in the tensor.
    """
    v = jnp.asarray(v)
    S = voigt_to_tensor(v)
    w, V = jnp.linalg.eigh(S)
    w = w[..., ::-1]
    V = V[..., :, ::-1]
    n = jnp.swapaxes(V, -1, -2)  # n[..., i, :] is the i-th eigenvector
    diag = n**2
    shear = jnp.stack([2.0 * n[..., a] * n[..., b] for a, b in _SHEAR_PAIRS], axis=-1)
    J = jnp.concatenate([diag, shear], axis=-1)

    scale = jnp.sqrt(jnp.sum(S**2, axis=(-2, -1)))
    tol = DEGENERACY_TOL * scale
    g12 = (w[..., 0] - w[..., 1]) <= tol
    g23 = (w[..., 1] - w[..., 2]) <= tol
    all3 = g12 & g23

    mean_all = jnp.mean(J, axis=-2, keepdims=True) * jnp.ones_like(J)
    m12 = 0.5 * (J[..., 0, :] + J[..., 1, :])
    J12 = jnp.stack([m12, m12, J[..., 2, :]], axis=-2)
    m23 = 0.5 * (J[..., 1, :] + J[..., 2, :])
    J23 = jnp.stack([J[..., 0, :], m23, m23], axis=-2)

    out = jnp.where(g23[..., None, None], J23, J)
    out = jnp.where(g12[..., None, None], J12, out)
    out = jnp.where(all3[..., None, None], mean_all, out)
    return out


@jax.custom_jvp
def principal_values(v):
    """Eigenvalues (s1 >= s2 >= s3) of the symmetric tensor with Voigt form ``v``.

    Voigt order is (11, 22, 33, 12, 23, 13) holding raw tensor components.
    Leading batch dimensions are supported.
    """
    return _trig_eigenvalues(jnp.asarray(v))


@principal_values.defjvp
def _principal_values_jvp(primals, tangents):
    (v,), (dv,) = primals, tangents
    lam = principal_values(v)
    J = eigenvalue_jacobian(v)
    return lam, jnp.einsum("...ij,...j->...i", J, dv)


def principal_values_np(v):
    """NumPy convenience wrapper returning a float array."""
    return np.asarray(principal_values(jnp.asarray(v, dtype=jnp.float64)))
