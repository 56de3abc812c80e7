"""Strain-driven elastoplastic material point: isotropic linear elasticity,
associative flow on the homogenized yield function, Voce hardening.

Strains are Voigt vectors with raw tensor shear components (same layout as
stresses), so ``sigma = C eps`` carries ``2 mu`` on the shear diagonal and a
plastic increment is ``dlam * M g`` with ``M = diag(1, 1, 1, 1/2, 1/2, 1/2)``.
The equivalent plastic strain grows by ``dlam``.
"""

import csv
from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from .models import homogenized
from .spectral import tensor_to_voigt, voigt_to_tensor

_M = np.array([1.0, 1.0, 1.0, 0.5, 0.5, 0.5])
MAX_ITER = 50
RESIDUAL_TOL = 1e-8
_NEWTON_TOL = 1e-13  # dimensionless target, well inside RESIDUAL_TOL
AXIAL = 1  # specimen y-y slot in the Voigt vector
LATERAL = (0, 2, 3, 4, 5)


class ReturnMapError(RuntimeError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = tuple(trace)


class SimulationError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class ElasticConstants:
    E: float = 70000.0
    nu: float = 0.33

    def __post_init__(self):
        if not self.E > 0 or not -1.0 < self.nu < 0.5:
            raise ValueError("need E > 0 and -1 < nu < 0.5")

    def stiffness(self):
        lam = self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu))
        mu = self.E / (2 * (1 + self.nu))
        C = np.zeros((6, 6))
        C[:3, :3] = lam
        C[np.arange(3), np.arange(3)] += 2 * mu
        C[np.arange(3, 6), np.arange(3, 6)] = 2 * mu
        return C


@dataclass(frozen=True)
class VoceParams:
    Y0: float = 525.0
    Rsat: float = 200.0
    gamma: float = 20.0

    def __post_init__(self):
        if self.Rsat < 0 or not self.gamma > 0 or not self.Y0 > 0:
            raise ValueError("need Y0 > 0, Rsat >= 0, gamma > 0")


def voce_yield(eps_bar_p, p=VoceParams()):
    """Saturating flow stress Y0 + Rsat (1 - exp(-gamma eps))."""
    return p.Y0 + p.Rsat * (1.0 - jnp.exp(-p.gamma * eps_bar_p))


@dataclass
class MaterialState:
    strain: np.ndarray = field(default_factory=lambda: np.zeros(6))
    plastic_strain: np.ndarray = field(default_factory=lambda: np.zeros(6))
    eps_bar_p: float = 0.0
    stress: np.ndarray = field(default_factory=lambda: np.zeros(6))

    @property
    def elastic_strain(self):
        return self.strain - self.plastic_strain


# ---------------------------------------------------------------------------
# return map (pure, jitted)


def _return_map_core(spec, params, Y0, C, voce, strain, eps_p, ebar):
    """Backward-Euler return map; returns (stress, eps_p, ebar, dlam, trial_f, info)."""
    Rsat, gam = voce[0], voce[1]
    M = jnp.asarray(_M)

    def flow(e):
        return Y0 + Rsat * (1.0 - jnp.exp(-gam * e))

    def h(s):
        return Y0 * homogenized(spec, params, s / Y0)

    sig_trial = C @ (strain - eps_p)
    f_trial = h(sig_trial) - flow(ebar)

    def resid(z):
        s = z[:6] * Y0
        dl = z[6]
        g = jax.grad(h)(s)
        r_s = (s - sig_trial + dl * (C @ (M * g))) / Y0
        r_f = (h(s) - flow(ebar + dl)) / Y0
        return jnp.concatenate([r_s, r_f[None]])

    def jac(z):
        J = jax.jacfwd(resid)(z)

        def fd(_):
            eps = 1e-7
            cols = jax.vmap(lambda e: (resid(z + eps * e) - resid(z - eps * e)) / (2 * eps))(jnp.eye(7))
            return cols.T

        return jax.lax.cond(jnp.all(jnp.isfinite(J)), lambda _: J, fd, None)

    g0 = jax.grad(h)(sig_trial)
    Hp = Rsat * gam * jnp.exp(-gam * ebar)
    dl0 = jnp.maximum(f_trial, 0.0) / (g0 @ (C @ (M * g0)) + Hp)
    z0 = jnp.concatenate([sig_trial / Y0, dl0[None]])
    r0 = resid(z0)

    def norm(r):
        return jnp.max(jnp.abs(r))

    def body(st):
        z, r, it, trace = st
        dz = jnp.linalg.solve(jac(z), r)

        def ls_cond(c):
            a, zn, rn = c
            bad = ~jnp.isfinite(norm(rn)) | (norm(rn) >= norm(r))
            return bad & (a > 1.0 / 1024)

        def ls_body(c):
            a = 0.5 * c[0]
            zn = z - a * dz
            return a, zn, resid(zn)

        zn = z - dz
        _, zn, rn = jax.lax.while_loop(ls_cond, ls_body, (1.0, zn, resid(zn)))
        trace = trace.at[it].set(norm(rn))
        return zn, rn, it + 1, trace

    plastic = f_trial > 0.0

    def cond(st):
        z, r, it, _ = st
        return plastic & (norm(r) > _NEWTON_TOL) & (it < MAX_ITER) & jnp.isfinite(norm(r))

    trace0 = jnp.full(MAX_ITER, jnp.nan)
    z, r, it, trace = jax.lax.while_loop(cond, body, (z0, r0, 0, trace0))
    s_pl = z[:6] * Y0
    dl = z[6]
    g = jax.grad(h)(s_pl)
    stress = jnp.where(plastic, s_pl, sig_trial)
    eps_p_new = jnp.where(plastic, eps_p + dl * M * g, eps_p)
    ebar_new = jnp.where(plastic, ebar + dl, ebar)
    dl = jnp.where(plastic, dl, 0.0)
    f_end = h(stress) - flow(ebar_new)
    info = {"iterations": jnp.where(plastic, it, 0), "residual": jnp.where(plastic, norm(r), 0.0),
            "trace": trace, "f": f_end, "plastic": plastic}
    return stress, eps_p_new, ebar_new, dl, f_trial, info


_jit_core = jax.jit(_return_map_core, static_argnums=0)


def _voce_arr(voce):
    return jnp.array([voce.Rsat, voce.gamma])


def return_map(state, delta_strain, model, elastic=ElasticConstants(), voce=None):
    """Advance ``state`` by a total-strain increment; returns a new MaterialState."""
    voce = voce or VoceParams(Y0=model.Y0)
    strain = np.asarray(state.strain, dtype=float) + np.asarray(delta_strain, dtype=float)
    out = _jit_core(model.spec, model.params, float(voce.Y0), jnp.asarray(elastic.stiffness()),
                    _voce_arr(voce), jnp.asarray(strain), jnp.asarray(state.plastic_strain),
                    jnp.asarray(float(state.eps_bar_p)))
    stress, eps_p, ebar, dl, _, info = out
    _check(info, dl, voce.Y0)
    return MaterialState(strain, np.asarray(eps_p), float(ebar), np.asarray(stress))


def _check(info, dl, Y0, step=None):
    if not bool(info["plastic"]):
        return
    where = "" if step is None else f" at step {step}"
    trace = [float(v) for v in np.asarray(info["trace"]) if np.isfinite(v)]
    if not abs(float(info["f"])) <= RESIDUAL_TOL * Y0 or not float(info["residual"]) <= RESIDUAL_TOL:
        raise ReturnMapError(
            f"return map did not converge{where}; residual trace {trace}", trace)
    if float(dl) < 0.0:
        raise ReturnMapError(f"negative plastic multiplier {float(dl):.3e}{where} (KKT violation)", trace)


# ---------------------------------------------------------------------------
# uniaxial specimen simulation


def to_material(v_spec, R):
    return tensor_to_voigt(R @ voigt_to_tensor(v_spec) @ R.T)


def to_specimen(v_mat, R):
    return tensor_to_voigt(R.T @ voigt_to_tensor(v_mat) @ R)


@partial(jax.jit, static_argnums=0)
def _lateral_response(spec, params, Y0, C, voce, R, axial, e5, eps_p, ebar):
    """Specimen-frame lateral stresses for trial lateral strains ``e5`` (batched)."""

    def one(e):
        eps_s = jnp.zeros(6).at[AXIAL].set(axial).at[jnp.array(LATERAL)].set(e)
        out = _return_map_core(spec, params, Y0, C, voce, to_material(eps_s, R), eps_p, ebar)
        sig_s = to_specimen(out[0], R)
        return sig_s[jnp.array(LATERAL)] / Y0, out

    return jax.vmap(one)(e5)


@dataclass
class Trajectory:
    rows: list
    rotation: np.ndarray

    COLUMNS = ("step", "axial_strain", "axial_stress", "ep_xx", "ep_yy", "ep_zz",
               "ep_xy", "ep_yz", "ep_xz", "eps_bar_p", "f")

    def array(self):
        return np.array([[r[c] for c in self.COLUMNS] for r in self.rows])

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def write_csv(self, path, header_lines=()):
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["step"]] + [f"{r[c]:.17g}" for c in self.COLUMNS[1:]])


def simulate_uniaxial(model, rotation, max_axial_strain, steps, elastic=ElasticConstants(),
                      voce=None, stress_tol=1e-10):
    """Axial strain ramp along specimen ``y`` with all other specimen-frame
    stresses driven to zero by an outer Newton loop (FD Jacobian).

    ``rotation`` is the specimen rotation (columns x, y, z in material axes).
    ``stress_tol`` is relative to Y0.
    """
    if int(steps) < 1:
        raise ValueError("steps must be >= 1")
    voce = voce or VoceParams(Y0=model.Y0)
    R = jnp.asarray(rotation, dtype=float)
    C = jnp.asarray(elastic.stiffness())
    Y0 = float(voce.Y0)
    varr = _voce_arr(voce)
    nu = elastic.nu
    state = MaterialState()
    rows = [_row(0, 0.0, state, np.asarray(R), voce)]
    if max_axial_strain == 0:
        return Trajectory(rows, np.asarray(R))

    e5 = np.zeros(5)
    de5 = np.zeros(5)
    h_fd = 1e-9
    for k in range(1, int(steps) + 1):
        axial = max_axial_strain * k / steps
        e = e5 + de5 if k > 1 else np.array([-nu, -nu, 0, 0, 0]) * axial
        eps_p = jnp.asarray(state.plastic_strain)
        ebar = jnp.asarray(state.eps_bar_p)
        converged = False
        for _ in range(30):
            batch = np.vstack([e, e + h_fd * np.eye(5)])
            F, outs = _lateral_response(model.spec, model.params, Y0, C, varr, R, axial,
                                        jnp.asarray(batch), eps_p, ebar)
            F = np.asarray(F)
            if not np.all(np.isfinite(F[0])):
                raise SimulationError(f"non-finite stress at step {k}", k)
            if np.max(np.abs(F[0])) <= stress_tol:
                converged = True
                break
            J = (F[1:] - F[0]).T / h_fd
            e = e - np.linalg.solve(J, F[0])
        if not converged:
            raise SimulationError(
                f"uniaxial stress iteration did not converge at step {k} "
                f"(lateral stress {np.max(np.abs(F[0])) * Y0:.3e} MPa)", k)
        out = jax.tree_util.tree_map(lambda a: a[0], outs)
        stress, eps_p_new, ebar_new, dl, _, info = out
        try:
            _check(info, dl, Y0, step=k)
        except ReturnMapError as exc:
            raise SimulationError(str(exc), k) from exc
        eps_s = np.zeros(6)
        eps_s[AXIAL] = axial
        eps_s[list(LATERAL)] = e
        state = MaterialState(np.asarray(to_material(jnp.asarray(eps_s), R)), np.asarray(eps_p_new),
                              float(ebar_new), np.asarray(stress))
        rows.append(_row(k, axial, state, np.asarray(R), voce, float(info["f"])))
        de5 = e - e5
        e5 = e
    return Trajectory(rows, np.asarray(R))


def _row(k, axial, state, R, voce, f=None):
    ep = np.asarray(to_specimen(jnp.asarray(state.plastic_strain), jnp.asarray(R)))
    sig = np.asarray(to_specimen(jnp.asarray(state.stress), jnp.asarray(R)))
    if f is None:
        f = -float(voce_yield(state.eps_bar_p, voce))
    return {
        "step": k, "axial_strain": axial, "axial_stress": float(sig[AXIAL]),
        "ep_xx": ep[0], "ep_yy": ep[1], "ep_zz": ep[2], "ep_xy": ep[3], "ep_yz": ep[4],
        "ep_xz": ep[5], "eps_bar_p": state.eps_bar_p, "f": f,
    }


def plastic_strain_ratio(traj, start=None):
    """Slopes of ep_xx and ep_zz against ep_yy after yield, their ratio and R^2 values."""
    ep_y = traj.column("ep_yy")
    mask = np.abs(ep_y) > 0
    if start is not None:
        mask &= np.arange(len(ep_y)) >= start
    if mask.sum() < 3:
        raise ValueError("need at least three post-yield points")
    out = {}
    for name in ("ep_xx", "ep_zz"):
        y = traj.column(name)[mask]
        x = ep_y[mask]
        A = np.column_stack([x, np.ones_like(x)])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        ss_res = float(np.sum((y - A @ coef) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        out[name] = (float(coef[0]), 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0)
    out["ratio"] = out["ep_xx"][0] / out["ep_zz"][0]
    return out


def von_mises_uniaxial_stress(strain, elastic=ElasticConstants(), voce=VoceParams()):
    """Closed-form uniaxial stress for von Mises plasticity with Voce hardening."""
    from scipy.optimize import brentq

    E = elastic.E
    if E * strain <= voce.Y0:
        return E * strain

    def g(s):
        return s - float(voce_yield(strain - s / E, voce))

    return brentq(g, voce.Y0, voce.Y0 + voce.Rsat + 1e-9, xtol=1e-14, rtol=4 * np.finfo(float).eps)
