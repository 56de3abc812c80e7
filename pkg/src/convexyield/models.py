"""Yield-function families behind one evaluation interface.

Every model exposes a dimensionless potential ``psi(x)`` of the scaled stress
``x = sigma / Y0``; the yield surface is ``psi = 1``.  Phenomenological kinds
(Hill-48, Yld2004-18p) are degree-1 homogeneous so ``Phi = Y0 psi``.  Neural
kinds are evenized, shifted so that ``psi(0) = 0`` and homogenized by the ray
scale ``beta`` solving ``psi(beta x) = 1``; their effective stress is
``Y0 / beta``.
"""

import json
from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from . import networks as nets
from .spectral import principal_values, voigt_to_tensor
from .stress import ANISO_KEYS, build_L, deviator, specimen_rotation, uniaxial_stress

PHENOMENOLOGICAL = ("hill48", "yld2004")
NEURAL = ("icnn", "hybrid", "pi-icnn1", "pi-icnn2", "pi-icnn2-v1", "pi-icnn2-v2")
KINDS = PHENOMENOLOGICAL + NEURAL
PRINCIPAL_SPACE = ("yld2004", "pi-icnn1", "pi-icnn2", "pi-icnn2-v1", "pi-icnn2-v2")

HILL_KEYS = ("F", "G", "H", "L", "M", "N")
VON_MISES_HILL = (0.5, 0.5, 0.5, 1.5, 1.5, 1.5)
DEFAULT_Y0 = 525.0
BETA_BRACKET = (1e-6, 1e6)

ICNNArch = nets.ICNNArch

DEFAULT_ARCHS = {
    "icnn": {"net": ICNNArch(6, (10, 10))},
    "hybrid": {"net": ICNNArch(6, (10, 10), output="linear")},
    "pi-icnn1": {
        "inner": ICNNArch(1, (8, 8, 8)),
        "outer": ICNNArch(1, (4, 4), monotone=True),
    },
    "pi-icnn2": {
        "inner1": ICNNArch(1, (6, 6, 6)),
        "inner2": ICNNArch(1, (6, 6, 6)),
        "outer": ICNNArch(1, (6,), monotone=True),
    },
    "pi-icnn2-v1": {
        "inner": ICNNArch(1, (8, 8, 8)),
        "outer": ICNNArch(1, (4, 4), monotone=True),
    },
    "pi-icnn2-v2": {
        "inner": ICNNArch(1, (8, 8, 8), monotone=True),
        "outer": ICNNArch(1, (4, 4), monotone=True),
    },
}

_SHEAR_HALF = jnp.array([1.0, 1.0, 1.0, 0.5, 0.5, 0.5])


class ModelError(ValueError):
    """Raised for numerically degenerate evaluations (no yield point, r singular)."""


@dataclass(frozen=True)
class ModelSpec:
    """Static (hashable) description of a model: kind, networks, evenization."""

    kind: str
    archs: tuple = ()
    evenize: bool = True

    @property
    def arch(self):
        return dict(self.archs)

    @property
    def neural(self):
        return self.kind in NEURAL


# ---------------------------------------------------------------------------
# phenomenological effective stresses


def hill48_phi(sigma, hill):
    """Hill-48 effective stress; ``hill`` ordered as (F, G, H, L, M, N)."""
    s = jnp.asarray(sigma)
    F, G, H, L, M, N = (hill[k] for k in range(6))
    q = (
        F * (s[1] - s[2]) ** 2
        + G * (s[2] - s[0]) ** 2
        + H * (s[0] - s[1]) ** 2
        + 2.0 * L * s[4] ** 2
        + 2.0 * M * s[5] ** 2
        + 2.0 * N * s[3] ** 2
    )
    return jnp.sqrt(jnp.maximum(q, 0.0))


def yld2004_from_principal(s1, s2, a):
    terms = jnp.sort(nets.abs_differences(s1, s2) ** a)
    return (0.25 * jnp.sum(terms)) ** (1.0 / a)


def yld2004_phi(sigma, c1, c2, a):
    """Yld2004-18p effective stress from two coefficient sets and exponent ``a``."""
    s = jnp.asarray(sigma)
    s1 = principal_values(build_L(c1) @ s)
    s2 = principal_values(build_L(c2) @ s)
    return yld2004_from_principal(s1, s2, a)


def evenize(raw_pos, raw_neg):
    """Even part of a function from its values at ``x`` and ``-x``."""
    return 0.5 * (raw_pos + raw_neg)


def hybrid_phi(sigma, hill, net, Y0=DEFAULT_Y0, arch=None, even=True):
    """Hill-48 plus an ICNN correction evaluated on the deviator (MPa).

    The correction is evaluated on ``s / Y0`` and rescaled by ``Y0``; its
    constant part is kept (the ray scaling absorbs it).
    """
    arch = arch or DEFAULT_ARCHS["hybrid"]["net"]
    s = deviator(jnp.asarray(sigma)) / Y0
    raw = nets.icnn_forward(net, s, arch.output)
    corr = evenize(raw, nets.icnn_forward(net, -s, arch.output)) if even else raw
    return hill48_phi(sigma, hill) + Y0 * corr


# ---------------------------------------------------------------------------
# dimensionless potentials


def _neural_shape(spec, params, x):
    """Evenized network value, shifted to vanish at the origin.

    The hybrid correction keeps its constant: a negative offset rescales the
    Hill surface uniformly before the convex part reshapes it.
    """
    k, arch, even = spec.kind, spec.arch, spec.evenize
    if k in ("icnn", "hybrid"):
        a = arch["net"]
        f = lambda s: nets.icnn_forward(params["net"], s, a.output)  # noqa: E731
        s = deviator(x)
        val = evenize(f(s), f(-s)) if even else f(s)
        return val if k == "hybrid" else val - f(jnp.zeros(6))

    zeros = jnp.zeros(3)
    if k == "pi-icnn1":
        s1 = principal_values(build_L(params["c1"]) @ x)
        f = lambda a1: nets.pi_icnn1_eval(params, arch, a1)  # noqa: E731
        val = evenize(f(s1), f(-s1[::-1])) if even else f(s1)
        return val - f(zeros)

    s1 = principal_values(build_L(params["c1"]) @ x)
    s2 = principal_values(build_L(params["c2"]) @ x)
    ev = {
        "pi-icnn2": nets.pi_icnn2_eval,
        "pi-icnn2-v1": nets.variant1_eval,
        "pi-icnn2-v2": nets.variant2_eval,
    }[k]
    f = lambda a1, a2: ev(params, arch, a1, a2)  # noqa: E731
    val = evenize(f(s1, s2), f(-s1[::-1], -s2[::-1])) if even else f(s1, s2)
    return val - f(zeros, zeros)


def psi(spec, params, x):
    """Dimensionless potential at a single scaled Voigt stress ``x``."""
    k = spec.kind
    if k == "hill48":
        return hill48_phi(x, params["hill"])
    if k == "yld2004":
        return yld2004_phi(x, params["c1"], params["c2"], params["a"])
    val = _neural_shape(spec, params, x)
    if k == "hybrid":
        val = val + hill48_phi(x, params["hill"])
    return val


def _solve_ray(spec, params, x):
    """Smallest beta > 0 with psi(beta x) = 1 (NaN when no bracket exists)."""
    lo_b, hi_b = BETA_BRACKET

    def phi(b):
        return psi(spec, params, b * x) - 1.0

    def grow(state):
        lo, hi = state
        return hi, 2.0 * hi

    lo, hi = jax.lax.while_loop(
        lambda st: (phi(st[1]) < 0.0) & (st[1] < hi_b), grow, (0.0, 1.0)
    )
    bracketed = phi(hi) >= 0.0

    # Newton from the right on a convex increasing ray, with bisection guard
    def body(st):
        lo, hi, best, it, _ = st
        val, der = jax.jvp(phi, (hi,), (1.0,))
        step = hi - val / der
        ok = (step > lo) & (step < hi) & jnp.isfinite(step)
        cand = jnp.where(ok, step, 0.5 * (lo + hi))
        fc = phi(cand)
        lo = jnp.where(fc < 0.0, cand, lo)
        hi = jnp.where(fc >= 0.0, cand, hi)
        done = (jnp.abs(fc) <= 1e-14) | (hi - lo <= 1e-15 * hi)
        return lo, hi, cand, it + 1, done

    def cond(st):
        return (~st[4]) & (st[3] < 200)

    _, _, beta, _, _ = jax.lax.while_loop(
        cond, body, (lo, hi, hi, 0, ~bracketed)
    )
    valid = bracketed & (beta >= lo_b) & (beta <= hi_b) & jnp.isfinite(beta)
    return jnp.where(valid, beta, jnp.nan)


@partial(jax.custom_jvp, nondiff_argnums=(0,))
def ray_scale(spec, params, x):
    """beta(x) with psi(beta x) = 1; differentiated by the implicit-function rule."""
    return _solve_ray(spec, params, x)


@ray_scale.defjvp
def _ray_scale_jvp(spec, primals, tangents):
    params, x = primals
    dparams, dx = tangents
    beta = ray_scale(spec, params, x)
    y = beta * x
    _, dpsi = jax.jvp(lambda p, yy: psi(spec, p, yy), (params, y), (dparams, beta * dx))
    _, slope = jax.jvp(lambda yy: psi(spec, params, yy), (y,), (x,))
    return beta, -dpsi / slope


def homogenized(spec, params, x):
    """Degree-1 homogeneous effective stress divided by Y0."""
    if spec.neural:
        return 1.0 / ray_scale(spec, params, x)
    return psi(spec, params, x)


def yield_point(spec, params, x):
    """Point on the surface psi = 1 along the ray through ``x``."""
    if spec.neural:
        return ray_scale(spec, params, x) * x
    return x / psi(spec, params, x)


def strain_rate_tensor(g):
    """Plastic strain-rate direction (3x3) from a Voigt stress gradient."""
    return voigt_to_tensor(g * _SHEAR_HALF)


def lankford_ratio(spec, params, x, width, thick):
    """r = width / thickness plastic strain rate at the yield point on ray ``x``.

    Returns ``(r, thickness_rate, |g|)`` so callers can flag singular cases.
    """
    y = yield_point(spec, params, x)
    g = jax.grad(psi, argnums=2)(spec, params, y)
    E = strain_rate_tensor(g)
    e_w = width @ E @ width
    e_t = thick @ E @ thick
    return e_w / e_t, e_t, jnp.linalg.norm(g)


# ---------------------------------------------------------------------------
# model container


def _tree_to_jnp(tree):
    return jax.tree_util.tree_map(lambda a: jnp.asarray(a, dtype=jnp.float64), tree)


@dataclass
class YieldModel:
    """A yield-function family plus a parameter snapshot."""

    kind: str
    params: dict
    Y0: float = DEFAULT_Y0
    evenize: bool = True
    archs: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        if not self.Y0 > 0:
            raise ValueError("Y0 must be positive")
        if self.kind in NEURAL and not self.archs:
            self.archs = dict(DEFAULT_ARCHS[self.kind])
        self.params = _tree_to_jnp(self.params)

    @property
    def spec(self):
        return ModelSpec(self.kind, tuple(sorted(self.archs.items())), bool(self.evenize))

    @property
    def neural(self):
        return self.kind in NEURAL

    @property
    def param_count(self):
        return nets.count_params(self.params)

    def with_params(self, params):
        return YieldModel(self.kind, params, self.Y0, self.evenize, dict(self.archs),
                          dict(self.metadata))

    # -- evaluation (MPa in, MPa out) ------------------------------------
    def phi(self, sigma):
        """Raw effective stress Y0 psi(sigma / Y0) (not homogenized for neural kinds)."""
        return float(_jit_psi(self.spec, self.params, _scaled(sigma, self.Y0))) * self.Y0

    def effective_stress(self, sigma):
        return float(self._homogenized(sigma)) * self.Y0

    def _homogenized(self, sigma):
        x = _scaled(sigma, self.Y0)
        if _zero_deviator(x):
            raise ModelError("zero deviator: effective stress undefined")
        val = _jit_homogenized(self.spec, self.params, x)
        if not np.isfinite(val):
            raise ModelError("unbounded/degenerate ray: no yield point within the beta bracket")
        return val


def _zero_deviator(x):
    x = np.asarray(x)
    return np.linalg.norm(np.asarray(deviator(x))) <= 1e-13 * max(np.linalg.norm(x), 1e-300)


def _scaled(sigma, Y0):
    return jnp.asarray(np.asarray(sigma, dtype=float) / Y0)


_jit_psi = jax.jit(psi, static_argnums=0)
_jit_homogenized = jax.jit(homogenized, static_argnums=0)
_jit_grad_homogenized = jax.jit(jax.grad(homogenized, argnums=2), static_argnums=0)
_jit_lankford = jax.jit(lankford_ratio, static_argnums=0)
_jit_ray_scale = jax.jit(ray_scale, static_argnums=0)


@dataclass
class HomogenizedEval:
    beta: float
    effective_stress: float
    residual: float


def solve_beta(model, sigma):
    """Ray scale beta with Phi(beta sigma) = Y0 and the homogenized residual."""
    x = _scaled(sigma, model.Y0)
    if _zero_deviator(x):
        raise ModelError("zero deviator: no yield point along this ray")
    if model.neural:
        beta = float(_jit_ray_scale(model.spec, model.params, x))
    else:
        val = float(_jit_psi(model.spec, model.params, x))
        beta = 1.0 / val if val > 0.0 else np.inf
    if not np.isfinite(beta) or not BETA_BRACKET[0] <= beta <= BETA_BRACKET[1]:
        raise ModelError("unbounded/degenerate ray: no yield point within the beta bracket")
    return HomogenizedEval(beta, model.Y0 / beta, model.Y0 / beta - model.Y0)


def effective_residual(model, sigma):
    """f = Phi_hom(sigma) - Y0 in MPa (no hardening)."""
    return model.effective_stress(sigma) - model.Y0


def stress_gradient(model, sigma):
    """d f / d sigma (Voigt components) of the homogenized residual."""
    x = _scaled(sigma, model.Y0)
    g = np.asarray(_jit_grad_homogenized(model.spec, model.params, x))
    if not np.all(np.isfinite(g)):
        raise ModelError("stress gradient is not finite at this stress")
    return g


def specimen_axes(plane, angle):
    R = specimen_rotation(plane, angle)
    return R, R[:, 0], R[:, 2]


def lankford(model, plane, angle):
    """Predicted r-value for a specimen cut in ``plane`` at ``angle`` (radians)."""
    R, width, thick = specimen_axes(plane, angle)
    x = jnp.asarray(uniaxial_stress(R, 1.0))
    r, e_t, gnorm = (float(v) for v in _jit_lankford(model.spec, model.params, x,
                                                     jnp.asarray(width), jnp.asarray(thick)))
    if not np.isfinite(r) or abs(e_t) < 1e-12 * gnorm:
        raise ModelError("r-value singular: vanishing through-thickness plastic strain rate")
    return r


# ---------------------------------------------------------------------------
# initialization


def _aniso_init(key, noise):
    return 1.0 + jax.random.uniform(key, (9,), minval=-noise, maxval=noise)


def init_model(kind, seed=0, Y0=DEFAULT_Y0, evenize=True, archs=None, hill=None,
               aniso_noise=0.1, hybrid_out_scale=0.1):
    """Fresh parameters for ``kind``; deterministic in ``seed``.

    Linear-transformation coefficients start at one plus a small uniform
    perturbation so the transformed specimen stresses are not exactly
    degenerate (eigenvector derivatives are singular there).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; valid kinds: {', '.join(KINDS)}")
    if kind == "hill48":
        params = {"hill": jnp.asarray(hill if hill is not None else VON_MISES_HILL, dtype=float)}
        return YieldModel(kind, params, Y0, True, {})
    if kind == "yld2004":
        params = {"c1": jnp.ones(9), "c2": jnp.ones(9), "a": jnp.asarray(8.0)}
        return YieldModel(kind, params, Y0, True, {})

    archs = dict(archs or DEFAULT_ARCHS[kind])
    key = jax.random.PRNGKey(seed)
    k_c1, k_c2, *k_nets = jax.random.split(key, 2 + len(archs))
    params = {}
    for (name, arch), k in zip(sorted(archs.items()), k_nets):
        scale = hybrid_out_scale if kind == "hybrid" else 1.0
        params[name] = nets.init_icnn(k, arch, out_scale=scale)
    if kind == "hybrid":
        params["hill"] = jnp.asarray(hill if hill is not None else VON_MISES_HILL, dtype=float)
    if kind.startswith("pi-icnn"):
        params["c1"] = _aniso_init(k_c1, aniso_noise)
        params["p_raw"] = jnp.asarray(nets.P_RAW_INIT)
    if kind in ("pi-icnn2", "pi-icnn2-v1", "pi-icnn2-v2"):
        params["c2"] = _aniso_init(k_c2, aniso_noise)
    if kind == "pi-icnn2":
        params["q_raw"] = jnp.asarray(nets.P_RAW_INIT)
    return YieldModel(kind, params, Y0, evenize, archs)


def constraint_mask(model):
    """Pytree of booleans (same structure as params) marking non-negative blocks."""
    mask = {}
    for name, value in model.params.items():
        if name in model.archs:
            mask[name] = nets.constraint_mask(value, model.archs[name].monotone)
        else:
            mask[name] = jax.tree_util.tree_map(lambda _: False, value)
    return mask


def project(model, params=None):
    params = model.params if params is None else params
    return nets.enforce_weight_constraints(params, constraint_mask(model.with_params(params)))


# ---------------------------------------------------------------------------
# JSON model files


class ModelFileError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


def _net_to_json(p):
    return {
        "W0": np.asarray(p["W0"]).tolist(),
        "b0": np.asarray(p["b0"]).tolist(),
        "Wz": [np.asarray(w).tolist() for w in p["Wz"]],
        "Wx": [np.asarray(w).tolist() for w in p["Wx"]],
        "b": [np.asarray(w).tolist() for w in p["b"]],
    }


def _named(vec, keys):
    return {k: float(v) for k, v in zip(keys, np.asarray(vec))}


def model_to_dict(model):
    params = {}
    for name, value in model.params.items():
        if name in model.archs:
            params[name] = _net_to_json(value)
        elif name == "hill":
            params[name] = _named(value, HILL_KEYS)
        elif name in ("c1", "c2"):
            params[name] = _named(value, ANISO_KEYS)
        else:
            params[name] = float(value)
    architecture = {}
    for name, arch in model.archs.items():
        d = arch.to_dict()
        d["constraints"] = {"W0_nonneg": arch.monotone, "Wz_nonneg": True, "Wx_nonneg": arch.monotone}
        architecture[name] = d
    for raw in ("p_raw", "q_raw"):
        if raw in model.params:
            architecture[raw] = float(model.params[raw])
            architecture[raw[0]] = float(nets.exponent(model.params[raw]))
    return {
        "kind": model.kind,
        "Y0": float(model.Y0),
        "evenize": bool(model.evenize),
        "param_count": model.param_count,
        "architecture": architecture,
        "params": params,
        "metadata": model.metadata,
    }


def _expect(obj, key, path, types=None):
    if not isinstance(obj, dict) or key not in obj:
        raise ModelFileError(f"{path}.{key}", "missing")
    val = obj[key]
    if types is not None and not isinstance(val, types):
        raise ModelFileError(f"{path}.{key}", f"expected {types}, got {type(val).__name__}")
    return val


def _array(value, shape, path):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ModelFileError(path, "not a numeric array") from None
    if arr.shape != tuple(shape):
        raise ModelFileError(path, f"shape {arr.shape} != expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ModelFileError(path, "non-finite values")
    return arr


def _net_from_json(d, arch, path):
    sizes = list(arch.widths) + [1]
    out = {
        "W0": _array(_expect(d, "W0", path), (sizes[0], arch.n_in), f"{path}.W0"),
        "b0": _array(_expect(d, "b0", path), (sizes[0],), f"{path}.b0"),
        "Wz": [], "Wx": [], "b": [],
    }
    for blk in ("Wz", "Wx", "b"):
        lst = _expect(d, blk, path, list)
        if len(lst) != len(sizes) - 1:
            raise ModelFileError(f"{path}.{blk}", f"expected {len(sizes) - 1} layers")
    for k in range(1, len(sizes)):
        out["Wz"].append(_array(d["Wz"][k - 1], (sizes[k], sizes[k - 1]), f"{path}.Wz[{k - 1}]"))
        out["Wx"].append(_array(d["Wx"][k - 1], (sizes[k], arch.n_in), f"{path}.Wx[{k - 1}]"))
        out["b"].append(_array(d["b"][k - 1], (sizes[k],), f"{path}.b[{k - 1}]"))
    return out


def model_from_dict(d):
    if not isinstance(d, dict):
        raise ModelFileError("$", "top level must be an object")
    kind = _expect(d, "kind", "$", str)
    if kind not in KINDS:
        raise ModelFileError("$.kind", f"unknown kind {kind!r}; valid kinds: {', '.join(KINDS)}")
    Y0 = float(_expect(d, "Y0", "$", (int, float)))
    evenize = bool(d.get("evenize", True))
    raw_params = _expect(d, "params", "$", dict)
    archs = {}
    if kind in NEURAL:
        arch_block = _expect(d, "architecture", "$", dict)
        for name in DEFAULT_ARCHS[kind]:
            a = _expect(arch_block, name, "$.architecture", dict)
            try:
                archs[name] = ICNNArch.from_dict(a)
            except (KeyError, TypeError, ValueError) as exc:
                raise ModelFileError(f"$.architecture.{name}", str(exc)) from None
    params = {}
    for name, value in raw_params.items():
        path = f"$.params.{name}"
        if name in archs:
            params[name] = _net_from_json(value, archs[name], path)
        elif name == "hill":
            params[name] = np.array([float(_expect(value, k, path, (int, float))) for k in HILL_KEYS])
        elif name in ("c1", "c2"):
            params[name] = np.array([float(_expect(value, k, path, (int, float))) for k in ANISO_KEYS])
        elif name in ("a", "p_raw", "q_raw"):
            if not isinstance(value, (int, float)):
                raise ModelFileError(path, "expected a number")
            params[name] = float(value)
        else:
            raise ModelFileError(path, "unexpected parameter block")
    expected = set(init_model(kind).params)
    missing = expected - set(params)
    if missing:
        raise ModelFileError(f"$.params.{sorted(missing)[0]}", "missing")
    return YieldModel(kind, params, Y0, evenize, archs, dict(d.get("metadata", {})))


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path):
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFileError("$", f"invalid JSON ({exc})") from None
    return model_from_dict(d)
