"""Input convex networks and their permutation-invariant aggregations.

Networks are plain pytrees of arrays (dicts/lists) evaluated by pure
functions, so they compose with ``jax.grad``/``jax.jit``.  Layer layout of an
ICNN with hidden widths ``(h1, ..., hm)``::

    z1      = softplus(W0 x + b0)
    z_{k+1} = softplus(Wz[k] z_k + Wx[k] x + b[k])

where the last entry of ``Wz``/``Wx``/``b`` is the scalar output layer.
Convexity requires ``Wz >= 0``; a monotone network also needs ``W0 >= 0`` and
``Wx >= 0``.
"""

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

softplus = jax.nn.softplus

#: softplus^{-1}(1): raw value giving an exponent of exactly 2
P_RAW_INIT = float(np.log(np.expm1(1.0)))


@dataclass(frozen=True)
class ICNNArch:
    n_in: int
    widths: tuple
    monotone: bool = False
    output: str = "softplus"  # or "linear"

    def to_dict(self):
        return {
            "n_in": self.n_in,
            "widths": list(self.widths),
            "monotone": self.monotone,
            "output": self.output,
            "activation": "softplus",
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("activation", "softplus") != "softplus":
            raise ValueError(f"unsupported activation {d['activation']!r}")
        return cls(int(d["n_in"]), tuple(int(w) for w in d["widths"]),
                   bool(d.get("monotone", False)), d.get("output", "softplus"))


def init_icnn(key, arch, out_scale=1.0):
    """Uniform fan-in initialization; constrained blocks take the absolute value."""
    sizes = list(arch.widths) + [1]
    keys = jax.random.split(key, 2 * len(sizes))

    def uniform(k, shape, fan_in, positive):
        bound = 1.0 / np.sqrt(fan_in)
        w = jax.random.uniform(k, shape, minval=-bound, maxval=bound)
        return jnp.abs(w) if positive else w

    params = {
        "W0": uniform(keys[0], (sizes[0], arch.n_in), arch.n_in, arch.monotone),
        "b0": jnp.zeros(sizes[0]),
        "Wz": [],
        "Wx": [],
        "b": [],
    }
    for k in range(1, len(sizes)):
        scale = out_scale if k == len(sizes) - 1 else 1.0
        params["Wz"].append(scale * uniform(keys[2 * k], (sizes[k], sizes[k - 1]), sizes[k - 1], True))
        params["Wx"].append(scale * uniform(keys[2 * k + 1], (sizes[k], arch.n_in), arch.n_in, arch.monotone))
        params["b"].append(jnp.zeros(sizes[k]))
    return params


def icnn_forward(params, x, output="softplus"):
    """Scalar output of an ICNN for a single input vector ``x``."""
    z = softplus(params["W0"] @ x + params["b0"])
    n = len(params["Wz"])
    for k in range(n):
        pre = params["Wz"][k] @ z + params["Wx"][k] @ x + params["b"][k]
        z = pre if (k == n - 1 and output == "linear") else softplus(pre)
    return z[0]


def constraint_mask(params, monotone):
    """Pytree of booleans flagging the blocks that must stay non-negative."""
    return {
        "W0": monotone,
        "b0": False,
        "Wz": [True] * len(params["Wz"]),
        "Wx": [monotone] * len(params["Wx"]),
        "b": [False] * len(params["b"]),
    }


def enforce_weight_constraints(params, mask):
    """Clamp every flagged block at zero; other blocks pass through."""
    return jax.tree_util.tree_map(
        lambda p, m: jnp.maximum(p, 0.0) if m else p, params, mask
    )


def count_params(tree):
    return int(sum(np.size(leaf) for leaf in jax.tree_util.tree_leaves(tree)))


def exponent(raw):
    """Power-mean exponent kept >= 1 through a softplus shift."""
    return 1.0 + softplus(raw)


def power_mean(values, p):
    # addends sorted so the sum is independent of input order bit-for-bit
    terms = jnp.sort(values**p)
    return jnp.mean(terms) ** (1.0 / p)


def _scalar_net(params, arch):
    # inputs sorted first: batched matmul rounding can depend on row position
    net = jax.vmap(lambda s: icnn_forward(params, s[None], arch.output))
    return lambda values: net(jnp.sort(values))


def pi_icnn1_eval(params, archs, s):
    """N_MC( [ mean_i N_C(s_i)^p ]^(1/p) ) for three principal values ``s``."""
    inner = _scalar_net(params["inner"], archs["inner"])(s)
    agg = power_mean(inner, exponent(params["p_raw"]))
    return icnn_forward(params["outer"], agg[None], archs["outer"].output)


def pi_icnn2_eval(params, archs, s1, s2):
    a1 = power_mean(_scalar_net(params["inner1"], archs["inner1"])(s1), exponent(params["p_raw"]))
    a2 = power_mean(_scalar_net(params["inner2"], archs["inner2"])(s2), exponent(params["q_raw"]))
    return icnn_forward(params["outer"], (a1 + a2)[None], archs["outer"].output)


def variant1_eval(params, archs, s1, s2):
    """One shared inner network over all six principal values."""
    s_hat = jnp.concatenate([s1, s2])
    inner = _scalar_net(params["inner"], archs["inner"])(s_hat)
    agg = power_mean(inner, exponent(params["p_raw"]))
    return icnn_forward(params["outer"], agg[None], archs["outer"].output)


def abs_differences(s1, s2):
    """The nine values |s1_i - s2_j|, row-major in (i, j)."""
    return jnp.abs(s1[:, None] - s2[None, :]).reshape(-1)


def variant2_eval(params, archs, s1, s2):
    """Monotone inner/outer networks over the nine absolute differences."""
    inner = _scalar_net(params["inner"], archs["inner"])(abs_differences(s1, s2))
    agg = power_mean(inner, exponent(params["p_raw"]))
    return icnn_forward(params["outer"], agg[None], archs["outer"].output)
