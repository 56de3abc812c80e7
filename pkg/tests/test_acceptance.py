"""Acceptance criteria, one PASS/FAIL line each (printed to the terminal).

The training-based criteria run the full protocol (50000 Adam epochs, nine
splits, alpha = 10) and take most of an hour on a single CPU core.
"""

from itertools import permutations

import jax
import jax.flatten_util
import jax.numpy as jnp
import numpy as np
import pytest

from convexyield import calibration as C
from convexyield import dataset as ds
from convexyield import devplane as dp
from convexyield import matpoint as mp
from convexyield import models as M
from convexyield import networks as nets

Y0 = 525.0
HILL_REF = (86.57, 39.53, 0.90, 0.22)
YLD_REF = (14.93, 6.36, 0.16, 0.04)
PI1_REF = (33.00, 23.73, 0.31, 0.18)
CV_KINDS = ("pi-icnn1", "yld2004", "icnn", "hybrid")


def emit(capsys, number, name, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} :: {detail}")


def fmt(t):
    return "(" + ", ".join(f"{v:.4g}" for v in t) + ")"


def within(values, ref, rel):
    return all(abs(v - r) <= rel * r for v, r in zip(values, ref))


@pytest.fixture(scope="module")
def specimens():
    return ds.load_specimens()


@pytest.fixture(scope="module")
def full_fits(specimens):
    cfg = C.TrainConfig(epochs=50000, alpha=10.0, seed=0)
    full = ds.full_split(specimens)
    return {k: C.fit(k, specimens, full, cfg) for k in ("icnn", "hybrid")}


@pytest.fixture(scope="module")
def crossvals(specimens):
    cfg = C.TrainConfig(epochs=50000, alpha=10.0, seed=0)
    return {k: C.crossval(k, cfg, specimens) for k in CV_KINDS}


@pytest.fixture(scope="module")
def trained_models(full_fits, crossvals):
    """Every model produced by the training criteria, labelled."""
    out = {f"{k}/full": run.model for k, run in full_fits.items()}
    for k, res in crossvals.items():
        for s in res.splits:
            out[f"{k}/split{s.split}"] = s.run.model
    return out


# -- 1 ----------------------------------------------------------------------


def test_criterion_1_phenomenological(specimens, capsys):
    avgs = {}
    for kind in ("hill48", "yld2004"):
        reps = []
        for seed in (0, 1, 2):
            cfg = C.TrainConfig(optimizer="cmaes", seed=seed)
            run = C.train_cmaes(M.init_model(kind), specimens, cfg)
            reps.append(C.error_report(run.model, specimens))
        avgs[kind] = C.average_reports(reps).as_tuple()
    ok_h = within(avgs["hill48"], HILL_REF, 0.10)
    ok_y = within(avgs["yld2004"], YLD_REF, 0.25)
    emit(capsys, 1, "phenomenological reproduction", ok_h and ok_y,
         f"Hill48 {fmt(avgs['hill48'])} vs {fmt(HILL_REF)} +-10% [{'ok' if ok_h else 'out'}]; "
         f"Yld2004 {fmt(avgs['yld2004'])} vs {fmt(YLD_REF)} +-25% [{'ok' if ok_y else 'out'}]")
    assert ok_h and ok_y


# -- 2 ----------------------------------------------------------------------


def test_criterion_2_overfitting(specimens, full_fits, crossvals, capsys):
    parts, ok = [], True
    for kind, run in full_fits.items():
        rep = C.error_report(run.model, specimens)
        good = rep.max_abs_f <= 1.0 and rep.max_abs_dr <= 0.01
        ok &= good
        parts.append(f"{kind} full Max|f|={rep.max_abs_f:.3g} Max|dr|={rep.max_abs_dr:.3g}")
    for kind in ("icnn", "hybrid"):
        avg = crossvals[kind].average
        ratio = avg["test"].mean_abs_f / avg["train"].mean_abs_f
        ok &= ratio >= 3.0
        parts.append(f"{kind} CV test/train Mean|f| = {avg['test'].mean_abs_f:.4g}/"
                     f"{avg['train'].mean_abs_f:.4g} = {ratio:.3g}x")
    emit(capsys, 2, "overfitting signature", ok, "; ".join(parts))
    assert ok


# -- 3 ----------------------------------------------------------------------


def test_criterion_3_generalization(crossvals, capsys):
    test = {k: crossvals[k].average["test"] for k in CV_KINDS}
    pi = test["pi-icnn1"]
    order = all(pi.mean_abs_f < test[k].mean_abs_f and pi.mean_abs_dr < test[k].mean_abs_dr
                for k in ("yld2004", "icnn", "hybrid"))
    band = within(pi.as_tuple(), PI1_REF, 0.30)
    table = "; ".join(f"{k} test {fmt(test[k].as_tuple())}" for k in CV_KINDS)
    emit(capsys, 3, "generalization ordering", order and band,
         f"ordering [{'ok' if order else 'violated'}], PI-ICNN1 {fmt(pi.as_tuple())} vs {fmt(PI1_REF)} "
         f"+-30% [{'ok' if band else 'out'}]; {table}")
    assert order and band


def test_pi_icnn1_validation_plateau(crossvals, capsys):
    (res,) = [s for s in crossvals["pi-icnn1"].splits if s.split == 3]
    # smoothed as in the reported loss curves; the raw curve has a brief early dip
    raw = np.asarray(res.run.history["val"])
    val = C.moving_average(raw, 2000)
    ratio = val[-1] / val.min()
    with capsys.disabled():
        print(f"\n[{'PASS' if ratio <= 1.5 else 'FAIL'}] PI-ICNN1 split 3 validation plateau: "
              f"smoothed final/min = {ratio:.3g} (raw {raw[-1] / raw.min():.3g})")
    assert ratio <= 1.5


# -- 4 ----------------------------------------------------------------------


def _property_failures(label, model, rng):
    fails = []
    hom = jax.jit(jax.vmap(lambda x: M.homogenized(model.spec, model.params, x)))
    f = lambda S: np.asarray(hom(jnp.asarray(S) / Y0)) * Y0  # noqa: E731
    X, Yb = rng.normal(size=(2, 10_000, 6)) * Y0
    viol = np.max(f(0.5 * (X + Yb)) - 0.5 * (f(X) + f(Yb)))
    if not viol <= 1e-7 * Y0:
        fails.append(f"{label}: convexity violation {viol:.3g}")
    S = rng.normal(size=(200, 6)) * Y0
    base = f(S)
    if not np.max(np.abs(f(-S) - base)) <= 1e-9:
        fails.append(f"{label}: tension-compression {np.max(np.abs(f(-S) - base)):.3g}")
    p = rng.uniform(-2, 2, size=(200, 1)) * Y0 * np.array([1, 1, 1, 0, 0, 0])
    if not np.max(np.abs(f(S + p) - base)) <= 1e-8:
        fails.append(f"{label}: pressure {np.max(np.abs(f(S + p) - base)):.3g}")
    for t in (0.5, 2.0, 10.0):
        rel = np.max(np.abs(f(t * S) - t * base) / (t * base))
        if not rel <= 1e-7:
            fails.append(f"{label}: scaling t={t} rel {rel:.3g}")
    # gradients vs central differences
    grad = jax.jit(jax.vmap(jax.grad(lambda x: M.homogenized(model.spec, model.params, x))))
    Sg = S[:20]
    G = np.asarray(grad(jnp.asarray(Sg / Y0)))
    for s, g in zip(Sg, G):
        h = 1e-5 * np.linalg.norm(s)
        P = np.concatenate([s + h * np.eye(6), s - h * np.eye(6)])
        v = f(P)
        fd = (v[:6] - v[6:]) / (2 * h)
        if not np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(g):
            fails.append(f"{label}: stress gradient FD mismatch")
            break
    if model.neural:
        for s in S[:10]:
            ev = M.solve_beta(model, s)
            if not abs(model.phi(ev.beta * s) - Y0) <= 1e-8 * Y0:
                fails.append(f"{label}: beta residual")
                break
    if model.kind in M.PRINCIPAL_SPACE and model.kind != "yld2004":
        ev = {"pi-icnn1": lambda a, b: nets.pi_icnn1_eval(model.params, model.archs, a),
              "pi-icnn2": lambda a, b: nets.pi_icnn2_eval(model.params, model.archs, a, b)}[model.kind]
        s1, s2 = rng.normal(size=(2, 3))
        ref = float(ev(jnp.asarray(s1), jnp.asarray(s2)))
        for q in permutations(range(3)):
            if float(ev(jnp.asarray(s1[list(q)]), jnp.asarray(s2))) != ref:
                fails.append(f"{label}: permutation invariance")
                break
    return fails


def test_criterion_4_property_suite(trained_models, specimens, capsys):
    rng = np.random.default_rng(2024)
    models = dict(trained_models)
    for seed in (0,):
        cfg = C.TrainConfig(optimizer="cmaes", seed=seed)
        models["hill48/full"] = C.train_cmaes(M.init_model("hill48"), specimens, cfg).model
    fails = []
    for label, model in models.items():
        fails += _property_failures(label, model, rng)
    # parameter gradient through the r-value path, PI-ICNN1
    from convexyield.diff import grad_wrt_params

    m = trained_models["pi-icnn1/split3"]
    batch = C.SpecimenBatch.build(specimens[7:8], Y0)
    loss = lambda p: jnp.sum(C.specimen_terms(m.spec, p, batch, C.LossWeights()))  # noqa: E731
    g, unravel = grad_wrt_params(loss, m.params)
    flat = np.asarray(jax.flatten_util.ravel_pytree(m.params)[0])
    lf = jax.jit(lambda v: loss(unravel(v)))
    for i in np.random.default_rng(0).choice(flat.size, 20, replace=False):
        h = 1e-6 * abs(flat[i]) + 1e-8
        e = np.zeros_like(flat)
        e[i] = h
        fd = (float(lf(flat + e)) - float(lf(flat - e))) / (2 * h)
        if not abs(g[i] - fd) <= 1e-3 * abs(g[i]) + 1e-7:
            fails.append(f"pi-icnn1 parameter gradient coordinate {i}")
    ok = not fails
    emit(capsys, 4, "property suite", ok,
         f"{len(models)} trained models checked" + ("" if ok else "; " + "; ".join(fails[:5])))
    assert ok


# -- 5 ----------------------------------------------------------------------


def test_criterion_5_geometry(capsys):
    P = np.eye(3) - np.ones((3, 3)) / 3
    comp = max(np.abs(dp.FORWARD @ dp.INVERSE - np.eye(2)).max(),
               np.abs(dp.INVERSE @ dp.FORWARD @ P - P).max())
    circle = dp.trace_locus(M.init_model("hill48"), 360)
    rad = max(abs(p.radius / Y0 - 1) for p in circle)
    u = dp.PiPoint(*dp.to_pi_plane([2 / 3, -1 / 3, -1 / 3]))
    uni = max(abs(u.radius - 1), abs(u.angle + np.pi / 6))
    ok = comp <= 1e-15 and rad <= 1e-6 and uni <= 1e-15
    emit(capsys, 5, "geometry oracles", ok,
         f"composition error {comp:.2g}, circle radius rel error {rad:.2g}, uniaxial point error {uni:.2g}")
    assert ok


# -- 6 ----------------------------------------------------------------------


def _closed_form(strain, E=70000.0, Rsat=200.0, gamma=20.0):
    from scipy.optimize import brentq

    if E * strain <= Y0:
        return E * strain
    return brentq(lambda s: s / E - np.log1p(-(s - Y0) / Rsat) / gamma - strain, Y0, Y0 + Rsat * (1 - 1e-15),
                  xtol=1e-13)


def test_criterion_6_simulator(trained_models, specimens, capsys):
    vm = mp.simulate_uniaxial(M.init_model("hill48"), np.eye(3), 0.05, 100)
    err = max(abs(s - _closed_form(e)) / max(abs(_closed_form(e)), 1e-300)
              for e, s in zip(vm.column("axial_strain")[1:], vm.column("axial_stress")[1:]))
    parts = [f"von Mises 1D rel error {err:.2g}"]
    ok = err <= 1e-6
    s8 = specimens[7]
    worst_f, worst_r2, worst_ratio = 0.0, 1.0, 0.0
    for label in ("hybrid/full", "pi-icnn1/split3"):
        m = trained_models[label]
        t = mp.simulate_uniaxial(m, s8.rotation, 0.05, 100)
        plastic = np.diff(t.column("eps_bar_p")) > 0
        worst_f = max(worst_f, np.max(np.abs(t.column("f")[1:][plastic])))
        res = mp.plastic_strain_ratio(t)
        worst_r2 = min(worst_r2, res["ep_xx"][1], res["ep_zz"][1])
        r = M.lankford(m, s8.plane, s8.angle)
        worst_ratio = max(worst_ratio, abs(res["ratio"] / r - 1))
    ok &= worst_f <= 1e-8 * Y0 and worst_r2 >= 0.999 and worst_ratio <= 0.01
    parts += [f"max plastic |f| {worst_f:.2g} MPa", f"min R^2 {worst_r2:.6f}",
              f"max |ratio/lankford - 1| {worst_ratio:.2g}"]
    emit(capsys, 6, "simulator consistency", ok, "; ".join(parts))
    assert ok
