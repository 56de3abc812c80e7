import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from convexyield import calibration as C
from convexyield import dataset as ds
from convexyield.models import constraint_mask, init_model


# -- epoch selection --------------------------------------------------------


def test_select_epoch_monotone_decreasing():
    h = np.linspace(5, 1, 50)
    for a in (0.0, 1.0, 10.0):
        assert C.select_epoch(h, a) == 50


def test_select_epoch_examples():
    assert C.select_epoch([3, 1, 2, 2.1], 0) == 2
    assert C.select_epoch([3, 1, 1.05, 2], 10) == 3


def test_select_epoch_empty():
    with pytest.raises(ValueError):
        C.select_epoch([], 10)


@given(st.lists(st.floats(0.01, 100.0), min_size=1, max_size=60))
def test_select_epoch_alpha_zero_is_argmin(h):
    i = C.select_epoch(h, 0.0)
    assert h[i - 1] == min(h)


@given(st.lists(st.floats(0.01, 100.0), min_size=1, max_size=60), st.floats(0, 50))
def test_online_selector_matches_batch(h, alpha):
    h = np.asarray(h)
    sel = C._EpochSelector((alpha,))
    for start in range(0, h.size, 7):
        chunk = h[start:start + 7]
        sel.update(start, chunk, {"w": jnp.arange(start, start + chunk.size, dtype=float)})
    epoch, params = sel.slots[alpha]
    assert epoch == C.select_epoch(h, alpha)
    assert float(params["w"]) == epoch - 1


def test_moving_average():
    np.testing.assert_allclose(C.moving_average([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])


# -- loss -------------------------------------------------------------------


def _exact_specimens():
    """Synthetic specimens lying exactly on an anisotropic Hill surface."""
    from convexyield.models import lankford

    m = init_model("hill48").with_params({"hill": np.array([0.3, 0.6, 0.4, 1.2, 1.5, 1.8])})
    out = []
    for s in ds.load_specimens():
        stress = ds.specimen_stress(s, 1.0)
        sig = m.Y0 / m.effective_stress(stress)
        out.append(ds.Specimen(s.id, s.plane, s.angle_deg, sig, lankford(m, s.plane, s.angle)))
    return m, out


def test_loss_zero_for_exact_model():
    m, specimens = _exact_specimens()
    assert C.loss(m, specimens) == pytest.approx(0.0, abs=1e-20)
    rep = C.error_report(m, specimens)
    assert rep.max_abs_f == pytest.approx(0.0, abs=1e-9) and rep.max_abs_dr == pytest.approx(0.0, abs=1e-9)


def test_loss_weight_arithmetic():
    m = init_model("hill48")
    s = ds.Specimen(1, "A", 0.0, 525.0 * 1.1, 1.0)
    # Phi / Y0 - 1 = 0.1 with an exact (isotropic) r-value
    assert C.loss(m, [s]) == pytest.approx(0.1, rel=1e-12)


def test_loss_reorder_invariant(specimens):
    m = init_model("pi-icnn1", seed=2)
    rev = list(reversed(specimens))
    perm = [specimens[i] for i in np.random.default_rng(0).permutation(12)]
    ref = C.loss(m, specimens)
    assert C.loss(m, rev) == ref and C.loss(m, perm) == ref


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        C.LossWeights(-1.0, 1.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        C.TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        C.TrainConfig(alpha=-1)
    with pytest.raises(ValueError, match="unknown config keys"):
        C.TrainConfig.from_dict({"epochz": 3})
    cfg = C.TrainConfig.from_dict({"optimizer": "CMA-ES", "weights": {"w_sigma": 5, "w_r": 2}})
    assert cfg.optimizer == "cmaes" and cfg.weights.w_sigma == 5


# -- Adam -------------------------------------------------------------------


def test_adam_descent_quadratic():
    target = jnp.linspace(-1, 1, 10)

    def f(p):
        return jnp.sum((p["x"] - target) ** 2)

    params, hist = C.adam_descent(f, {"x": jnp.zeros(10) + 3.0}, learning_rate=5e-3, epochs=3000)
    assert hist[-1] <= hist[0] / 100
    assert float(f(params)) <= hist[0] / 100


def test_adam_descent_projection():
    params, _ = C.adam_descent(lambda p: jnp.sum((p + 1.0) ** 2), jnp.ones(3), epochs=500,
                               project_fn=lambda p: jnp.maximum(p, 0.0))
    assert float(jnp.min(params)) >= 0.0


@pytest.fixture(scope="module")
def short_runs(specimens):
    cfg = C.TrainConfig(epochs=300, chunk=100, keep_history=True)
    model = init_model("icnn", seed=0)
    a = C.train_adam(model, ds.split(3), cfg, specimens, alphas=(0.0,))
    b = C.train_adam(model, ds.split(3), cfg, specimens)
    return cfg, a, b


def test_train_adam_deterministic(short_runs):
    _, a, b = short_runs
    for k in ("train", "val", "test"):
        assert np.array_equal(a.history[k], b.history[k])
    assert a.selected_epoch == b.selected_epoch


def test_train_adam_history_and_selection(short_runs):
    cfg, a, _ = short_runs
    assert all(len(a.history[k]) == cfg.epochs for k in a.history)
    assert all(np.all(np.isfinite(a.history[k])) for k in a.history)
    assert 1 <= a.selected_epoch <= cfg.epochs
    assert a.selected_epoch == C.select_epoch(a.history["val"], cfg.alpha)
    assert a.checkpoints[0.0][0] == int(np.argmin(a.history["val"])) + 1
    assert a.history["train"][-1] < a.history["train"][0]
    assert a.param_count == 257


def test_train_adam_selected_params_match_history(short_runs, specimens):
    _, a, _ = short_runs
    ref = a.history["val"][a.selected_epoch - 1]
    val = C.loss(a.model, ds.select(specimens, ds.split(3).val_ids))
    assert val == pytest.approx(ref, rel=1e-10)


def test_constraints_at_every_checkpoint(short_runs):
    _, a, _ = short_runs
    mask = constraint_mask(a.model)
    leaves = jax.tree_util.tree_leaves(a.full_history)
    flags = jax.tree_util.tree_leaves(mask)
    assert leaves[0].shape[0] == 300
    assert all(np.min(w) >= 0.0 for w, m in zip(leaves, flags) if m)


def test_train_adam_rejects_phenomenological():
    with pytest.raises(ValueError):
        C.train_adam(init_model("hill48"), ds.split(1), C.TrainConfig(epochs=1))


def test_hybrid_stage_two_keeps_hill_frozen(specimens):
    cfg = C.TrainConfig(epochs=50, chunk=50)
    m = init_model("hybrid", hill=[0.3, 0.6, 0.4, 1.2, 1.5, 1.8])
    run = C.train_adam(m, ds.split(1), cfg, specimens)
    np.testing.assert_array_equal(run.model.params["hill"], m.params["hill"])


def test_write_loss_csv(short_runs, tmp_path):
    _, a, _ = short_runs
    path = tmp_path / "loss.csv"
    C.write_loss_csv(a, path, smoothing_window=20)
    data = np.genfromtxt(path, delimiter=",", names=True)
    assert data.dtype.names == ("epoch", "train", "val", "test", "val_smoothed")
    assert data["epoch"][-1] == 300
    np.testing.assert_allclose(data["train"], a.history["train"], rtol=1e-15)


# -- CMA-ES -----------------------------------------------------------------


def test_cmaes_sphere():
    x, f, hist, _ = C.cmaes_minimize(lambda X: np.sum(np.asarray(X) ** 2, axis=1), np.full(6, 2.0),
                                     np.full(6, -5.0), np.full(6, 5.0), sigma0=0.3, seed=1)
    assert np.linalg.norm(x) <= 1e-6
    assert np.all(np.diff(hist) <= 0)


def test_cmaes_all_nonfinite():
    with pytest.raises(C.TrainingError, match="non-finite"):
        C.cmaes_minimize(lambda X: np.full(len(X), np.nan), np.zeros(2), -np.ones(2), np.ones(2))


def test_default_population():
    assert C.default_population(6) == 9
    assert C.default_population(19) == 12


def test_train_cmaes_recovers_exact_hill():
    m, specimens = _exact_specimens()
    cfg = C.TrainConfig(optimizer="cmaes", restarts=0, seed=0)
    run = C.train_cmaes(init_model("hill48"), specimens, cfg)
    rep = C.error_report(run.model, specimens)
    assert rep.max_abs_f <= 1e-3 and rep.max_abs_dr <= 1e-5
    assert run.info["population"] == 9


def test_cmaes_deterministic(specimens):
    cfg = C.TrainConfig(optimizer="cmaes", restarts=0, seed=4, max_generations=40)
    a = C.train_cmaes(init_model("hill48"), specimens, cfg)
    b = C.train_cmaes(init_model("hill48"), specimens, cfg)
    assert np.array_equal(a.model.params["hill"], b.model.params["hill"])


# -- reports ----------------------------------------------------------------


def test_error_report_invariants(specimens):
    rep = C.error_report(init_model("hill48"), specimens)
    assert rep.max_abs_f >= rep.mean_abs_f >= 0
    assert rep.max_abs_dr >= rep.mean_abs_dr >= 0
    # isotropic model: |f| and |dr| are plain differences from the table
    assert rep.max_abs_f == pytest.approx(max(abs(525.0 - s.sigma_c) for s in specimens), abs=1e-8)
    assert rep.max_abs_dr == pytest.approx(max(abs(1.0 - s.r_c) for s in specimens), abs=1e-8)


def test_average_reports_is_columnwise_mean():
    reps = [C.ErrorReport(1, 0.5, 0.2, 0.1), C.ErrorReport(3, 1.5, 0.4, 0.3)]
    assert C.average_reports(reps).as_tuple() == (2.0, 1.0, 0.30000000000000004, 0.2)


def test_crossval_averaging_and_report(specimens):
    cfg = C.TrainConfig(optimizer="cmaes", restarts=0, max_generations=30)
    res = C.crossval("hill48", cfg, specimens, splits=(1, 2))
    d = res.to_dict()
    assert [r["split"] for r in d["runs"]] == [1, 2]
    for key in ("maxAbsF", "meanAbsF", "maxAbsDr", "meanAbsDr"):
        per = [r["metrics"]["test"][key] for r in d["runs"]]
        assert d["average"]["test"][key] == pytest.approx(np.mean(per), rel=1e-15)
