"""Loss assembly, Adam / CMA-ES training, retroactive epoch selection and
cross-validation over the published splits."""

import functools
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import cma
import jax
import jax.numpy as jnp
import numpy as np
import optax

from . import dataset as ds
from . import networks as nets
from .models import (
    KINDS,
    NEURAL,
    PHENOMENOLOGICAL,
    ModelError,
    effective_residual,
    homogenized,
    init_model,
    lankford,
    lankford_ratio,
    project,
)
from .networks import count_params
from .stress import uniaxial_stress

log = logging.getLogger(__name__)

HILL_BOUNDS = (0.0, 5.0)
BARLAT_C_BOUNDS = (0.0, 4.0)
EXPONENT_BOUNDS = (1.0 + 1e-6, 20.0)
FROZEN = {"hybrid": ("hill",)}


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss, all CMA-ES candidates invalid, ...)."""


@dataclass
class LossWeights:
    w_sigma: float = 10.0
    w_r: float = 1.0

    def __post_init__(self):
        if self.w_sigma < 0 or self.w_r < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 5e-3
    epochs: int = 50000
    seed: int = 0
    alpha: float = 10.0
    weights: LossWeights = field(default_factory=LossWeights)
    population_size: int = None
    sigma0: float = 0.3
    max_generations: int = 3000
    restarts: int = 2
    bounds: dict = None
    chunk: int = 1000
    keep_history: bool = False
    smoothing_window: int = 2000

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.optimizer = str(self.optimizer).lower().replace("-", "")
        if self.optimizer not in ("adam", "cmaes"):
            raise ValueError(f"optimizer must be 'adam' or 'cmaes', got {self.optimizer!r}")
        if int(self.epochs) < 1:
            raise ValueError("epochs must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")
        if self.max_generations < 1 or self.chunk < 1:
            raise ValueError("max_generations and chunk must be >= 1")
        self.epochs = int(self.epochs)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class ErrorReport:
    max_abs_f: float
    mean_abs_f: float
    max_abs_dr: float
    mean_abs_dr: float
    per_specimen: list = field(default_factory=list)

    def metrics(self):
        return {
            "maxAbsF": self.max_abs_f,
            "meanAbsF": self.mean_abs_f,
            "maxAbsDr": self.max_abs_dr,
            "meanAbsDr": self.mean_abs_dr,
        }

    def as_tuple(self):
        return (self.max_abs_f, self.mean_abs_f, self.max_abs_dr, self.mean_abs_dr)


@dataclass
class TrainRun:
    kind: str
    seed: int
    split: object
    history: dict
    selected_epoch: int
    model: object
    param_count: int
    checkpoints: dict = field(default_factory=dict)
    full_history: object = None
    info: dict = field(default_factory=dict)

    def model_at(self, alpha):
        epoch, params = self.checkpoints[alpha]
        return self.model.with_params(params)


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class SpecimenBatch:
    ids: tuple
    x: np.ndarray
    width: np.ndarray
    thick: np.ndarray
    r_c: np.ndarray

    @classmethod
    def build(cls, specimens, Y0):
        x, w, t = [], [], []
        for s in specimens:
            R = s.rotation
            x.append(uniaxial_stress(R, s.sigma_c / Y0))
            w.append(R[:, 0])
            t.append(R[:, 2])
        return cls(
            tuple(s.id for s in specimens),
            np.array(x).reshape(-1, 6),
            np.array(w).reshape(-1, 3),
            np.array(t).reshape(-1, 3),
            np.array([s.r_c for s in specimens], dtype=float),
        )

    def mask(self, ids):
        ids = set(ids)
        return np.array([1.0 if i in ids else 0.0 for i in self.ids])


def specimen_terms(spec, params, batch, weights):
    """Per-specimen loss contributions w_s (h/Y0 - 1)^2 + w_r (r/r_c - 1)^2."""
    x, w, t, rc = (jnp.asarray(a) for a in (batch.x, batch.width, batch.thick, batch.r_c))
    h = jax.vmap(lambda xi: homogenized(spec, params, xi))(x)
    r = jax.vmap(lambda xi, wi, ti: lankford_ratio(spec, params, xi, wi, ti)[0])(x, w, t)
    return weights.w_sigma * (h - 1.0) ** 2 + weights.w_r * (r / rc - 1.0) ** 2


def loss(model, specimens, weights=None):
    """Total loss of ``model`` over ``specimens`` (sum of per-specimen terms)."""
    weights = weights or LossWeights()
    # canonical order: batched evaluation rounding can depend on position
    batch = SpecimenBatch.build(sorted(specimens, key=lambda s: s.id), model.Y0)
    terms = np.asarray(specimen_terms(model.spec, model.params, batch, weights))
    if not np.all(np.isfinite(terms)):
        bad = [i for i, v in zip(batch.ids, terms) if not np.isfinite(v)]
        raise ModelError(f"r-value singular or no yield point for specimen(s) {bad}")
    return float(np.sum(np.sort(terms)))


# ---------------------------------------------------------------------------
# epoch selection


def generalization_loss(val_history):
    v = np.asarray(val_history, dtype=float)
    return 100.0 * (v / np.minimum.accumulate(v) - 1.0)


def select_epoch(val_history, alpha):
    """Largest 1-based epoch whose generalization loss is at most ``alpha`` percent."""
    v = np.asarray(val_history, dtype=float)
    if v.size == 0:
        raise ValueError("empty validation history")
    ok = np.flatnonzero(generalization_loss(v) <= alpha)
    return int(ok[-1]) + 1


def moving_average(history, window=2000):
    """Trailing moving average (shorter window at the start); reporting only."""
    h = np.asarray(history, dtype=float)
    c = np.cumsum(np.insert(h, 0, 0.0))
    n = np.arange(1, h.size + 1)
    lo = np.maximum(n - window, 0)
    return (c[n] - c[lo]) / (n - lo)


class _EpochSelector:
    """Online version of :func:`select_epoch` keeping one checkpoint per alpha."""

    def __init__(self, alphas):
        self.alphas = tuple(alphas)
        self.run_min = np.inf
        self.slots = {}

    def update(self, offset, monitor, params_stack):
        running = np.minimum.accumulate(np.minimum(monitor, self.run_min))
        lgen = 100.0 * (monitor / running - 1.0)
        self.run_min = running[-1]
        for a in self.alphas:
            ok = np.flatnonzero(lgen <= a)
            if ok.size:
                i = int(ok[-1])
                params = jax.tree_util.tree_map(lambda p, i=i: np.array(p[i]), params_stack)
                self.slots[a] = (offset + i + 1, params)


# ---------------------------------------------------------------------------
# Adam


def adam_descent(loss_fn, params, learning_rate=5e-3, epochs=1000, project_fn=None):
    """Projected Adam on an arbitrary differentiable ``loss_fn``.

    Same update/projection order as :func:`train_adam`; returns
    ``(params, loss_history)`` with the loss recorded before each update.
    """
    opt = optax.adam(learning_rate)
    project_fn = project_fn or (lambda p: p)

    def step(carry, _):
        p, state = carry
        val, grads = jax.value_and_grad(loss_fn)(p)
        updates, state = opt.update(grads, state, p)
        return (project_fn(optax.apply_updates(p, updates)), state), val

    params = project_fn(params)
    (params, _), hist = jax.jit(lambda c: jax.lax.scan(step, c, None, length=epochs))(
        (params, opt.init(params)))
    return params, np.asarray(hist)


class _ChunkRunner:
    """Jitted scan over ``n`` projected-Adam epochs, cached per model structure."""

    def __init__(self, spec, lr, weights, frozen):
        self.spec, self.frozen = spec, frozen
        self.weights = LossWeights(*weights)
        self.lr = lr
        self._jit = jax.jit(self._run, static_argnums=3)

    def optimizer(self, params):
        labels = {k: jax.tree_util.tree_map(lambda _, k=k: "frozen" if k in self.frozen else "adam", v)
                  for k, v in params.items()}
        return optax.multi_transform(
            {"adam": optax.adam(self.lr), "frozen": optax.set_to_zero()}, labels)

    def init(self, params):
        return self.optimizer(params).init(params)

    def _run(self, carry, arrays, masks, n):
        spec, weights = self.spec, self.weights
        opt = self.optimizer(carry[0])
        batch = SpecimenBatch((), *arrays)
        mask = _mask_for(spec)

        def objective(params):
            terms = specimen_terms(spec, params, batch, weights)
            return jnp.sum(terms * masks[0]), terms

        def step(c, _):
            params, state = c
            (ltrain, terms), grads = jax.value_and_grad(objective, has_aux=True)(params)
            updates, state = opt.update(grads, state, params)
            new = mask(optax.apply_updates(params, updates))
            losses = jnp.stack([ltrain, jnp.sum(terms * masks[1]), jnp.sum(terms * masks[2])])
            return (new, state), (losses, params)

        return jax.lax.scan(step, carry, None, length=n)

    def __call__(self, carry, arrays, masks, n):
        return self._jit(carry, arrays, masks, n)


def _mask_for(spec):
    """Projection onto the weight constraints for models of ``spec``."""
    arch = spec.arch

    def proj(params):
        out = dict(params)
        for name, a in arch.items():
            out[name] = nets.enforce_weight_constraints(
                params[name], nets.constraint_mask(params[name], a.monotone))
        return out

    return proj


@functools.lru_cache(maxsize=32)
def _chunk_runner(spec, lr, weights, frozen):
    return _ChunkRunner(spec, lr, weights, frozen)


def train_adam(model, split_spec, config, specimens=None, alphas=None):
    """Projected Adam over the full epoch budget with retroactive epoch selection.

    Losses recorded for epoch ``i`` are those of the parameters entering the
    ``i``-th update.  When the split has no validation specimens the epoch of
    minimum training loss is selected.
    """
    if model.kind not in NEURAL:
        raise ValueError(f"train_adam needs a neural model kind, got {model.kind!r}")
    specimens = specimens if specimens is not None else ds.load_specimens()
    alphas = tuple(sorted(set((config.alpha,) + tuple(alphas or ()))))
    batch = SpecimenBatch.build(specimens, model.Y0)
    masks = {k: jnp.asarray(batch.mask(split_spec.ids(k))) for k in ("train", "val", "test")}
    has_val = bool(split_spec.val_ids)
    runner = _chunk_runner(model.spec, config.learning_rate,
                           (config.weights.w_sigma, config.weights.w_r),
                           FROZEN.get(model.kind, ()))
    arrays = tuple(jnp.asarray(a) for a in (batch.x, batch.width, batch.thick, batch.r_c))
    mask_arr = jnp.stack([masks["train"], masks["val"], masks["test"]])
    params = project(model, model.params)
    carry = (params, runner.init(params))
    hist = np.empty((config.epochs, 3))
    selector = _EpochSelector(alphas)
    full = [] if config.keep_history else None
    done = 0
    t0 = time.perf_counter()
    while done < config.epochs:
        n = min(config.chunk, config.epochs - done)
        carry, (losses, pstack) = runner(carry, arrays, mask_arr, n)
        losses = np.asarray(losses)
        finite = np.all(np.isfinite(losses), axis=1)
        if not finite.all():
            bad = done + int(np.flatnonzero(~finite)[0]) + 1
            raise TrainingError(f"non-finite loss at epoch {bad}")
        hist[done:done + n] = losses
        monitor = losses[:, 1] if has_val else losses[:, 0]
        selector.update(done, monitor, pstack)
        if full is not None:
            full.append(jax.tree_util.tree_map(np.asarray, pstack))
        done += n
    elapsed = time.perf_counter() - t0

    selected, sel_params = selector.slots[config.alpha]
    history = {"train": hist[:, 0], "val": hist[:, 1], "test": hist[:, 2]}
    full_history = None
    if full is not None:
        full_history = jax.tree_util.tree_map(lambda *a: np.concatenate(a), *full)
    info = {"seconds": elapsed, "final_params": jax.tree_util.tree_map(np.asarray, carry[0]),
            "selection_monitor": "val" if has_val else "train"}
    return TrainRun(model.kind, config.seed, split_spec, history, selected,
                    model.with_params(sel_params), count_params(params),
                    selector.slots, full_history, info)


# ---------------------------------------------------------------------------
# CMA-ES


def _cma_layout(model, bounds=None):
    """(to_params, x0, lower, upper) for the coefficient vector of ``model``."""
    bounds = bounds or {}
    if model.kind in ("hill48", "hybrid"):
        lo, hi = bounds.get("hill", HILL_BOUNDS)
        x0 = np.asarray(model.params["hill"], dtype=float)
        return (lambda v: {"hill": v}), x0, np.full(6, lo), np.full(6, hi)
    if model.kind == "yld2004":
        clo, chi = bounds.get("c", BARLAT_C_BOUNDS)
        alo, ahi = bounds.get("a", EXPONENT_BOUNDS)
        alo = max(alo, EXPONENT_BOUNDS[0])
        p = model.params
        x0 = np.concatenate([np.asarray(p["c1"]), np.asarray(p["c2"]), [float(p["a"])]])
        lower = np.r_[np.full(18, clo), alo]
        upper = np.r_[np.full(18, chi), ahi]
        return (lambda v: {"c1": v[:9], "c2": v[9:18], "a": v[18]}), x0, lower, upper
    raise ValueError(f"CMA-ES is only set up for phenomenological coefficients, not {model.kind!r}")


def default_population(n):
    return 4 + int(math.floor(3.0 * math.log(n)))


def cmaes_minimize(fun_batch, x0, lower, upper, sigma0=0.3, seed=0, popsize=None,
                   max_generations=3000, restarts=0, tol=1e-13):
    """Box-constrained CMA-ES; returns (best_x, best_f, per-generation best, stop info).

    ``fun_batch`` maps an (m, n) array of candidates to m objective values.
    Step sizes are ``sigma0`` times each coordinate's range.  With
    ``restarts > 0`` the search is restarted from uniform random points in the
    box with doubled population each time (IPOP); the best-ever candidate over
    all restarts is returned.
    """
    x0 = np.asarray(x0, dtype=float)
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    n = x0.size
    rng = np.random.default_rng(seed)
    pop = popsize or default_population(n)
    best_x, best_f, history, stops = x0.copy(), np.inf, [], []
    start = x0
    for attempt in range(restarts + 1):
        opts = {
            "bounds": [list(lower), list(upper)],
            "CMA_stds": list(upper - lower),
            "popsize": pop,
            "maxiter": max_generations,
            "seed": int(seed) * 1000 + attempt + 1,  # 0 would mean "random" to cma
            "tolfun": tol,
            "tolfunhist": tol,
            "tolx": 1e-12,
            "verbose": -9,
        }
        es = cma.CMAEvolutionStrategy(start, sigma0, opts)
        while not es.stop():
            cands = es.ask()
            vals = np.asarray(fun_batch(np.asarray(cands)), dtype=float)
            finite = np.isfinite(vals)
            if not finite.any():
                raise TrainingError(
                    f"all CMA-ES candidates non-finite at generation {es.countiter + 1}")
            penalty = 10.0 * np.max(np.abs(vals[finite])) + 1e6
            vals = np.where(finite, vals, penalty)
            es.tell(cands, list(vals))
            i = int(np.argmin(vals))
            if finite[i] and vals[i] < best_f:
                best_x, best_f = np.asarray(cands[i]).copy(), float(vals[i])
            history.append(best_f)
        stops.append({k: str(v) for k, v in es.stop().items()})
        pop *= 2
        start = lower + rng.random(n) * (upper - lower)
    return best_x, best_f, np.asarray(history), stops


def train_cmaes(model, specimens, config, split_spec=None):
    """CMA-ES fit of phenomenological coefficients; the best-ever candidate is kept.

    For a hybrid model the Hill part is fitted (stage 1) and the network is left
    untouched.
    """
    if model.kind not in PHENOMENOLOGICAL + ("hybrid",):
        raise ValueError(f"train_cmaes handles hill48/yld2004 (and hybrid stage 1), not {model.kind!r}")
    split_spec = split_spec or ds.full_split(specimens)
    fit_kind = "hill48" if model.kind == "hybrid" else model.kind
    base = init_model(fit_kind, Y0=model.Y0)
    if model.kind != "hybrid":
        base = model
    to_params, x0, lower, upper = _cma_layout(base, config.bounds)
    batch = SpecimenBatch.build(specimens, model.Y0)
    masks = {k: batch.mask(split_spec.ids(k)) for k in ("train", "val", "test")}
    spec, weights = base.spec, config.weights
    tmask = jnp.asarray(masks["train"])

    @jax.jit
    def batch_loss(X):
        return jax.vmap(lambda v: jnp.sum(specimen_terms(spec, to_params(v), batch, weights) * tmask))(X)

    t0 = time.perf_counter()
    best_x, best_f, history, stop = cmaes_minimize(
        batch_loss, x0, lower, upper, config.sigma0, config.seed,
        config.population_size, config.max_generations, config.restarts,
    )
    params = dict(model.params)
    params.update(to_params(jnp.asarray(best_x)))
    fitted = model.with_params(params)
    terms = np.asarray(specimen_terms(spec, to_params(jnp.asarray(best_x)), batch, weights))
    losses = {k: float(np.sum(terms * m)) for k, m in masks.items()}
    info = {
        "seconds": time.perf_counter() - t0,
        "generations": len(history),
        "population": config.population_size or default_population(x0.size),
        "sigma0": config.sigma0,
        "bounds": {"lower": lower.tolist(), "upper": upper.tolist()},
        "restarts": config.restarts,
        "stop": stop,
        "losses": losses,
    }
    log.info("CMA-ES %s seed=%d: loss %.6g after %d generations", model.kind, config.seed,
             best_f, len(history))
    hist = {"train": history, "val": np.full_like(history, np.nan), "test": np.full_like(history, np.nan)}
    return TrainRun(model.kind, config.seed, split_spec, hist, int(np.argmin(history)) + 1,
                    fitted, x0.size, {}, None, info)


# ---------------------------------------------------------------------------
# metrics and harness


def error_report(model, specimens):
    """Absolute yield residuals (MPa) and absolute r-value errors over ``specimens``."""
    rows = []
    for s in specimens:
        f = effective_residual(model, ds.specimen_stress(s))
        r = lankford(model, s.plane, s.angle)
        rows.append({"id": s.id, "f": f, "r_hat": r, "r_c": s.r_c, "dr": r - s.r_c})
    if not rows:
        nan = float("nan")
        return ErrorReport(nan, nan, nan, nan, [])
    af = np.abs([row["f"] for row in rows])
    ar = np.abs([row["dr"] for row in rows])
    return ErrorReport(float(af.max()), float(af.mean()), float(ar.max()), float(ar.mean()), rows)


def average_reports(reports):
    """Column-wise mean of (max|f|, mean|f|, max|dr|, mean|dr|) over reports."""
    arr = np.array([r.as_tuple() for r in reports])
    m = arr.mean(axis=0)
    return ErrorReport(*(float(v) for v in m))


def fit(kind, specimens, split_spec, config, model=None):
    """Train one model of ``kind`` on ``split_spec``; dispatches on the kind."""
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    model = model or init_model(kind, seed=config.seed)
    if kind in PHENOMENOLOGICAL:
        return train_cmaes(model, specimens, config, split_spec)
    if kind == "hybrid":
        stage1 = train_cmaes(model, specimens, config, split_spec)
        run = train_adam(stage1.model, split_spec, config, specimens)
        run.info["stage1"] = stage1.info
        return run
    return train_adam(model, split_spec, config, specimens)


@dataclass
class SplitResult:
    split: int
    run: TrainRun
    reports: dict

    def to_dict(self):
        return {
            "modelKind": self.run.kind,
            "split": self.split,
            "seed": self.run.seed,
            "selectedEpoch": self.run.selected_epoch,
            "realizedParamCount": self.run.param_count,
            "metrics": {k: r.metrics() for k, r in self.reports.items()},
        }


@dataclass
class CrossvalResult:
    kind: str
    config: TrainConfig
    splits: list
    average: dict

    def to_dict(self):
        return {
            "modelKind": self.kind,
            "alpha": self.config.alpha,
            "seed": self.config.seed,
            "epochs": self.config.epochs,
            "runs": [s.to_dict() for s in self.splits],
            "average": {k: r.metrics() for k, r in self.average.items()},
        }


def evaluate_split(model, specimens, split_spec):
    return {k: error_report(model, ds.select(specimens, split_spec.ids(k)))
            for k in ("train", "val", "test")}


def crossval(kind, config, specimens=None, splits=range(1, 10), on_split=None):
    """Train ``kind`` on each published split and average the error metrics."""
    specimens = specimens if specimens is not None else ds.load_specimens()
    results = []
    for k in splits:
        sp = ds.split(k)
        try:
            run = fit(kind, specimens, sp, config)
            reports = evaluate_split(run.model, specimens, sp)
        except (TrainingError, ModelError, FloatingPointError) as exc:
            raise TrainingError(f"split {k}: {exc}") from exc
        res = SplitResult(k, run, reports)
        results.append(res)
        if on_split is not None:
            on_split(res)
    average = {w: average_reports([r.reports[w] for r in results]) for w in ("train", "val", "test")}
    return CrossvalResult(kind, config, results, average)


def write_loss_csv(run, path, smoothing_window=None):
    """Per-epoch loss history as CSV; optional smoothed validation column."""
    h = run.history
    cols = [np.arange(1, len(h["train"]) + 1), h["train"], h["val"], h["test"]]
    header = "epoch,train,val,test"
    if smoothing_window:
        cols.append(moving_average(h["val"], smoothing_window))
        header += ",val_smoothed"
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="",
               fmt=["%d"] + ["%.17g"] * (len(cols) - 1))
