"""Command-line interface: calibrate, crossval, evaluate, surface, simulate, report."""

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import calibration as cal
from . import dataset as ds
from . import devplane as dp
from . import matpoint as mp
from .models import KINDS, ModelError, ModelFileError, init_model, load_model, save_model

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("convexyield")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _parse_seeds(text):
    text = str(text).strip()
    try:
        if ".." in text:
            a, b = (int(v) for v in text.split("..", 1))
            if b < a:
                raise ValueError
            return list(range(a, b + 1))
        return [int(text)]
    except ValueError:
        raise ConfigError(f"--seed must be an integer or a range A..B, got {text!r}") from None


def load_config(path):
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping of TrainConfig keys")
    return data


def build_config(args, kind, seed):
    data = load_config(getattr(args, "config", None))
    if getattr(args, "alpha", None) is not None:
        data["alpha"] = args.alpha
    if getattr(args, "epochs", None) is not None:
        data["epochs"] = args.epochs
    data["seed"] = seed
    data.setdefault("optimizer", "cmaes" if kind in ("hill48", "yld2004") else "adam")
    try:
        return cal.TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def config_hash(config):
    blob = json.dumps(config.to_dict(), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def manifest(config, extra=None):
    m = {
        "seed": config.seed,
        "configHash": config_hash(config),
        "config": json.loads(json.dumps(config.to_dict(), default=str)),
        "datasetChecksum": ds.dataset_checksum(),
        "datasetPath": os.environ.get("CONVEXYIELD_DATASET", "bundled"),
    }
    m.update(extra or {})
    return m


def _check_kind(kind):
    if kind not in KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; valid kinds: {', '.join(KINDS)}")


def _split_spec(args, specimens):
    if args.full or args.split is None:
        return ds.full_split(specimens), "full"
    try:
        return ds.split(args.split), args.split
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _dump_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, allow_nan=True)
        fh.write("\n")


def _reports_dict(model, specimens, split_spec):
    return {k: r.metrics() for k, r in cal.evaluate_split(model, specimens, split_spec).items()
            if split_spec.ids(k)}


def _train_one(kind, specimens, split_spec, config, split_label):
    run = cal.fit(kind, specimens, split_spec, config)
    model = run.model
    model.metadata = manifest(config, {
        "split": split_label,
        "alpha": config.alpha,
        "selectedEpoch": run.selected_epoch,
        "realizedParamCount": run.param_count,
    })
    return run, model


# ---------------------------------------------------------------------------
# subcommands


def cmd_calibrate(args):
    _check_kind(args.model)
    specimens = ds.load_specimens()
    split_spec, label = _split_spec(args, specimens)
    seeds = _parse_seeds(args.seed)
    out = Path(args.out)
    summaries = []
    for seed in seeds:
        config = build_config(args, args.model, seed)
        run, model = _train_one(args.model, specimens, split_spec, config, label)
        path = out if len(seeds) == 1 else out.with_name(f"{out.stem}_seed{seed}{out.suffix}")
        path.parent.mkdir(parents=True, exist_ok=True)
        metrics = _reports_dict(model, specimens, split_spec)
        model.metadata["metrics"] = metrics
        save_model(model, path)
        loss_path = path.with_suffix(".loss.csv")
        cal.write_loss_csv(run, loss_path, config.smoothing_window if config.optimizer == "adam" else None)
        summaries.append({"seed": seed, "model": str(path), "metrics": metrics})
    result = {"modelKind": args.model, "split": label, "runs": summaries}
    if len(seeds) > 1:
        result["average"] = {
            w: {k: float(np.mean([s["metrics"][w][k] for s in summaries])) for k in summaries[0]["metrics"][w]}
            for w in summaries[0]["metrics"]
        }
    print(json.dumps(result, indent=1))
    return 0


def cmd_crossval(args):
    _check_kind(args.model)
    specimens = ds.load_specimens()
    config = build_config(args, args.model, _parse_seeds(args.seed)[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = [int(s) for s in args.splits.split(",")] if args.splits else list(range(1, 10))
    for k in splits:
        if not 1 <= k <= 9:
            raise ConfigError(f"split index must be in 1..9, got {k}")

    def on_split(res):
        model = res.run.model
        model.metadata = manifest(config, {
            "split": res.split, "alpha": config.alpha,
            "selectedEpoch": res.run.selected_epoch,
            "realizedParamCount": res.run.param_count,
            "metrics": {k: r.metrics() for k, r in res.reports.items()},
        })
        save_model(model, out / f"{args.model}_split{res.split}.json")
        cal.write_loss_csv(res.run, out / f"{args.model}_split{res.split}.loss.csv",
                           config.smoothing_window if config.optimizer == "adam" else None)
        log.info("split %d done (selected epoch %d)", res.split, res.run.selected_epoch)

    result = cal.crossval(args.model, config, specimens, splits, on_split=on_split)
    report = result.to_dict()
    report["manifest"] = manifest(config)
    _dump_json(report, out / "crossval.json")
    print(json.dumps(report["average"], indent=1))
    return 0


def cmd_evaluate(args):
    model = load_model(args.model_file)
    specimens = ds.load_specimens()
    if args.split is None:
        split_spec = ds.full_split(specimens)
    else:
        try:
            split_spec = ds.split(args.split)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    reports = cal.evaluate_split(model, specimens, split_spec)
    out = {k: {**r.metrics(), "perSpecimen": r.per_specimen} for k, r in reports.items()
           if split_spec.ids(k)}
    text = json.dumps(out, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_surface(args):
    model = load_model(args.model_file)
    try:
        basis = dp.resolve_basis(args.basis)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.angles < 8:
        raise ConfigError("--angles must be >= 8")
    points = dp.trace_locus(model, args.angles, basis)
    dp.write_locus_csv(points, args.out, [f"model: {args.model_file}", f"basis: {args.basis}",
                                          "basis rows: " + " ".join(f"{v:.17g}" for v in basis.ravel())])
    return 0


def cmd_simulate(args):
    model = load_model(args.model_file)
    specimens = ds.load_specimens()
    try:
        (spec,) = ds.select(specimens, [args.specimen])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.steps < 1 or args.strain < 0:
        raise ConfigError("--steps must be >= 1 and --strain >= 0")
    traj = mp.simulate_uniaxial(model, spec.rotation, args.strain, args.steps)
    traj.write_csv(args.out, [f"model: {args.model_file}", f"specimen: {args.specimen}",
                              f"E: {mp.ElasticConstants().E}", f"nu: {mp.ElasticConstants().nu}",
                              f"voce: Y0={model.Y0} Rsat={mp.VoceParams().Rsat} gamma={mp.VoceParams().gamma}"])
    return 0


METRIC_KEYS = ("maxAbsF", "meanAbsF", "maxAbsDr", "meanAbsDr")


def cmd_report(args):
    rows = []
    for p in args.inputs:
        path = Path(p)
        if path.is_dir():
            path = path / "crossval.json"
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report {path}: {exc}") from None
        if "average" not in data or "modelKind" not in data:
            raise ConfigError(f"{path}: not a crossval report")
        rows.append(data)
    lines = []
    for which in ("train", "val", "test"):
        lines.append(f"## {which}")
        lines.append("| Method | Max |f| | Mean |f| | Max |dr| | Mean |dr| |")
        lines.append("|---|---|---|---|---|")
        for d in rows:
            m = d["average"][which]
            lines.append(f"| {d['modelKind']} | " + " | ".join(f"{m[k]:.4g}" for k in METRIC_KEYS) + " |")
        lines.append("")
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="convexyield", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def train_flags(sp):
        sp.add_argument("--model", required=True, help=f"one of: {', '.join(KINDS)}")
        sp.add_argument("--alpha", type=float, default=None)
        sp.add_argument("--seed", default="0", help="integer or range A..B")
        sp.add_argument("--config", default=None, help="YAML/JSON file with TrainConfig keys")
        sp.add_argument("--epochs", type=int, default=None)

    c = sub.add_parser("calibrate", help="train one model")
    train_flags(c)
    g = c.add_mutually_exclusive_group()
    g.add_argument("--split", type=int, default=None)
    g.add_argument("--full", action="store_true")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    c = sub.add_parser("crossval", help="nine-split cross-validation")
    train_flags(c)
    c.add_argument("--splits", default=None, help="comma-separated subset of 1..9")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_crossval)

    c = sub.add_parser("evaluate", help="error metrics of a model file")
    c.add_argument("--model-file", required=True)
    c.add_argument("--split", type=int, default=None)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("surface", help="deviatoric-plane yield locus")
    c.add_argument("--model-file", required=True)
    c.add_argument("--angles", type=int, default=360)
    c.add_argument("--basis", default="material")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_surface)

    c = sub.add_parser("simulate", help="uniaxial material-point simulation")
    c.add_argument("--model-file", required=True)
    c.add_argument("--specimen", type=int, required=True)
    c.add_argument("--strain", type=float, default=0.05)
    c.add_argument("--steps", type=int, default=500)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_simulate)

    c = sub.add_parser("report", help="tabulate crossval aggregates")
    c.add_argument("inputs", nargs="+", help="crossval.json files or their directories")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ModelFileError, ds.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (cal.TrainingError, ModelError, mp.ReturnMapError, mp.SimulationError,
            dp.LocusError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
