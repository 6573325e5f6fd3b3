"""Command-line front end: train, certify, conditions, simulate, eval.

Every command reads a JSON config (paths inside it are relative to the config
file), writes its outputs to one directory and is deterministic given the seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import ensemble as ens
from . import model as model_mod
from . import smoothing as sm
from . import statsim
from . import training as tr
from .numstats import RngStream

OUT_ENV = "ROBUST_ENSEMBLES_OUT"
MANIFEST = "manifest.json"
DEFAULT_RADII = [0.0, 0.25, 0.5, 0.75, 1.0]


class ConfigError(ValueError):
    pass


def _check_keys(section: dict, allowed, where: str) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return section


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return section[key]


def _build(cls, section: dict, where: str, exclude=()):
    names = [f.name for f in dataclasses.fields(cls) if f.name not in exclude]
    _check_keys(section, names, where)
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# datasets and checkpoints

DATASET_KEYS = {"kind", "n", "noise_std", "seed", "centers", "per_center", "images", "labels",
                "train_fraction", "max_n", "stride", "shuffle"}


def load_splits(section: dict, base: Path):
    _check_keys(section, DATASET_KEYS, "dataset")
    kind = section.get("kind", "two_moons")
    seed = int(section.get("seed", 0))
    if kind == "two_moons":
        full = data_mod.gen_two_moons(int(section.get("n", 400)), float(section.get("noise_std", 0.1)), seed)
    elif kind == "blobs":
        full = data_mod.gen_blobs(_require(section, "centers", "dataset"), int(section.get("per_center", 100)),
                                  float(section.get("noise_std", 1.0)), seed)
    elif kind == "idx":
        full = data_mod.read_idx(base / _require(section, "images", "dataset"),
                                 base / _require(section, "labels", "dataset"))
    else:
        raise ConfigError(f"dataset kind must be two_moons, blobs or idx, not {kind!r}")
    return data_mod.split_and_subsample(full, float(section.get("train_fraction", 0.8)),
                                        section.get("max_n"), int(section.get("stride", 1)), seed,
                                        bool(section.get("shuffle", True)))


def load_checkpoints(path: Path) -> tuple[list, dict]:
    manifest_path = path / MANIFEST if path.is_dir() else path
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    members = [model_mod.load(manifest_path.parent / name) for name in manifest["members"]]
    return members, manifest


def _test_split(cfg: dict, base: Path):
    _, test = load_splits(_require(cfg, "dataset", "config"), base)
    if test is None:
        raise ConfigError("the dataset section leaves no test points")
    limit = cfg.get("max_points")
    return test if limit is None else test.subset(np.arange(min(int(limit), len(test))))


def _target(members, protocol: str, weights):
    if protocol == ens.WE:
        return ens.EnsembleSpec.weighted(members, weights)
    if protocol == ens.MME:
        return ens.EnsembleSpec.max_margin(members)
    if protocol == "single":
        return members[0]
    raise ConfigError(f"protocol must be WE, MME or single, not {protocol!r}")


# commands

TRAIN_KEYS = {"seed", "jobs", "out", "dataset", "model", "members", "training"}


def cmd_train(cfg: dict, base: Path, out: Path, seed: int, jobs: int) -> None:
    _check_keys(cfg, TRAIN_KEYS, "config")
    train_set, _ = load_splits(_require(cfg, "dataset", "config"), base)
    if train_set is None:
        raise ConfigError("the dataset section leaves no training points")
    arch = _check_keys(cfg.get("model", {}), {"hidden", "activation"}, "model")
    hidden = [int(h) for h in arch.get("hidden", [32, 32])]
    activation = arch.get("activation", "softplus")
    count = int(cfg.get("members", 3))
    if count < 1:
        raise ConfigError("members must be >= 1")
    tcfg = _build(tr.TrainingConfig, dict(cfg.get("training", {}), seed=seed), "training")
    root = RngStream(seed)
    members = [model_mod.init_random(train_set.dim, hidden, train_set.num_classes, root.fork(1000 + i),
                                     activation) for i in range(count)]
    result = tr.train(members, train_set, tcfg)
    names = []
    for i, m in enumerate(result.members):
        name = f"member_{i}.json"
        model_mod.save(m, out / name)
        names.append(name)
    tr.write_history_csv(result.history, out / "history.csv")
    _dump_json({"members": names, "dims": result.members[0].dims, "activation": activation,
                "training": tcfg.to_dict(), "seed": seed, "dataset": cfg["dataset"]}, out / MANIFEST)


CERTIFY_KEYS = {"seed", "jobs", "out", "checkpoints", "dataset", "smoothing", "protocol", "weights",
                "radii", "max_points"}


def cmd_certify(cfg: dict, base: Path, out: Path, seed: int, jobs: int) -> None:
    _check_keys(cfg, CERTIFY_KEYS, "config")
    members, _ = load_checkpoints(base / _require(cfg, "checkpoints", "config"))
    spec = _build(sm.SmoothingSpec, cfg.get("smoothing", {"sigma": 0.25}), "smoothing")
    protocol = cfg.get("protocol", ens.WE)
    target = _target(members, protocol, cfg.get("weights"))
    test = _test_split(cfg, base)
    records = sm.certify_many(target, spec, test.features, test.labels, seed, jobs)
    radii = [float(r) for r in cfg.get("radii", DEFAULT_RADII)]
    curve = sm.certified_accuracy_curve(records, radii)
    sm.write_records_csv(records, out / "records.csv")
    _dump_json({"strategy": spec.strategy, "protocol": protocol, "sigma": spec.sigma, "n": spec.n,
                "alpha": spec.alpha, "count": len(records), "radii": curve.radii,
                "certified_accuracy": curve.accuracy, "acr": curve.acr,
                "abstained": sum(r.abstain for r in records)}, out / "summary.json")


CONDITIONS_KEYS = {"seed", "jobs", "out", "checkpoints", "dataset", "beta", "r", "protocol", "weights",
                   "delta", "cos_theta", "max_points"}


def _conditions_one(members, protocol, weights, x, y, r, beta, delta, cos_theta) -> dict:
    entry: dict = {"label": int(y)}
    try:
        if protocol == ens.WE:
            entry["verdict"] = ens.check_we_robustness(members, weights, x, y, r, beta).to_dict()
            entry["eri"] = ens.eri_we(members, weights, x, y, r).to_dict()
            entry["max_radius"] = ens.max_certified_radius_we(members, weights, x, y, beta)
        elif protocol == ens.MME:
            entry["verdict"] = ens.check_mme_robustness(members, x, y, r, beta).to_dict()
        else:
            entry["verdict"] = ens.check_single_robustness(members[0], x, y, r, beta).to_dict()
    except (ens.MispredictionError, ens.CapabilityError) as exc:
        entry["verdict"] = {"status": type(exc).__name__.replace("Error", ""), "detail": str(exc)}
    if len(members) == 2 and protocol in (ens.WE, ens.MME):
        try:
            b = ens.ensemble_radius_bound(members, weights, x, y, r, delta, cos_theta, protocol)
            entry["ensemble_bound"] = dataclasses.asdict(b)
        except (ValueError, ZeroDivisionError) as exc:
            entry["ensemble_bound"] = {"error": str(exc)}
    return entry


def cmd_conditions(cfg: dict, base: Path, out: Path, seed: int, jobs: int) -> None:
    _check_keys(cfg, CONDITIONS_KEYS, "config")
    members, _ = load_checkpoints(base / _require(cfg, "checkpoints", "config"))
    beta = float(_require(cfg, "beta", "config"))
    r = float(cfg.get("r", 0.1))
    protocol = cfg.get("protocol", ens.WE)
    if protocol not in (ens.WE, ens.MME, "single"):
        raise ConfigError(f"protocol must be WE, MME or single, not {protocol!r}")
    weights = cfg.get("weights") or [1.0] * len(members)
    delta = float(cfg.get("delta", 0.1))
    cos_theta = float(cfg.get("cos_theta", 0.0))
    test = _test_split(cfg, base)
    entries = []
    for i, (x, y) in enumerate(zip(test.features, test.labels)):
        entry = _conditions_one(members, protocol, weights, x, int(y), r, beta, delta, cos_theta)
        entries.append(dict(entry, id=i))
    _dump_json({"protocol": protocol, "beta": beta, "r": r, "inputs": entries}, out / "verdicts.json")


SIM_KEYS = {
    "transferability": {"n", "trials", "lambda2", "lambda1_range", "a_range", "inner_draws", "sigma", "weights"},
    "bound_sweep": {"a", "b", "lambda2", "lambda1_values", "ns", "p", "sigma"},
    "thresholds": {"mus", "lambda2", "ns"},
    "roc": {"checkpoints", "dataset", "sigma", "m", "smoothing", "max_points", "weights"},
}


def cmd_simulate(cfg: dict, base: Path, out: Path, seed: int, jobs: int) -> None:
    experiment = _require(cfg, "experiment", "config")
    if experiment not in SIM_KEYS:
        raise ConfigError(f"experiment must be one of {sorted(SIM_KEYS)}")
    params = {k: v for k, v in cfg.items() if k not in ("experiment", "seed", "jobs", "out")}
    _check_keys(params, SIM_KEYS[experiment], f"{experiment} config")
    if experiment == "transferability":
        ns = params.pop("n", [3, 10, 20])
        ns = [ns] if isinstance(ns, int) else list(ns)
        for key in ("lambda1_range", "a_range", "weights"):
            if params.get(key) is not None:
                params[key] = tuple(params[key])
        summary = {}
        for n in ns:
            sim_cfg = _build(statsim.SimulationConfig, dict(params, n=int(n), seed=seed), "transferability")
            result = statsim.simulate_transferability(sim_cfg, jobs)
            statsim.write_simulation_csv(result, out / f"transferability_n{n}.csv")
            summary[str(n)] = {"spearman": result.spearman(), "trials": len(result.trials),
                               "clamped": sum(t.clamped for t in result.trials)}
        _dump_json({"experiment": experiment, "seed": seed, "by_n": summary}, out / "summary.json")
    elif experiment == "bound_sweep":
        rows = statsim.bound_sweep(float(params.get("a", 0.6)), float(params.get("b", 1.0)),
                                   float(params.get("lambda2", 1.0)),
                                   params.get("lambda1_values", list(np.round(np.linspace(0.05, 1.0, 20), 4))),
                                   params.get("ns", [1, 2, 3, 5, 10, 20, 40, 41]),
                                   float(params.get("p", 0.0)), float(params.get("sigma", 1.0)))
        statsim.write_rows_csv(rows, statsim.SWEEP_COLUMNS, out / "bound_sweep.csv")
    elif experiment == "thresholds":
        lambda2 = float(params.get("lambda2", 1.0))
        rows = []
        for mu in params.get("mus", [0.7, 0.8, 0.9]):
            for n in params.get("ns", [3, 10, 20]):
                half = min(float(mu), 1.0 - float(mu), 0.1)
                mm = statsim.MarginModel(statsim.Uniform(mu - half, mu + half), lambda1=lambda2,
                                         lambda2=lambda2, n=int(n))
                th = statsim.comparison_thresholds(mm)
                rows.append({"mu": float(mu), "lambda2": lambda2, "n": int(n),
                             "we_higher_threshold": th.we_higher_threshold,
                             "mme_higher_threshold": th.mme_higher_threshold, "n_threshold": th.n_threshold})
        statsim.write_rows_csv(rows, ["mu", "lambda2", "n", "we_higher_threshold", "mme_higher_threshold",
                                      "n_threshold"], out / "thresholds.csv")
    else:
        _simulate_roc(params, base, out, seed, jobs)


def _simulate_roc(params: dict, base: Path, out: Path, seed: int, jobs: int) -> None:
    members, _ = load_checkpoints(base / _require(params, "checkpoints", "roc config"))
    test = _test_split(params, base)
    smoothing = _build(sm.SmoothingSpec, params.get("smoothing", {"sigma": params.get("sigma", 0.25)}),
                       "smoothing")
    sigma = float(params.get("sigma", smoothing.sigma))
    m = int(params.get("m", 1000))
    we = ens.EnsembleSpec.weighted(members, params.get("weights"))
    mme = ens.EnsembleSpec.max_margin(members)
    rec_we = sm.certify_many(we, smoothing, test.features, test.labels, seed, jobs)
    rec_mme = sm.certify_many(mme, smoothing, test.features, test.labels, seed, jobs)
    root = RngStream(seed).fork(7)
    rows = []
    for i, (x, y) in enumerate(zip(test.features, test.labels)):
        lp = statsim.lambda_proxies(we, x, int(y), sigma, m, root.fork(i))
        r_we = rec_we[i].radius if rec_we[i].correct else 0.0
        r_mme = rec_mme[i].radius if rec_mme[i].correct else 0.0
        rows.append({"id": i, "lambda1": lp.lambda1, "lambda2": lp.lambda2,
                     "lambda_ratio": lp.lambda1 / lp.lambda2, "radius_we": r_we, "radius_mme": r_mme,
                     "mme_higher": int(r_mme > r_we)})
    statsim.write_rows_csv(rows, ["id", "lambda1", "lambda2", "lambda_ratio", "radius_we", "radius_mme",
                                  "mme_higher"], out / "roc.csv")
    labels = [bool(r["mme_higher"]) for r in rows]
    auc = None
    if any(labels) and not all(labels):
        auc = statsim.roc_auc([r["lambda_ratio"] for r in rows], labels)
    _dump_json({"experiment": "roc", "count": len(rows), "mme_higher": sum(labels), "auc": auc},
               out / "summary.json")


EVAL_KEYS = {"seed", "jobs", "out", "records", "radii"}


def cmd_eval(cfg: dict, base: Path, out: Path, seed: int, jobs: int) -> None:
    _check_keys(cfg, EVAL_KEYS, "config")
    records = sm.read_records_csv(base / _require(cfg, "records", "config"))
    radii = [float(r) for r in cfg.get("radii", DEFAULT_RADII)]
    curve = sm.certified_accuracy_curve(records, radii)
    with open(out / "curve.csv", "w") as fh:
        fh.write("radius,certified_accuracy\n")
        for r, a in zip(curve.radii, curve.accuracy):
            fh.write(f"{r!r},{a!r}\n")
    _dump_json({"count": len(records), "radii": curve.radii, "certified_accuracy": curve.accuracy,
                "acr": curve.acr}, out / "summary.json")


COMMANDS = {"train": cmd_train, "certify": cmd_certify, "conditions": cmd_conditions,
            "simulate": cmd_simulate, "eval": cmd_eval}


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("--jobs must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-ensembles",
                                     description="Train, certify and analyse smoothed classifier ensembles.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__name__.replace("cmd_", ""))
        p.add_argument("--config", required=True, type=Path, help="JSON config file")
        p.add_argument("--out", type=Path, help="output directory (overrides config and $" + OUT_ENV + ")")
        p.add_argument("--seed", type=_u64, help="overrides the config seed")
        p.add_argument("--jobs", type=_positive, help="worker processes (default: all cores)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config {args.config}: {exc}", file=sys.stderr)
        return 2
    if not isinstance(cfg, dict):
        print("error: config must be a JSON object", file=sys.stderr)
        return 2
    base = args.config.resolve().parent
    out = args.out or (Path(os.environ[OUT_ENV]) if os.environ.get(OUT_ENV) else None)
    if out is None:
        out = base / cfg["out"] if "out" in cfg else Path("out")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    jobs = args.jobs or int(cfg.get("jobs", os.cpu_count() or 1))
    try:
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, base, out, seed, jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, tr.TrainingError, statsim.PreconditionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
