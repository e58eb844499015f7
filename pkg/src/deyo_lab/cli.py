"""Experiment runner.

Configuration is a flat ``key = value`` file with dotted keys.  Values are
resolved in order: built-in defaults, ``--preset``, ``--config`` file, then
``--set key=value`` overrides.  Every output byte is a function of the
resolved configuration and seeds.

    deyo-lab run --preset biased --out runs/biased
    deyo-lab sweep --preset biased --param tau_plpd --values 0,0.2,0.3,0.5
    deyo-lab ablation --preset ablation --out runs/ablation
    deyo-lab verify-theory --trials 1000 --seed 0
    deyo-lab pretrain --preset biased --out model.npz
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import statistics
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import theory
from .data import (
    ColoredSet,
    ScenarioSpec,
    build_colored_mnist,
    load_mnist,
    make_stream,
    synth_fallback,
)
from .deyo import AdaptConfig, evaluate_confidence, run_stream
from .errors import ConfigurationError, DeyoError
from .metrics import group_accuracies, rc_curve
from .model import accuracy, init_model, load_checkpoint, pretrain, save_checkpoint
from .numerics import make_rng, spawn
from .transforms import TransformSpec

DATASETS = ("synth", "colored_mnist")


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text):
    low = text.strip().lower()
    return None if low in ("", "none", "auto") else float(text)


def _optional_str(text):
    text = text.strip()
    return None if text.lower() in ("", "none") else text


def _int_list(text):
    return [int(v) for v in text.replace(" ", "").split(",") if v]


# key -> (parser, default)
SCHEMA = {
    "dataset": (str, "synth"),
    "data.root": (_optional_str, None),
    "data.n_train": (int, 6000),
    "data.n_test": (int, 10000),
    "data.illegible_p": (float, 0.1),
    "scenario.kind": (str, "mild"),
    "scenario.batch_size": (int, 64),
    "scenario.mix": (_optional_str, None),
    "method": (str, "deyo"),
    "adapt.tau_ent": (_optional_float, None),
    "adapt.tau_plpd": (float, 0.2),
    "adapt.ent0": (_optional_float, None),
    "adapt.lr": (float, 0.0025),
    "adapt.momentum": (float, 0.9),
    "adapt.use_ent_select": (_parse_bool, True),
    "adapt.use_plpd_select": (_parse_bool, True),
    "adapt.use_ent_weight": (_parse_bool, True),
    "adapt.use_plpd_weight": (_parse_bool, True),
    "adapt.transform": (str, "patch_shuffle"),
    "adapt.patch_grid": (int, 4),
    "adapt.occlusion_fraction": (float, 0.5),
    "adapt.noise_sigma": (float, 0.1),
    "model.hidden": (int, 128),
    "model.norm": (str, "batch"),
    "model.checkpoint": (_optional_str, None),
    "pretrain.epochs": (int, 20),
    "pretrain.lr": (float, 0.005),
    "pretrain.batch_size": (int, 64),
    "pretrain.momentum": (float, 0.9),
    "pretrain.plpd_filter": (_optional_float, None),
    "pretrain.warmup": (float, 0.25),
    "seeds": (_int_list, [0]),
}

PRESETS = {
    "mild": {"scenario.kind": "mild", "adapt.tau_plpd": "0.3"},
    "label-shift": {"scenario.kind": "label_shift", "adapt.tau_plpd": "0.2"},
    "bs1": {
        "scenario.kind": "batch_size_1",
        "scenario.batch_size": "1",
        "model.norm": "layer",
        "adapt.lr": str(0.0025 / 16),
        "data.n_test": "2000",
    },
    "biased": {
        "scenario.kind": "mild",
        "adapt.tau_plpd": "0.5",
        "adapt.ent0": str(math.log(2)),
        "adapt.use_ent_select": "false",
        "adapt.lr": "0.05",
        "seeds": "0,1,2,3,4",
    },
}
PRESETS["ablation"] = dict(PRESETS["biased"], seeds="0")

SWEEP_PARAMS = {
    "tau_plpd": "adapt.tau_plpd",
    "patch_grid": "adapt.patch_grid",
    "transform_kind": "adapt.transform",
    "tau_ent": "adapt.tau_ent",
    "ent0": "adapt.ent0",
}


def _parse_value(key, text):
    if key not in SCHEMA:
        raise ConfigurationError(f"unknown config key {key!r}")
    parser = SCHEMA[key][0]
    try:
        return parser(text)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key!r}: {exc}") from None


def parse_config_text(text) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _parse_value(key, value)
    return out


def resolve_config(preset=None, config_text=None, overrides=()) -> dict:
    cfg = {key: default for key, (_, default) in SCHEMA.items()}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        cfg.update({k: _parse_value(k, v) for k, v in PRESETS[preset].items()})
    if config_text:
        cfg.update(parse_config_text(config_text))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        cfg[key] = _parse_value(key, value)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if cfg["dataset"] not in DATASETS:
        raise ConfigurationError(f"dataset must be one of {DATASETS}, got {cfg['dataset']!r}")
    method_flags(cfg["method"])
    if not cfg["seeds"]:
        raise ConfigurationError("seeds must list at least one seed")
    scenario_spec(cfg, 0)
    adapt_config(cfg)


def method_flags(method):
    """Flags for ``method``; None means frozen, ``cell:k`` is Table-style ablation row k."""
    if method == "none":
        return None
    if method == "tent":
        return (False, False, False, False)
    if method == "deyo":
        return "config"
    if method.startswith("cell:"):
        try:
            row = int(method[5:])
        except ValueError:
            row = 0
        if not 1 <= row <= 16:
            raise ConfigurationError(f"ablation cell must be cell:1 .. cell:16, got {method!r}")
        return tuple((row - 1) >> (3 - i) & 1 == 1 for i in range(4))
    raise ConfigurationError(f"unknown method {method!r}; use none, tent, deyo or cell:<1-16>")


def transform_spec(cfg) -> TransformSpec:
    return TransformSpec(
        cfg["adapt.transform"],
        patch_grid=cfg["adapt.patch_grid"],
        occlusion_fraction=cfg["adapt.occlusion_fraction"],
        noise_sigma=cfg["adapt.noise_sigma"],
    )


def adapt_config(cfg, method=None) -> AdaptConfig:
    acfg = AdaptConfig(
        num_classes=2,
        tau_ent=cfg["adapt.tau_ent"],
        tau_plpd=cfg["adapt.tau_plpd"],
        ent0=cfg["adapt.ent0"],
        transform=transform_spec(cfg),
        lr=cfg["adapt.lr"],
        momentum=cfg["adapt.momentum"],
        use_ent_select=cfg["adapt.use_ent_select"],
        use_plpd_select=cfg["adapt.use_plpd_select"],
        use_ent_weight=cfg["adapt.use_ent_weight"],
        use_plpd_weight=cfg["adapt.use_plpd_weight"],
    )
    flags = method_flags(method or cfg["method"])
    if isinstance(flags, tuple):
        acfg = acfg.with_flags(*flags)
    return acfg


def _parse_mix(text):
    if text is None:
        return ((TransformSpec("identity"), 1.0),)
    mix = []
    for part in text.split(","):
        kind, _, frac = part.partition(":")
        if not frac:
            raise ConfigurationError(f"scenario.mix entries look like kind:fraction, got {part!r}")
        mix.append((TransformSpec(kind.strip()), float(frac)))
    return tuple(mix)


def scenario_spec(cfg, seed) -> ScenarioSpec:
    spec = ScenarioSpec(cfg["scenario.kind"], cfg["scenario.batch_size"], _parse_mix(cfg["scenario.mix"]), seed)
    if spec.batch_size < 2 and cfg["model.norm"] == "batch":
        raise ConfigurationError(
            "batch-norm needs at least 2 samples per batch; set model.norm=layer for batch size 1"
        )
    return spec


# --------------------------------------------------------------------------
# data and models


def load_splits(cfg, seed):
    """(train, test) coloured sets for ``seed``."""
    train_rng, test_rng = spawn(make_rng(seed), 2)
    if cfg["dataset"] == "synth":
        ill = cfg["data.illegible_p"]
        train = synth_fallback(cfg["data.n_train"], train_rng, "train", illegible_p=ill)
        test = synth_fallback(cfg["data.n_test"], test_rng, "test", illegible_p=ill)
        return train, test
    sets = []
    for split, rng, limit in (("train", train_rng, cfg["data.n_train"]), ("test", test_rng, cfg["data.n_test"])):
        gray, digits = load_mnist(cfg["data.root"], split)
        if 0 < limit < len(digits):
            gray, digits = gray[:limit], digits[:limit]
        sets.append(build_colored_mnist(gray, digits, split, rng))
    return tuple(sets)


def train_model(cfg, train: ColoredSet, seed):
    rng = make_rng(seed)
    model = init_model(int(np.prod(train.images.shape[1:])), 2, rng, hidden=cfg["model.hidden"], norm=cfg["model.norm"])
    pretrain(
        model,
        train.images,
        train.labels,
        cfg["pretrain.epochs"],
        cfg["pretrain.lr"],
        rng,
        batch_size=cfg["pretrain.batch_size"],
        momentum=cfg["pretrain.momentum"],
        plpd_filter=cfg["pretrain.plpd_filter"],
        warmup_fraction=cfg["pretrain.warmup"],
        transform=transform_spec(cfg),
    )
    return model


@dataclass
class Prepared:
    seed: int
    model: object
    test: ColoredSet
    stream: list


def prepare(cfg, seed) -> Prepared:
    """Pretrained (or loaded) model plus the test stream for one seed."""
    train, test = load_splits(cfg, seed)
    if cfg["model.checkpoint"] is None:
        model = train_model(cfg, train, seed)
    else:
        model = load_checkpoint(cfg["model.checkpoint"])
    if model.norm.kind != cfg["model.norm"]:
        raise ConfigurationError(
            f"checkpoint uses {model.norm.kind}-norm but model.norm={cfg['model.norm']}"
        )
    min_batch = 2 if model.norm.kind == "batch" else 1
    stream = make_stream(test, scenario_spec(cfg, seed), min_batch=min_batch)
    return Prepared(seed, model, test, stream)


# --------------------------------------------------------------------------
# evaluation


def evaluate(cfg, prep: Prepared, method: str):
    """Run one method on a prepared seed; returns (RunResult, per-seed summary)."""
    acfg = None if method_flags(method) is None else adapt_config(cfg, method)
    result = run_stream(prep.model, prep.stream, acfg, seed=prep.seed)
    groups = group_accuracies(result.records(), groups=sorted(set(prep.test.groups.tolist())))
    summary = {
        "seed": prep.seed,
        "label": result.label,
        "samples": int(len(result.correct)),
        "accuracy": groups.average,
        "worst_group_accuracy": groups.worst,
        "worst_group": groups.worst_group,
        "group_accuracy": {str(g): a for g, a in groups.per_group.items()},
        "group_counts": {str(g): c for g, c in groups.counts.items()},
        "counters": result.counters.as_dict(),
    }
    return result, summary


def confidence_curves(cfg, prep: Prepared):
    """Entropy vs PLPD risk-coverage on the frozen model's worst group."""
    records = evaluate_confidence(prep.model, prep.stream, transform_spec(cfg), seed=prep.seed)
    worst = group_accuracies(records).worst_group
    subset = records.subset(records.group == worst)
    curves = {key: rc_curve(subset, key) for key in ("entropy", "plpd")}
    return worst, curves


def _mean(values):
    return float(statistics.fmean(values))


def _median(values):
    return float(statistics.median(values))


def aggregate(per_seed):
    keys = ("accuracy", "worst_group_accuracy")
    out = {
        "mean": {k: _mean([s[k] for s in per_seed]) for k in keys},
        "median": {k: _median([s[k] for s in per_seed]) for k in keys},
    }
    if all("aurc" in s for s in per_seed):
        for key in ("entropy", "plpd"):
            vals = [s["aurc"][key] for s in per_seed]
            out["mean"][f"aurc_{key}"] = _mean(vals)
            out["median"][f"aurc_{key}"] = _median(vals)
    counters = {}
    for s in per_seed:
        for k, v in s["counters"].items():
            counters[k] = counters.get(k, 0) + v
    out["counters_total"] = counters
    return out


def compare_methods(cfg, methods, with_curves=False):
    """Pretrain once per seed and evaluate every method on the same stream.

    Returns ``{method: {"per_seed": [...], "results": [...]}}`` (plus
    ``"curves"`` per seed when requested).
    """
    out = {m: {"per_seed": [], "results": []} for m in methods}
    curves = []
    for seed in cfg["seeds"]:
        prep = prepare(cfg, seed)
        if with_curves:
            curves.append(confidence_curves(cfg, prep))
        for m in methods:
            result, summary = evaluate(cfg, prep, m)
            if with_curves:
                worst, c = curves[-1]
                summary["aurc"] = {"group": worst, "entropy": c["entropy"].aurc, "plpd": c["plpd"].aurc}
            out[m]["per_seed"].append(summary)
            out[m]["results"].append(result)
    if with_curves:
        out["curves"] = curves
    return out


# --------------------------------------------------------------------------
# writers


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[h]) for h in header])


def write_json(path, obj):
    text = json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=True) + "\n"
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


DIAG_COLUMNS = ("seed", "batch_idx", "sample_idx", "entropy", "plpd", "selected", "weight", "pred", "label", "group", "area")


def config_for_output(cfg):
    out = dict(cfg)
    out["seeds"] = ",".join(str(s) for s in cfg["seeds"])
    return out


def run(cfg, out_dir) -> dict:
    """Run ``cfg["method"]`` and write summary.json, diagnostics.csv and rc_curve.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    method = cfg["method"]
    res = compare_methods(cfg, [method], with_curves=True)
    per_seed = res[method]["per_seed"]
    summary = {
        "config": config_for_output(cfg),
        "method": method,
        "label": per_seed[0]["label"],
        "per_seed": per_seed,
        **aggregate(per_seed),
    }
    write_json(out_dir / "summary.json", summary)
    rows = []
    for s, result in zip(cfg["seeds"], res[method]["results"]):
        rows.extend(dict(row, seed=s) for row in result.rows())
    write_csv(out_dir / "diagnostics.csv", DIAG_COLUMNS, rows)
    curve_rows = []
    for s, (worst, curves) in zip(cfg["seeds"], res["curves"]):
        for key, curve in curves.items():
            curve_rows.extend(
                {"seed": s, "group": worst, "confidence": key, "coverage": c, "risk": r}
                for c, r in zip(curve.coverage, curve.risk)
            )
    write_csv(out_dir / "rc_curve.csv", ("seed", "group", "confidence", "coverage", "risk"), curve_rows)
    return summary


def sweep(cfg, param, values, out_dir) -> list[dict]:
    """One run per value of ``param``; models are pretrained once per seed."""
    if param not in SWEEP_PARAMS:
        raise ConfigurationError(f"cannot sweep {param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    key = SWEEP_PARAMS[param]
    variants = []
    for v in values:
        variant = dict(cfg)
        variant[key] = _parse_value(key, v)
        validate_config(variant)
        variants.append((v, variant))
    if param in ("transform_kind", "patch_grid") and cfg["pretrain.plpd_filter"] is not None:
        # the transform also steers PLPD-filtered pretraining, which is shared across values
        raise ConfigurationError(f"sweeping {param} with PLPD-filtered pretraining is not supported")
    per_value = {v: [] for v, _ in variants}
    for seed in cfg["seeds"]:
        prep = prepare(cfg, seed)
        for v, variant in variants:
            per_value[v].append(evaluate(variant, prep, variant["method"])[1])
    rows = []
    for v, _ in variants:
        runs = per_value[v]
        rows.append(
            {
                "param": param,
                "value": v,
                "avg_acc": _mean([r["accuracy"] for r in runs]),
                "worst_acc": _mean([r["worst_group_accuracy"] for r in runs]),
                "selected_count": sum(r["counters"]["selected"] for r in runs),
            }
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "sweep.csv", ("param", "value", "avg_acc", "worst_acc", "selected_count"), rows)
    return rows


def ablation(cfg, out_dir) -> list[dict]:
    """All 16 selection/weighting rows plus the frozen model."""
    methods = ["none"] + [f"cell:{k}" for k in range(1, 17)]
    res = compare_methods(cfg, methods)
    rows = []
    for m in methods:
        runs = res[m]["per_seed"]
        rows.append(
            {
                "row": 0 if m == "none" else int(m[5:]),
                "label": runs[0]["label"],
                "avg_acc": _mean([r["accuracy"] for r in runs]),
                "worst_acc": _mean([r["worst_group_accuracy"] for r in runs]),
                "selected_count": sum(r["counters"]["selected"] for r in runs),
                "forwards_aux": sum(r["counters"]["forwards_aux"] for r in runs),
            }
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "ablation.csv", ("row", "label", "avg_acc", "worst_acc", "selected_count", "forwards_aux"), rows)
    return rows


def pretrain_only(cfg, out_path) -> dict:
    seed = cfg["seeds"][0]
    train, test = load_splits(cfg, seed)
    model = train_model(cfg, train, seed)
    save_checkpoint(model, out_path)
    report = {
        "seed": seed,
        "train_accuracy": accuracy(model, train.images, train.labels),
        "test_accuracy": accuracy(model, test.images, test.labels),
    }
    if cfg["dataset"] == "synth":
        # fresh draw from the training distribution
        iid = synth_fallback(len(test), spawn(make_rng(seed), 3)[2], "train", illegible_p=cfg["data.illegible_p"])
        report["iid_accuracy"] = accuracy(model, iid.images, iid.labels)
    return report


# --------------------------------------------------------------------------
# argparse


def _add_config_args(p):
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seeds", help="comma-separated seeds (same as --set seeds=...)")


def build_parser():
    parser = argparse.ArgumentParser(prog="deyo-lab", description="Entropy/PLPD test-time adaptation lab")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="adapt on a test stream and write summary/diagnostics/rc-curve")
    _add_config_args(p)
    p.add_argument("--out", type=Path, default=Path("runs/run"))

    p = sub.add_parser("sweep", help="vary one hyperparameter")
    _add_config_args(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", type=Path, default=Path("runs/sweep"))

    p = sub.add_parser("ablation", help="16-row selection/weighting grid")
    _add_config_args(p)
    p.add_argument("--out", type=Path, default=Path("runs/ablation"))

    p = sub.add_parser("verify-theory", help="sign-agreement check of the harmful-sample condition")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--population", type=int, default=0, help="sampled factor vectors per class (0: analytic means)")
    p.add_argument("--out", type=Path, help="write the JSON report here (default: stdout)")

    p = sub.add_parser("pretrain", help="train a model and save a checkpoint")
    _add_config_args(p)
    p.add_argument("--out", type=Path, default=Path("model.npz"))
    return parser


def _config_from_args(args):
    overrides = list(args.overrides)
    if args.seeds:
        overrides.append(f"seeds={args.seeds}")
    text = args.config.read_text(encoding="utf-8") if args.config else None
    return resolve_config(args.preset, text, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "verify-theory":
            if args.trials < 1:
                raise ConfigurationError("--trials must be >= 1")
            report = theory.verify_proposition(args.trials, seed=args.seed, population=args.population)
            text = theory.report_json(report)
            if args.out:
                args.out.parent.mkdir(parents=True, exist_ok=True)
                args.out.write_text(text, encoding="utf-8", newline="\n")
            else:
                sys.stdout.write(text)
            n_bad = len(report["counterexamples"])
            print(f"{report['agreements']}/{report['judged']} judged trials agree, {n_bad} counterexamples",
                  file=sys.stderr)
            return 1 if n_bad else 0
        cfg = _config_from_args(args)
        if args.verb == "run":
            summary = run(cfg, args.out)
            m = summary["mean"]
            print(f"{summary['label']}: avg {m['accuracy']:.4f}  worst-group {m['worst_group_accuracy']:.4f}  -> {args.out}")
        elif args.verb == "sweep":
            for row in sweep(cfg, args.param, [v.strip() for v in args.values.split(",")], args.out):
                print(f"{row['param']}={row['value']}: avg {row['avg_acc']:.4f}  worst {row['worst_acc']:.4f}  selected {row['selected_count']}")
        elif args.verb == "ablation":
            for row in ablation(cfg, args.out):
                print(f"{row['label']:<40} avg {row['avg_acc']:.4f}  worst {row['worst_acc']:.4f}")
        elif args.verb == "pretrain":
            args.out.parent.mkdir(parents=True, exist_ok=True)
            report = pretrain_only(cfg, args.out)
            print(json.dumps(report, sort_keys=True))
    except DeyoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
