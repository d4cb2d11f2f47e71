"""Command-line surface: train / attack / eval subcommands.

One JSON config file per experiment is the reproducibility unit. Exit codes:
0 ok, 2 config error, 3 numeric/training error, 4 stage error.
"""

import argparse
import json
import os
import sys

import numpy as np

from .campaign import CampaignPlan, run_campaign
from .data import load_cifar10, load_dataset, synth_dataset
from .errors import HashPoisonError, InputError, NumericError, StageError, TrainingError
from .metrics import SCHEMA_VERSION, write_sweep_csv
from .models import HashModelConfig
from .training import new_model, save_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_STAGE = 4

_MODEL_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "backbone": {"type": "string"},
        "width": {"type": "number"},
        "gamma": {"type": "integer"},
        "loss_kind": {"type": "string"},
        "epochs": {"type": "integer"},
        "learning_rate": {"type": "number"},
        "batch_size": {"type": "integer"},
        "seed": {"type": "integer"},
        "momentum": {"type": "number"},
        "dpn_margin": {"type": "number"},
        "from_scratch": {"type": "boolean"},
    },
}

_POISON_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "alpha": {"type": "number"},
        "sigma": {"type": "number"},
        "n": {"type": "integer"},
        "T": {"type": "integer"},
        "step_size": {"type": "number"},
        "base_selection": {"type": "string"},
        "seed": {"type": "integer"},
        "optimizer": {"type": "string"},
        "init_scale": {"type": "number"},
        "grad_mode": {"type": "string"},
        "micro_batch": {"type": "integer"},
    },
}

_DATASET_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"type": "string", "enum": ["cifar10", "synthetic", "saved"]},
        "path": {"type": "string"},
        "classes": {"type": "integer"},
        "per_class": {"type": "integer"},
        "seed": {"type": "integer"},
        "noise": {"type": "number"},
        "contrast": {"type": "number"},
        "background": {"type": "array", "items": {"type": "number"}},
        "instance_weight": {"type": "number"},
        "texture": {"type": "number"},
        "test_path": {"type": "string"},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "dataset", "output_dir"],
    "properties": {
        "schema_version": {"type": "integer"},
        "dataset": _DATASET_SCHEMA,
        "output_dir": {"type": "string"},
        "surrogate_fraction": {"type": "number"},
        "surrogate_config": _MODEL_CONFIG_SCHEMA,
        "victim_config": _MODEL_CONFIG_SCHEMA,
        "target_config": _MODEL_CONFIG_SCHEMA,
        "poison_config": _POISON_CONFIG_SCHEMA,
        "trigger_ids": {"type": "array", "items": {"type": "string"}},
        "trigger_selection": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "strategy": {"type": "string", "enum": ["listed", "outlier"]},
                "count": {"type": "integer"},
                "min_target_distance": {"type": "integer"},
            },
        },
        "target_label": {"type": "array", "items": {"type": "integer"}},
        "trials": {"type": "integer"},
        "seed": {"type": "integer"},
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "K": {"type": "integer"},
                "threshold": {"type": "number"},
                "thresholds": {"type": "array", "items": {"type": "number"}},
            },
        },
    },
}


def load_config(path):
    import jsonschema

    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read config {path}: {e}")
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        path_str = "/".join(str(p) for p in e.absolute_path) or "(root)"
        raise InputError(f"config field {path_str}: {e.message}")
    if raw["schema_version"] != SCHEMA_VERSION:
        raise InputError(
            f"config schema_version {raw['schema_version']} != supported {SCHEMA_VERSION}")
    return raw


def load_datasets(dataset_cfg):
    kind = dataset_cfg["kind"]
    if kind == "cifar10":
        path = dataset_cfg.get("path") or os.environ.get("HASHPOISON_CACHE")
        if not path:
            raise InputError("config field dataset/path: required for cifar10 "
                             "(or set HASHPOISON_CACHE)")
        return load_cifar10(path)
    if kind == "synthetic":
        kwargs = {}
        for key in ("noise", "contrast", "instance_weight", "texture", "seed"):
            if key in dataset_cfg:
                kwargs[key] = dataset_cfg[key]
        if "background" in dataset_cfg:
            kwargs["background"] = tuple(dataset_cfg["background"])
        return synth_dataset(dataset_cfg.get("classes", 5),
                             dataset_cfg.get("per_class", 500), **kwargs)
    # saved
    if "path" not in dataset_cfg or "test_path" not in dataset_cfg:
        raise InputError("config field dataset/path: saved datasets need path and test_path")
    return load_dataset(dataset_cfg["path"]), load_dataset(dataset_cfg["test_path"])


def select_triggers(config, train_set, test_set, y_t):
    """Resolve trigger ids, either listed explicitly or chosen as outliers.

    The outlier strategy trains a probe model on the training set and picks
    non-target test images whose codes are farthest from every class code
    while staying at least min_target_distance bits from the target code.
    """
    if config.get("trigger_ids"):
        return list(config["trigger_ids"])
    sel = config.get("trigger_selection")
    if not sel or sel.get("strategy") != "outlier":
        raise InputError("config field trigger_ids: list ids or use "
                         "trigger_selection strategy 'outlier'")
    count = sel.get("count", 5)
    min_td = sel.get("min_target_distance", 7)
    probe_cfg = HashModelConfig.from_dict(config["surrogate_config"])
    probe_cfg.seed = probe_cfg.seed + config.get("seed", 0) + 77
    probe = train(new_model(probe_cfg, train_set), train_set)
    active = np.asarray(y_t).astype(bool)
    cands = [s for s in test_set.samples
             if not np.all(s.label.astype(bool)[active])]
    if len(cands) < count:
        raise InputError(f"only {len(cands)} non-target test images available")
    codes = np.sign(probe.encode_batch(np.stack([s.image for s in cands])))
    table = probe.table.codes.astype(np.float64)
    dists = np.stack([(codes != table[k][None]).sum(axis=1)
                      for k in range(table.shape[0])])
    d_any = dists.min(axis=0)
    d_target = (codes != probe.table.target_code(y_t)[None]).sum(axis=1)
    score = np.where(d_target >= min_td, d_any, -1)
    order = np.argsort(-score, kind="stable")
    return [cands[i].id for i in order[:count]]


def build_plan(config):
    y_t = np.asarray(config["target_label"], dtype=np.uint8)
    return {
        "surrogate_fraction": config.get("surrogate_fraction", 0.5),
        "surrogate_config": HashModelConfig.from_dict(config["surrogate_config"]),
        "victim_config": HashModelConfig.from_dict(config["victim_config"]),
        "poison_config": None,  # filled by caller
        "target_label": y_t,
        "trials": config.get("trials", 1),
        "seed": config.get("seed", 0),
    }


def _require(config, *fields):
    for name in fields:
        if name not in config:
            raise InputError(f"config field {name}: required for this command")


def cmd_train(args):
    config = load_config(args.config)
    _require(config, "target_config" if args.role == "target" else f"{args.role}_config")
    train_set, test_set = load_datasets(config["dataset"])
    cfg = HashModelConfig.from_dict(config[
        "target_config" if args.role == "target" else f"{args.role}_config"])
    if args.seed is not None:
        cfg.seed = args.seed
    out = os.path.join(config["output_dir"], f"{args.role}-checkpoint")
    if args.dry_run:
        print(f"dry-run: would train role={args.role} on "
              f"{len(train_set)} samples -> {out}")
        return EXIT_OK
    if os.path.exists(out) and not args.force:
        raise InputError(f"refusing to overwrite {out} (use --force)")
    model = train(new_model(cfg, train_set), train_set)
    os.makedirs(config["output_dir"], exist_ok=True)
    save_checkpoint(model, out)
    log = {
        "role": args.role,
        "checkpoint": out,
        "final_loss": model.loss_history[-1] if model.loss_history else None,
        "loss_history": model.loss_history,
    }
    with open(os.path.join(config["output_dir"], f"{args.role}-train-log.json"),
              "w") as fh:
        json.dump(log, fh, sort_keys=True, indent=2)
    print(out)
    return EXIT_OK


def cmd_attack(args):
    from .attack import PoisonConfig

    config = load_config(args.config)
    _require(config, "surrogate_config", "victim_config", "poison_config",
             "target_label")
    train_set, test_set = load_datasets(config["dataset"])
    y_t = np.asarray(config["target_label"], dtype=np.uint8)
    trigger_ids = select_triggers(config, train_set, test_set, y_t)
    plan = CampaignPlan(
        surrogate_fraction=config.get("surrogate_fraction", 0.5),
        surrogate_config=HashModelConfig.from_dict(config["surrogate_config"]),
        victim_config=HashModelConfig.from_dict(config["victim_config"]),
        poison_config=PoisonConfig.from_dict(config["poison_config"]),
        trigger_ids=trigger_ids,
        target_label=y_t,
        trials=config.get("trials", 1),
        seed=args.seed if args.seed is not None else config.get("seed", 0),
    )
    out_dir = config["output_dir"]
    if args.dry_run:
        stages = ["sample", "surrogate", "poison", "inject", "victim", "evaluate"]
        print(f"dry-run: {plan.trials} trial(s), triggers={trigger_ids}, "
              f"stages={' -> '.join(stages)}, output={out_dir}")
        return EXIT_OK
    if os.path.exists(os.path.join(out_dir, "report.json")) and not args.force:
        raise InputError(f"refusing to overwrite {out_dir}/report.json (use --force)")
    summary, _ = run_campaign(plan, train_set, test_set, out_dir=out_dir)
    # headline must be byte-identical to what landed in report.json
    with open(os.path.join(out_dir, "report.json")) as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


def cmd_eval(args):
    reports = []
    for path in args.reports:
        fname = path if path.endswith(".json") else os.path.join(path, "report.json")
        with open(fname) as fh:
            reports.append(json.load(fh))
    versions = {r.get("schema_version") for r in reports}
    if len(versions) != 1:
        raise InputError(f"schema version mismatch across reports: {sorted(versions)}")

    def stat(values):
        arr = np.array(values, dtype=np.float64)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        return {"mean": float(arr.mean()), "std": std}

    def metric(report, name):
        v = report[name]
        return v["mean"] if isinstance(v, dict) else v

    table = {
        name: stat([metric(r, name) for r in reports])
        for name in ("asr_attack", "asr_none", "map_clean", "map_poisoned",
                     "psnr_mean", "ssim_mean")
    }
    out = {"schema_version": sorted(versions)[0], "reports": len(reports),
           "aggregate": table}

    if args.sweep:
        rows = _sweep_rows(args.sweep, reports)
        out["sweep"] = rows
        if args.csv:
            write_sweep_csv(rows, args.csv)
    print(json.dumps(out, sort_keys=True, indent=2))
    return EXIT_OK


def _sweep_rows(kind, reports):
    key_of = {
        "alpha": lambda r: r["plan"]["poison_config"]["alpha"]
        if "plan" in r else r["config"]["poison_config"]["alpha"],
        "ratio": lambda r: r.get("extra", {}).get("poison_ratio",
                                                  r["plan"]["poison_config"]["n"]
                                                  if "plan" in r else None),
        "bits": lambda r: (r["plan"] if "plan" in r else r["config"])
        ["victim_config"]["gamma"],
        "threshold": None,
    }
    if kind == "threshold":
        rows = []
        for r in reports:
            fractions = [d["fraction"] for d in r.get("per_trigger", [])]
            for t in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9):
                rows.append({"threshold": t,
                             "asr": float(np.mean([f > t for f in fractions]))
                             if fractions else 0.0})
        return rows
    getter = key_of[kind]
    rows = []
    for r in reports:
        v = r["asr_attack"]
        rows.append({kind: getter(r),
                     "asr": v["mean"] if isinstance(v, dict) else v})
    rows.sort(key=lambda row: row[kind])
    return rows


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hashpoison",
        description="Clean-label gradient-matching poisoning toolkit for "
                    "deep-hashing retrieval.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a surrogate/victim/target model")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--role", choices=("surrogate", "victim", "target"),
                         default="target")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--workers", type=int, default=1)
    p_train.add_argument("--dry-run", action="store_true")
    p_train.add_argument("--force", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_attack = sub.add_parser("attack", help="run the full poisoning campaign")
    p_attack.add_argument("--config", required=True)
    p_attack.add_argument("--seed", type=int)
    p_attack.add_argument("--workers", type=int, default=1)
    p_attack.add_argument("--dry-run", action="store_true")
    p_attack.add_argument("--force", action="store_true")
    p_attack.set_defaults(func=cmd_attack)

    p_eval = sub.add_parser("eval", help="aggregate reports and emit sweep tables")
    p_eval.add_argument("reports", nargs="+")
    p_eval.add_argument("--sweep", choices=("threshold", "alpha", "ratio", "bits"))
    p_eval.add_argument("--csv")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except StageError as e:
        print(f"stage error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except HashPoisonError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except OSError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
