"""Experiment configuration: TOML parsing, defaults, validation and seed derivation."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError

DEFAULTS = {
    "run": {"id": "run", "seed": 0},
    "dataset": {
        "source": "gaussian_mixture",  # gaussian_mixture | idx | csv
        "classes": 3,
        "n_per_class": 200,
        "spread": 0.5,
        "radius": 1.0,
        "test_per_class": 100,
        "train_images": "",
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
        "train_csv": "",
        "test_csv": "",
        "test_fraction": 0.2,
        "subsample": 0,
        "mask": 0,
        "image_side": 28,
        "distill_set": "train",  # train | fresh
        "distill_noise_std": 0.0,
    },
    "teacher": {"template": "fcnn", "hidden": [16, 16]},
    "sgld": {
        "total_iters": 20000,
        "step_size": 1e-3,
        "schedule": "constant",
        "decay_steps": 1.0,
        "prior_precision": 10.0,
        "minibatch": 32,
        "dump_samples": False,
        "dump_every": 1,
    },
    "distill": {
        "targets": ["predictive_distribution", "expected_entropy"],
        "estimator": "Uo",
        "burn_in": 1000,
        "thin": 10,
        "minibatch": 32,
        "student_hidden": [16, 16],
        "student_lr": 1e-3,
        "halve_every_epochs": 200,
        "optimizer": "adam",
        "dropout": 0.0,
        "entropy_weight": 1.0,
        "end2": False,
        "end2_temperature": 2.5,
        "normalize_student_grad": False,
        "probe_every": 50,
    },
    "prune": {
        "enabled": False,
        "lambdas": [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3],
        "eps": 1e-3,
        "scaled": False,
        "fine_tune_epochs": 0,
        "restart_lr": 0.0,  # 0 selects 1e-4 (fully connected) or 1e-3 (conv)
        "student_lr": 0.0,  # 0 inherits distill.student_lr
        "halve_every_epochs": 0,  # 0 inherits distill.halve_every_epochs
    },
    "search": {
        "enabled": False,
        "K1_grid": [0.25, 0.5, 1.0, 2.0, 4.0],
        "K2_grid": [0.25, 0.5, 1.0, 2.0, 4.0],
        "metric": "nll",  # nll | entropy_mae | neg_accuracy
    },
    "eval": {
        "ood": [],
        "ranking_n": 100,
        "ranking_k": 20,
        "ranking_trials": 500,
    },
}

OOD_DEFAULTS = {"name": "", "source": "gaussian_mixture", "radius": 4.0, "spread": 0.5, "n_per_class": 100,
                "images": "", "labels": "", "csv": "", "noise_std": 0.0, "mask": 0}

CHOICES = {
    ("dataset", "source"): ("gaussian_mixture", "idx", "csv"),
    ("dataset", "distill_set"): ("train", "fresh"),
    ("teacher", "template"): ("fcnn", "mnist_cnn"),
    ("sgld", "schedule"): ("constant", "polynomial"),
    ("distill", "estimator"): ("Us", "Uo"),
    ("distill", "optimizer"): ("adam", "sgd"),
    ("search", "metric"): ("nll", "entropy_mae", "neg_accuracy"),
}
TARGET_CHOICES = ("predictive_distribution", "expected_entropy", "marginal_variance", "joint")
SEED_LABELS = ("data", "teacher", "student", "eval")


def _type_ok(default, value):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def _merge(defaults, user, path, errors):
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        p = f"{path}.{key}" if path else key
        if key not in defaults:
            errors.append((p, "unknown key"))
            continue
        d = defaults[key]
        if isinstance(d, dict):
            if not isinstance(value, dict):
                errors.append((p, "must be a table"))
                continue
            out[key] = _merge(d, value, p, errors)
        elif not _type_ok(d, value):
            errors.append((p, f"must be of type {type(d).__name__}"))
        else:
            out[key] = float(value) if isinstance(d, float) else value
    return out


def derive_seed(master, label):
    """64-bit seed from a master seed and a stage label (sha256, fixed encoding)."""
    digest = hashlib.sha256(f"gped-seed:{int(master)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _check(m, base_dir, errors):
    ds, sg, di, pr, se, ev = (m[k] for k in ("dataset", "sgld", "distill", "prune", "search", "eval"))
    for (sec, key), allowed in CHOICES.items():
        if m[sec][key] not in allowed:
            errors.append((f"{sec}.{key}", f"must be one of {', '.join(allowed)}"))
    if not di["targets"] or any(t not in TARGET_CHOICES for t in di["targets"]):
        errors.append(("distill.targets", f"entries must be among {', '.join(TARGET_CHOICES)}"))
    if sg["total_iters"] < 1:
        errors.append(("sgld.total_iters", "must be >= 1"))
    if not di["burn_in"] < sg["total_iters"]:
        errors.append(("distill.burn_in", "distill.burn_in must be < sgld.total_iters"))
    if di["burn_in"] < 0:
        errors.append(("distill.burn_in", "must be >= 0"))
    for path, v in (("distill.thin", di["thin"]), ("sgld.minibatch", sg["minibatch"]),
                    ("distill.minibatch", di["minibatch"]), ("sgld.dump_every", sg["dump_every"]),
                    ("distill.probe_every", di["probe_every"])):
        if v < 1:
            errors.append((path, "must be >= 1"))
    for path, v in (("sgld.step_size", sg["step_size"]), ("distill.student_lr", di["student_lr"]),
                    ("distill.end2_temperature", di["end2_temperature"]), ("prune.eps", pr["eps"])):
        if v <= 0:
            errors.append((path, "must be > 0"))
    if not 0 <= di["dropout"] < 1:
        errors.append(("distill.dropout", "must be in [0, 1)"))
    for key in ("restart_lr", "student_lr"):
        if pr[key] < 0:
            errors.append((f"prune.{key}", "must be >= 0"))
    if pr["halve_every_epochs"] < 0 or di["halve_every_epochs"] < 1:
        errors.append(("prune.halve_every_epochs", "must be >= 0 (and distill.halve_every_epochs >= 1)"))
    if any(lam < 0 for lam in pr["lambdas"]):
        errors.append(("prune.lambdas", "entries must be >= 0"))
    if pr["enabled"] and not pr["lambdas"]:
        errors.append(("prune.lambdas", "must be nonempty when pruning is enabled"))
    for key in ("K1_grid", "K2_grid"):
        g = se[key]
        if not g or any(not isinstance(k, (int, float)) or k <= 0 for k in g):
            errors.append((f"search.{key}", "must be a nonempty list of positive numbers"))
    if ds["mask"] < 0 or ds["mask"] > ds["image_side"]:
        errors.append(("dataset.mask", "must be in [0, image_side]"))
    # sizes
    if ds["source"] == "gaussian_mixture":
        n = ds["classes"] * ds["n_per_class"]
        if ds["classes"] < 2:
            errors.append(("dataset.classes", "must be >= 2"))
    else:
        n = None
    if ds["subsample"]:
        n = ds["subsample"] if n is None else min(n, ds["subsample"])
    if n is not None:
        if sg["minibatch"] > n:
            errors.append(("sgld.minibatch", f"M = {sg['minibatch']} exceeds N = {n}"))
        if di["minibatch"] > n:
            errors.append(("distill.minibatch", f"M' = {di['minibatch']} exceeds N' = {n}"))
    # files
    needed = {"idx": ("train_images", "train_labels"), "csv": ("train_csv",)}.get(ds["source"], ())
    for key in needed:
        if not ds[key]:
            errors.append((f"dataset.{key}", "required for this source"))
            continue
        path = (base_dir / ds[key]).resolve()
        if not path.exists():
            errors.append((f"dataset.{key}", f"file not found: {path}"))
        else:
            ds[key] = str(path)
    optional = {"idx": ("test_images", "test_labels"), "csv": ("test_csv",)}.get(ds["source"], ())
    for key in optional:
        if ds[key]:
            path = (base_dir / ds[key]).resolve()
            if not path.exists():
                errors.append((f"dataset.{key}", f"file not found: {path}"))
            else:
                ds[key] = str(path)
    if ds["source"] == "idx" and bool(ds["test_images"]) != bool(ds["test_labels"]):
        errors.append(("dataset.test_labels", "test_images and test_labels must be given together"))
    if not 0 < ds["test_fraction"] < 1:
        errors.append(("dataset.test_fraction", "must be in (0, 1)"))
    ood = []
    names = set()
    for i, entry in enumerate(ev["ood"]):
        if not isinstance(entry, dict):
            errors.append((f"eval.ood[{i}]", "must be a table"))
            continue
        resolved = _merge(OOD_DEFAULTS, entry, f"eval.ood[{i}]", errors)
        if not resolved["name"] or resolved["name"] in names:
            errors.append((f"eval.ood[{i}].name", "must be a unique nonempty name"))
        names.add(resolved["name"])
        if resolved["source"] not in ("gaussian_mixture", "idx", "csv", "test_transform"):
            errors.append((f"eval.ood[{i}].source", "must be one of gaussian_mixture, idx, csv, test_transform"))
        for key in ("images", "labels", "csv"):
            if resolved[key]:
                path = (base_dir / resolved[key]).resolve()
                if not path.exists():
                    errors.append((f"eval.ood[{i}].{key}", f"file not found: {path}"))
                resolved[key] = str(path)
        if resolved["source"] == "idx" and not resolved["images"]:
            errors.append((f"eval.ood[{i}].images", "required for this source"))
        if resolved["source"] == "csv" and not resolved["csv"]:
            errors.append((f"eval.ood[{i}].csv", "required for this source"))
        ood.append(resolved)
    ev["ood"] = ood
    if ev["ranking_k"] < 1 or ev["ranking_n"] < ev["ranking_k"] or ev["ranking_trials"] < 0:
        errors.append(("eval.ranking_k", "need 1 <= ranking_k <= ranking_n and ranking_trials >= 0"))
    if m["teacher"]["template"] == "fcnn" and any(h < 1 for h in m["teacher"]["hidden"]):
        errors.append(("teacher.hidden", "widths must be >= 1"))
    if any(h < 1 for h in di["student_hidden"]):
        errors.append(("distill.student_hidden", "widths must be >= 1"))


def resolve(user, base_dir=".", seed=None):
    """Defaults filled, constraints checked; raises ConfigError listing every violation."""
    errors = []
    if not isinstance(user, dict):
        raise ConfigError([("", "config must be a table")])
    manifest = _merge(DEFAULTS, user, "", errors)
    if seed is not None:
        manifest["run"]["seed"] = int(seed)
    if not errors:
        _check(manifest, Path(base_dir), errors)
    if errors:
        raise ConfigError(errors)
    master = manifest["run"]["seed"]
    manifest["seeds"] = {label: derive_seed(master, label) for label in SEED_LABELS}
    manifest["format"] = {"name": "gped-manifest", "version": 1}
    return manifest


def load_config(path, seed=None):
    path = Path(path)
    if not path.exists():
        raise ConfigError([("--config", f"file not found: {path}")])
    try:
        user = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as err:
        raise ConfigError([("--config", f"invalid TOML: {err}")]) from None
    return resolve(user, path.parent, seed)


def canonical_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def manifest_hash(manifest):
    body = {k: v for k, v in manifest.items() if k != "hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
