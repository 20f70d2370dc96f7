"""Seeded end-to-end experiment stages and their on-disk artifacts.

Layout under ``<out>/<run_id>/``::

    manifest.json   resolved configuration (+ its hash)
    ensemble.json   teacher posterior-predictive summaries on test and OOD sets
    models/         students, pruned students and optional sample dump
    history.csv     probe-set learning curves of every student
    prune.csv, prune/   lambda sweep results and prune reports
    frontier.csv, search.json   architecture search results
    metrics.json, metrics.csv   evaluation
    plots/          SVG trade-off scatters

Every artifact carries the manifest hash. A failing stage leaves a ``FAILED``
marker naming the stage; artifacts written before the failure are kept.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as mx
from .config import canonical_json, derive_seed, manifest_hash
from .data import (Dataset, MaskSpec, add_noise, apply_mask, load_idx, read_csv, subsample,
                   synth_gaussian_mixture)
from .distill import DistillConfig, clip_entropy, finish, make_distiller, run_teacher, student_spec_for
from .end2 import end2_student_spec
from .errors import ConfigError, GPEDError, PruneError
from .nn import forward, load_model, mlp, mnist_cnn, model_to_json
from .pruning import count_flops, count_params, fine_tune, prune, pruned_group_count
from .search import SearchSpace, frontier_csv, frontier_svg, run_search
from .sgld import SampleDump

STAGES = ("sample", "distill", "prune", "search", "eval")
CONVENTIONS = {
    "entropy": "natural log",
    "ndcg_gain": "raw uncertainty clipped at 0",
    "ndcg_discount": "1/log2(rank+1)",
    "ndcg_ties": "stable input order",
    "ndcg_zero_idcg": 1.0,
    "auroc_ties": 0.5,
    "knowledge_scores": "clipped at 0",
}


class StageError(GPEDError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------- data and specs


@dataclass
class RunData:
    train: Dataset
    distill: Dataset
    test: Dataset
    ood: dict
    num_classes: int
    input_shape: tuple


def _seed(m, label):
    return derive_seed(m["seeds"]["data"], label)


def build_data(m):
    ds = m["dataset"]
    C = ds["classes"]
    if ds["source"] == "gaussian_mixture":
        train = synth_gaussian_mixture(C, ds["n_per_class"], ds["spread"], _seed(m, "train"), ds["radius"])
        test = synth_gaussian_mixture(C, ds["test_per_class"], ds["spread"], _seed(m, "test"), ds["radius"])
    else:
        if ds["source"] == "idx":
            full = load_idx(ds["train_images"], ds["train_labels"], "train")
            held_out = load_idx(ds["test_images"], ds["test_labels"], "test") if ds["test_images"] else None
        else:
            full = read_csv(ds["train_csv"], name="train")
            held_out = read_csv(ds["test_csv"], name="test") if ds["test_csv"] else None
        if held_out is not None:
            train, test = full, held_out
        else:
            perm = np.random.default_rng(_seed(m, "split")).permutation(len(full))
            cut = int(round(len(full) * (1 - ds["test_fraction"])))
            train, test = full.take(perm[:cut], "train"), full.take(perm[cut:], "test")
    C = train.num_classes if ds["source"] != "gaussian_mixture" else C
    if ds["subsample"]:
        train = subsample(train, ds["subsample"], _seed(m, "subsample"))
    if ds["mask"]:
        train = apply_mask(train, MaskSpec(ds["mask"], ds["image_side"], _seed(m, "mask-train")))
        test = apply_mask(test, MaskSpec(ds["mask"], ds["image_side"], _seed(m, "mask-test")))
    train = Dataset(train.features, train.labels, "train", C)
    test = Dataset(test.features, test.labels, "test", C)
    if ds["distill_set"] == "fresh" and ds["source"] == "gaussian_mixture":
        fresh = synth_gaussian_mixture(C, ds["n_per_class"], ds["spread"], _seed(m, "fresh"), ds["radius"])
        distill = Dataset(fresh.features, None, "distill")
    else:
        distill = Dataset(train.features, None, "distill")
    if ds["distill_noise_std"] > 0:
        rng = np.random.default_rng(_seed(m, "distill-noise"))
        distill = Dataset(add_noise(distill.features, ds["distill_noise_std"], rng), None, "distill")
    ood = {}
    for entry in m["eval"]["ood"]:
        name = entry["name"]
        if entry["source"] == "gaussian_mixture":
            d = synth_gaussian_mixture(C, entry["n_per_class"], entry["spread"], _seed(m, "ood:" + name),
                                       entry["radius"])
        elif entry["source"] == "idx":
            d = load_idx(entry["images"], entry["labels"] or None, name)
        elif entry["source"] == "csv":
            d = read_csv(entry["csv"], name=name)
        else:
            d = test
        feats = d.features
        if entry["mask"]:
            feats = apply_mask(Dataset(feats), MaskSpec(entry["mask"], ds["image_side"], _seed(m, "ood-mask:" + name))).features
        if entry["noise_std"] > 0:
            feats = add_noise(feats, entry["noise_std"], np.random.default_rng(_seed(m, "ood-noise:" + name)))
        ood[name] = Dataset(feats, None, name)
    shape = train.features.shape[1:]
    return RunData(train, distill, test, ood, C, shape)


def teacher_spec(m, data):
    if m["teacher"]["template"] == "mnist_cnn":
        return mnist_cnn(output_dim=data.num_classes)
    d = int(np.prod(data.input_shape))
    return mlp([d] + list(m["teacher"]["hidden"]) + [data.num_classes])


def student_template(m, data):
    if m["teacher"]["template"] == "mnist_cnn":
        return mnist_cnn(output_dim=data.num_classes)
    d = int(np.prod(data.input_shape))
    return mlp([d] + list(m["distill"]["student_hidden"]) + [data.num_classes], dropout=m["distill"]["dropout"])


def distill_config(m, lam=0.0):
    """Engine settings; a positive ``lam`` picks up the prune-specific student schedule overrides."""
    sg, di, pr = m["sgld"], m["distill"], m["prune"]
    lr, halve = di["student_lr"], di["halve_every_epochs"]
    if lam > 0:
        lr, halve = pr["student_lr"] or lr, pr["halve_every_epochs"] or halve
    return DistillConfig(
        T=sg["total_iters"], B=di["burn_in"], H=di["thin"], M=sg["minibatch"], M_prime=di["minibatch"],
        lam=lam, estimator=di["estimator"], teacher_lr=sg["step_size"], teacher_schedule=sg["schedule"],
        teacher_decay_steps=sg["decay_steps"], prior_precision=sg["prior_precision"],
        student_lr=lr, halve_every_epochs=halve, optimizer=di["optimizer"],
        group_scaled=m["prune"]["scaled"], normalize_student_grad=di["normalize_student_grad"],
        entropy_weight=di["entropy_weight"], probe_every=di["probe_every"],
    )


def _probe(data):
    return data.test.take(np.arange(min(len(data.test), 500)), "probe")


def _student_seed(m, label):
    return derive_seed(m["seeds"]["student"], label)


# ---------------------------------------------------------------- formatting


def _f(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _csv(header, rows, mhash):
    buf = io.StringIO()
    buf.write(f"# manifest_hash: {mhash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_artifact_csv(path):
    """Rows of an artifact CSV as dicts (the hash comment line is skipped)."""
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _json(obj):
    def clean(o):
        if isinstance(o, float) and not math.isfinite(o):
            return None
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, np.generic):
            return clean(o.item())
        return o

    return json.dumps(clean(obj), indent=2, sort_keys=True) + "\n"


def _prediction_to_dict(pred):
    return {"probs": pred.probs.tolist(),
            "expected_data": None if pred.expected_data is None else pred.expected_data.tolist()}


def _prediction_from_dict(d):
    e = d["expected_data"]
    return mx.Prediction(np.array(d["probs"]), None if e is None else np.array(e))


# ---------------------------------------------------------------- run


class Run:
    """One experiment directory; methods are the CLI stages."""

    def __init__(self, manifest, out, workers=1, timestamp=False):
        self.m = manifest
        self.hash = manifest_hash(manifest)
        self.dir = Path(out) / manifest["run"]["id"]
        self.workers = max(1, int(workers))
        self.timestamp = timestamp
        self._data = None

    @property
    def data(self):
        if self._data is None:
            self._data = build_data(self.m)
        return self._data

    # -- io --

    def write(self, rel, text):
        path = self.dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        return path

    def write_manifest(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        return self.write("manifest.json", canonical_json({**self.m, "hash": self.hash}))

    def stage(self, name, fn):
        marker = self.dir / "FAILED"
        try:
            return fn()
        except Exception as err:
            self.dir.mkdir(parents=True, exist_ok=True)
            marker.write_text(f"stage: {name}\nerror: {type(err).__name__}: {err}\n")
            raise StageError(name, err) from err

    def run(self, subcommand):
        self.write_manifest()
        marker = self.dir / "FAILED"
        if marker.exists():
            marker.unlink()
        if subcommand == "all":
            stages = ["distill"]
            stages += ["prune"] if self.m["prune"]["enabled"] else []
            stages += ["search"] if self.m["search"]["enabled"] else []
            stages += ["eval"]
        else:
            stages = [subcommand]
        for s in stages:
            self.stage(s, getattr(self, "stage_" + s))
        return self.dir

    # -- stages --

    def _teacher_stream(self, distillers=()):
        data = self.data
        tspec = teacher_spec(self.m, data)
        sets = {"test": data.test, **data.ood}
        acc = mx.EnsembleAccumulator(tspec, sets)
        sinks = list(distillers) + [acc]
        dump = None
        if self.m["sgld"]["dump_samples"]:
            (self.dir / "models").mkdir(parents=True, exist_ok=True)
            dump = SampleDump(self.dir / "models" / "samples.jsonl", tspec, self.m["sgld"]["dump_every"],
                              manifest_hash=self.hash)
            sinks.append(dump)
        try:
            run_teacher(tspec, data.train, distill_config(self.m), self.m["seeds"]["teacher"], sinks)
        finally:
            if dump is not None:
                dump.close()
        summary = {
            "manifest_hash": self.hash,
            "samples": acc.count,
            "sets": {name: _prediction_to_dict(acc.prediction(name)) for name in sorted(sets)},
        }
        self.write("ensemble.json", _json(summary))
        return acc

    def stage_sample(self):
        self._teacher_stream()

    def stage_distill(self):
        data, m = self.data, self.m
        tspec = teacher_spec(m, data)
        template = student_template(m, data)
        cfg = distill_config(m)
        probe = _probe(data)
        distillers = {}
        for target in m["distill"]["targets"]:
            spec = student_spec_for(template, target, data.num_classes)
            distillers[target] = make_distiller(tspec, spec, target, cfg, data.distill,
                                                _student_seed(m, target), probe)
        if m["distill"]["end2"]:
            spec = end2_student_spec(template, data.num_classes, m["distill"]["end2_temperature"])
            distillers["end2"] = make_distiller(tspec, spec, "dirichlet", cfg, data.distill,
                                                _student_seed(m, "end2"), probe)
        self._teacher_stream(distillers.values())
        rows = []
        for mid, d in distillers.items():
            finish(d)
            self.write(f"models/{mid}.json", model_to_json(d.student, manifest_hash=self.hash, model_id=mid))
            rows += [[mid, r["sgld_iter"], r["distill_iter"], _f(r["probe_loss"]), _f(r["probe_metric"])]
                     for r in d.history]
        self.write("history.csv", _csv(["model_id", "sgld_iter", "distill_iter", "probe_loss", "probe_metric"],
                                       rows, self.hash))
        return distillers

    def _map(self, fn, jobs):
        if self.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(fn, jobs))
        return [fn(j) for j in jobs]

    def stage_prune(self):
        m = self.m
        lams = list(m["prune"]["lambdas"])
        results = self._map(_prune_job, [(m, lam) for lam in lams])
        rows, points = [], []
        for i, (lam, res) in enumerate(zip(lams, results)):
            self.write(f"prune/lam_{i}.json", _json({**res["report"], "lambda": lam, "manifest_hash": self.hash,
                                                     "status": res["status"]}))
            if res["model"] is not None:
                self.write(f"models/pruned_lam_{i}.json",
                           model_to_json(res["model"], manifest_hash=self.hash, model_id=f"pruned_lam_{i}"))
            rows.append([repr(lam), res["status"], res["groups_pruned"], res["params"], res["flops"],
                         _f(res["metric_pruned"]), _f(res["metric_final"]),
                         _f(res["probe_pruned"]), _f(res["probe_final"])])
            if res["status"] == "ok":
                from .search import ParetoPoint

                points.append(ParetoPoint(f"lam_{i}", res["metric_final"], res["flops"], res["params"], lam, 0.0))
        self.write("prune.csv", _csv(["lambda", "status", "groups_pruned", "params", "flops", "metric_pruned",
                                      "metric_final", "probe_loss_pruned", "probe_loss_final"], rows, self.hash))
        if points:
            from .search import pareto_frontier

            for axis in ("flops", "params"):
                self.write(f"plots/prune_{axis}.svg", frontier_svg(
                    points, pareto_frontier(points, axis), axis, m["search"]["metric"],
                    "group-lasso pruning sweep", self._svg_comment()))

    def stage_search(self):
        m, data = self.m, self.data
        if m["teacher"]["template"] == "mnist_cnn":
            space = SearchSpace("mnist_cnn", (1, data.num_classes), tuple(m["search"]["K1_grid"]),
                                tuple(m["search"]["K2_grid"]))
        else:
            base = (int(np.prod(data.input_shape)), *m["distill"]["student_hidden"], data.num_classes)
            space = SearchSpace("fcnn", tuple(base), tuple(m["search"]["K1_grid"]), tuple(m["search"]["K2_grid"]))
        result = run_search(space, _SearchJob(m), self.workers)
        self.write("frontier.csv", f"# manifest_hash: {self.hash}\n" + frontier_csv(result))
        for axis in ("flops", "params"):
            self.write(f"plots/frontier_{axis}.svg", frontier_svg(
                result.points, result.frontier[axis], axis, m["search"]["metric"], "width-multiplier search",
                self._svg_comment()))
        self.write("search.json", _json({
            "manifest_hash": self.hash,
            "best": None if result.best is None else vars(result.best),
            "failures": result.failures,
            "frontier": {axis: [p.arch_id for p in pts] for axis, pts in result.frontier.items()},
        }))
        return result

    def _svg_comment(self):
        text = f"manifest_hash: {self.hash}"
        if self.timestamp:
            text += f"; generated {time.strftime('%Y-%m-%dT%H:%M:%S')}"
        return text

    def stage_eval(self):
        m, data = self.m, self.data
        ens_path = self.dir / "ensemble.json"
        if not ens_path.exists():
            raise FileNotFoundError(f"{ens_path} missing; run the sample or distill stage first")
        ens = json.loads(ens_path.read_text())
        preds = {name: _prediction_from_dict(d) for name, d in ens["sets"].items()}
        ranking = mx.RankingConfig(m["eval"]["ranking_n"], m["eval"]["ranking_k"], m["eval"]["ranking_trials"],
                                   derive_seed(m["seeds"]["eval"], "ranking"))
        if m["eval"]["ranking_trials"] == 0 or len(data.test) < m["eval"]["ranking_k"]:
            ranking = None
        models_dir = self.dir / "models"
        loaded = {p.stem: load_model(p) for p in sorted(models_dir.glob("*.json"))} if models_dir.exists() else {}
        reference = preds["test"]
        entropy_model = loaded.get("expected_entropy")
        predictors = {"ensemble": mx.FixedPredictor(preds)}
        entropy_only = {}
        for mid, model in loaded.items():
            head = model.spec.head
            if mid == "end2":
                predictors["end2"] = mx.DirichletPredictor(model)
            elif head.kind == "joint":
                predictors[mid] = mx.StudentPredictor(model)
            elif head.kind == "softmax":
                predictors[mid] = mx.StudentPredictor(model, entropy_model)
            elif head.kind == "exponential" and model.spec.output_dim == 1:
                entropy_only[mid] = model
        reports = {}
        for mid, pred in predictors.items():
            reports[mid] = mx.evaluate_model(pred, data.test, reference, data.ood,
                                             ranking if mid != "ensemble" else None)
        for mid, model in entropy_only.items():
            h = clip_entropy(forward(model, data.test.inputs(model.spec.input_shape))[:, 0], data.num_classes)
            reports[mid] = mx.MetricReport(entropy_mae=mx.entropy_mae(h, reference.expected_data),
                                           flops=count_flops(model.spec), params=count_params(model.spec))
        reports = dict(sorted(reports.items()))
        body = {
            "manifest_hash": self.hash,
            "ensemble_samples": ens["samples"],
            "conventions": CONVENTIONS,
            "ranking": None if ranking is None else vars(ranking),
            "models": {k: r.to_dict() for k, r in reports.items()},
        }
        self.write("metrics.json", _json(body))
        rows = [(m["run"]["id"], k, "test", r) for k, r in reports.items()]
        self.write("metrics.csv", f"# manifest_hash: {self.hash}\n" + mx.reports_to_csv(rows))
        return reports


# ---------------------------------------------------------------- worker jobs (module level for pickling)


def _metric(m, model, data, reference):
    kind = m["search"]["metric"]
    x = data.test.inputs(model.spec.input_shape)
    out = forward(model, x)
    if kind == "nll":
        return mx.nll(out, data.test.labels)
    if kind == "neg_accuracy":
        return -mx.accuracy(out, data.test.labels)
    return mx.entropy_mae(clip_entropy(out[:, 0], data.num_classes), reference.expected_data)


def _search_target(m):
    return "expected_entropy" if m["search"]["metric"] == "entropy_mae" else "predictive_distribution"


def _single_run(m, student_spec, target, lam, seed_label):
    data = build_data(m)
    tspec = teacher_spec(m, data)
    d = make_distiller(tspec, student_spec, target, distill_config(m, lam), data.distill,
                       _student_seed(m, seed_label), _probe(data))
    acc = mx.EnsembleAccumulator(tspec, {"test": data.test})
    run_teacher(tspec, data.train, distill_config(m, lam), m["seeds"]["teacher"], (d, acc))
    return data, d, acc.prediction("test")


def _prune_job(job):
    m, lam = job
    target = _search_target(m)
    data = build_data(m)
    template = student_template(m, data)
    if lam > 0:
        # dropout noise would keep dead groups away from zero
        template = template.with_dropout(0.0)
    spec = student_spec_for(template, target, data.num_classes)
    data, d, reference = _single_run(m, spec, target, lam, f"prune:{lam!r}")
    res = {"status": "ok", "model": None, "groups_pruned": "", "params": "", "flops": "", "metric_pruned": None,
           "metric_final": None, "probe_pruned": None, "probe_final": None}
    try:
        pruned, report = prune(d.student, eps=m["prune"]["eps"])
    except PruneError as err:
        res.update(status="empty_layer", report=err.report or {})
        return res
    res["report"] = report
    res["metric_pruned"] = _metric(m, pruned, data, reference)
    res["probe_pruned"] = d.probe_loss(pruned)[0]
    lr = m["prune"]["restart_lr"] or None
    tuned = fine_tune(pruned, d, m["prune"]["fine_tune_epochs"], lr)
    res.update(model=tuned, groups_pruned=pruned_group_count(report), params=count_params(tuned.spec),
               flops=count_flops(tuned.spec), metric_final=_metric(m, tuned, data, reference),
               probe_final=d.probe_loss(tuned)[0])
    return res


class _SearchJob:
    def __init__(self, m):
        self.m = m

    def __call__(self, spec, arch_id):
        m = self.m
        target = _search_target(m)
        data = build_data(m)
        sspec = student_spec_for(spec, target, data.num_classes)
        data, d, reference = _single_run(m, sspec, target, 0.0, "search:" + arch_id)
        return _metric(m, d.student, data, reference), d.student


def validate_only(path, out=None, seed=None):
    """Resolve a config; with ``out`` also write the manifest. Raises ConfigError."""
    from .config import load_config

    manifest = load_config(path, seed)
    if out is not None:
        Run(manifest, out).write_manifest()
    return manifest


__all__ = ["Run", "StageError", "STAGES", "build_data", "validate_only", "ConfigError"]
