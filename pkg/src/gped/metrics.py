"""Uncertainty decomposition and evaluation metrics.

All entropies are in nats. Predictors expose ``predict(dataset)`` returning a
:class:`Prediction` so students, Dirichlet students and sample ensembles are
scored by the same code.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .distill import LOG_FLOOR, clip_entropy, entropy
from .errors import ContractError
from .nn import Model, forward
from .pruning import count_flops, count_params


@dataclass(frozen=True)
class UncertaintyReport:
    total: float
    expected_data: float

    @property
    def knowledge(self):
        return self.total - self.expected_data


def _check_probs(p, tol=1e-6):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ContractError("not a valid probability distribution")
    return p


def decompose(distributions):
    """Total, expected data and knowledge uncertainty of an ensemble of categoricals."""
    p = _check_probs(np.atleast_2d(distributions))
    if len(p) == 0:
        raise ContractError("need at least one distribution")
    return UncertaintyReport(float(entropy(p.mean(axis=0))), float(entropy(p).mean()))


def nll(probs, labels):
    p = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    return float(-np.mean(np.log(np.maximum(p[np.arange(len(p)), labels], LOG_FLOOR))))


def accuracy(probs, labels):
    """Argmax match rate; ties go to the lowest class index."""
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def entropy_mae(student, reference):
    student = np.asarray(student, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if student.shape != reference.shape:
        raise ContractError(f"length mismatch: {student.shape} vs {reference.shape}")
    return float(np.mean(np.abs(student - reference)))


def auroc(in_scores, out_scores):
    """P(out score > in score) + 0.5 P(tie), via midranks (Mann-Whitney U)."""
    a = np.asarray(in_scores, dtype=np.float64).ravel()
    b = np.asarray(out_scores, dtype=np.float64).ravel()
    if len(a) == 0 or len(b) == 0:
        raise ContractError("AUROC needs nonempty in- and out-of-distribution sets")
    both = np.concatenate([a, b])
    order = np.argsort(both, kind="stable")
    sorted_vals = both[order]
    ranks = np.empty(len(both))
    # midranks over runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], len(both)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e + 1)
    u = ranks[len(a):].sum() - len(b) * (len(b) + 1) / 2.0
    # U is a multiple of 0.5, so this division is the only rounding step
    return float(u / (len(a) * len(b)))


def ndcg_at_k(student_scores, reference_relevance, k):
    """nDCG@k of the ranking induced by ``student_scores`` (descending, stable).

    Gain is the raw relevance, discount 1/log2(rank + 1); all-zero relevance gives 1.0.
    """
    s = np.asarray(student_scores, dtype=np.float64)
    rel = np.asarray(reference_relevance, dtype=np.float64)
    if s.shape != rel.shape or len(s) < k or k < 1:
        raise ContractError("need equal-length score vectors with at least k items")
    if np.any(rel < 0):
        raise ContractError("relevance must be nonnegative")
    discount = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float(rel[np.argsort(-s, kind="stable")[:k]] @ discount)
    idcg = float(np.ascontiguousarray(np.sort(rel)[::-1][:k]) @ discount)
    return 1.0 if idcg == 0 else dcg / idcg


@dataclass(frozen=True)
class RankingConfig:
    n: int = 100
    k: int = 20
    trials: int = 500
    seed: int = 0


def ranking_trials(student_scores, reference_relevance, config=RankingConfig()):
    """Mean and std of nDCG@k over random subsets of ``config.n`` instances."""
    s = np.asarray(student_scores)
    rel = np.clip(np.asarray(reference_relevance), 0.0, None)
    n = min(config.n, len(s))
    rng = np.random.default_rng(config.seed)
    vals = np.array([ndcg_at_k(s[idx], rel[idx], min(config.k, n))
                     for idx in (rng.choice(len(s), n, replace=False) for _ in range(config.trials))])
    return float(vals.mean()), float(vals.std())


# ---------------------------------------------------------------- predictors


@dataclass
class Prediction:
    probs: np.ndarray
    expected_data: np.ndarray | None = None

    @property
    def total(self):
        return entropy(self.probs)

    @property
    def knowledge(self):
        """Raw total - expected data; may be negative for distilled heads."""
        return None if self.expected_data is None else self.total - self.expected_data


class StudentPredictor:
    """A softmax student, optionally paired with an entropy student, or a joint student."""

    def __init__(self, model, entropy_model=None):
        self.model = model
        self.entropy_model = entropy_model

    def predict(self, dataset):
        x = dataset.inputs(self.model.spec.input_shape)
        out = forward(self.model, x)
        head = self.model.spec.head.kind
        if head == "joint":
            C = out.shape[1] - 1
            return Prediction(out[:, :C], clip_entropy(out[:, C], C))
        expected = None
        if self.entropy_model is not None:
            h = forward(self.entropy_model, dataset.inputs(self.entropy_model.spec.input_shape))[:, 0]
            expected = clip_entropy(h, out.shape[1])
        return Prediction(out, expected)

    def cost_models(self):
        return [self.model] + ([self.entropy_model] if self.entropy_model is not None else [])


class DirichletPredictor:
    def __init__(self, model):
        self.model = model

    def predict(self, dataset):
        from .end2 import dirichlet_statistics

        alpha = forward(self.model, dataset.inputs(self.model.spec.input_shape))
        mean, expected, _ = dirichlet_statistics(alpha)
        return Prediction(mean, expected)

    def cost_models(self):
        return [self.model]


class EnsembleAccumulator:
    """Chain sink averaging p(y|x, theta) and its entropy over retained samples.

    Keeps only running sums per evaluation set, so memory does not grow with the
    number of samples.
    """

    def __init__(self, spec, datasets):
        self.spec = spec
        self.datasets = dict(datasets)
        self.sum_p = {k: np.zeros((len(d), spec.output_dim)) for k, d in self.datasets.items()}
        self.sum_h = {k: np.zeros(len(d)) for k, d in self.datasets.items()}
        self.count = 0

    def __call__(self, t, theta):
        model = Model(self.spec, theta)
        for k, d in self.datasets.items():
            p = forward(model, d.inputs(self.spec.input_shape))
            self.sum_p[k] += p
            self.sum_h[k] += entropy(p)
        self.count += 1

    def prediction(self, name):
        if self.count == 0:
            raise ContractError("ensemble has no samples")
        return Prediction(self.sum_p[name] / self.count, self.sum_h[name] / self.count)


class EnsemblePredictor:
    """Posterior-predictive ensemble over explicit parameter samples."""

    def __init__(self, spec, thetas):
        self.spec = spec
        self.thetas = list(thetas)
        if not self.thetas:
            raise ContractError("ensemble has no samples")

    def predict(self, dataset):
        acc = EnsembleAccumulator(self.spec, {"d": dataset})
        for th in self.thetas:
            acc(0, th)
        return acc.prediction("d")

    def cost_models(self):
        return []


class FixedPredictor:
    """Wraps precomputed predictions keyed by dataset name."""

    def __init__(self, predictions):
        self.predictions = predictions

    def predict(self, dataset):
        return self.predictions[dataset.name]

    def cost_models(self):
        return []


# ---------------------------------------------------------------- evaluation


@dataclass
class MetricReport:
    nll: float | None = None
    accuracy: float | None = None
    entropy_mae: float | None = None
    auroc: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    flops: int | None = None
    params: int | None = None

    def to_dict(self):
        return {
            "nll": self.nll,
            "accuracy": self.accuracy,
            "entropy_mae": self.entropy_mae,
            "auroc": self.auroc,
            "ndcg": self.ndcg,
            "flops": self.flops,
            "params": self.params,
        }


def _scores(pred):
    out = {"total": pred.total}
    if pred.expected_data is not None:
        out["knowledge"] = np.clip(pred.knowledge, 0.0, None)
    return out


def evaluate_model(predictor, dataset, reference=None, ood_sets=None, ranking=None):
    """Score ``predictor`` on ``dataset`` in one pass.

    ``reference`` is the ensemble :class:`Prediction` on ``dataset``; it drives
    the entropy MAE and the nDCG relevances. ``ood_sets`` maps names to datasets
    for AUROC, with in-distribution = ``dataset``.
    """
    pred = predictor.predict(dataset)
    report = MetricReport()
    if dataset.labels is not None:
        report.nll = nll(pred.probs, dataset.labels)
        report.accuracy = accuracy(pred.probs, dataset.labels)
    if reference is not None and pred.expected_data is not None and reference.expected_data is not None:
        report.entropy_mae = entropy_mae(pred.expected_data, reference.expected_data)
    in_scores = _scores(pred)
    for name, ood in sorted((ood_sets or {}).items()):
        out_scores = _scores(predictor.predict(ood))
        report.auroc[name] = {kind: auroc(in_scores[kind], out_scores[kind]) for kind in in_scores}
    if ranking is not None and reference is not None:
        ref_scores = _scores(reference)
        for kind in in_scores:
            if kind in ref_scores:
                mean, std = ranking_trials(in_scores[kind], ref_scores[kind], ranking)
                report.ndcg[kind] = {"mean": mean, "std": std}
    models = predictor.cost_models()
    if models:
        report.flops = sum(count_flops(m.spec) for m in models)
        report.params = sum(count_params(m.spec) for m in models)
    return report


def reports_to_csv(rows):
    """rows: iterable of (run_id, model_id, dataset, MetricReport). One line per OOD set."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_id", "model_id", "dataset", "ood_set", "nll", "accuracy", "entropy_mae",
                "auroc_total", "auroc_knowledge", "ndcg_total", "ndcg_knowledge", "flops", "params"])

    def fmt(v):
        return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(v)

    for run_id, model_id, dname, rep in rows:
        ndcg_t = rep.ndcg.get("total", {}).get("mean")
        ndcg_k = rep.ndcg.get("knowledge", {}).get("mean")
        for ood in sorted(rep.auroc) or [""]:
            a = rep.auroc.get(ood, {})
            w.writerow([run_id, model_id, dname, ood, fmt(rep.nll), fmt(rep.accuracy), fmt(rep.entropy_mae),
                        fmt(a.get("total")), fmt(a.get("knowledge")), fmt(ndcg_t), fmt(ndcg_k),
                        fmt(rep.flops), fmt(rep.params)])
    return buf.getvalue()


def report_to_json(report):
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)
