"""End-to-end acceptance suite: one verdict line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the verdicts are
also repeated in the terminal summary. The MNIST masking criterion takes
roughly 20 minutes on one core.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import oracles
from gped import autodiff as ad
from gped.config import resolve
from gped.distill import ExpectationTable, student_loss, student_spec_for, update_Uo, update_Us
from gped.end2 import dirichlet_nll, dirichlet_statistics
from gped.errors import PruneError
from gped.metrics import EnsemblePredictor, auroc, decompose, ndcg_at_k, nll
from gped.nn import (Activation, Conv2D, Dense, Dropout, MaxPool2D, Model, NetworkSpec, cifar_cnn, forward,
                     grad_from_output, init_model, mlp, mnist_cnn)
from gped.pipeline import Run, build_data, read_artifact_csv, teacher_spec
from gped.pruning import build_groups, count_flops, count_params, group_reg, prune
from gped.sgld import load_samples

from test_metrics import auroc_oracle, ndcg_oracle
from util import rel_error

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

pytestmark = pytest.mark.slow


def _config(name, **overrides):
    path = CONFIGS / name
    user = tomllib.loads(path.read_text())
    for dotted, value in overrides.items():
        sec, key = dotted.split(".")
        user.setdefault(sec, {})[key] = value
    return resolve(user, path.parent)


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------- 1


def _fd_check(spec, loss_kind, seed, train_mode=False):
    rng = np.random.default_rng(seed)
    model = init_model(spec, rng)
    model.params += rng.normal(scale=0.05, size=model.params.shape)
    x = rng.normal(size=(3,) + spec.input_shape)
    C = spec.output_dim
    if loss_kind == "cross_entropy":
        target = rng.dirichlet(np.ones(C), 3)
    elif loss_kind == "l1":
        target = rng.uniform(0, 2, (3, C))
    elif loss_kind == "joint":
        target = np.hstack([rng.dirichlet(np.ones(C - 1), 3), rng.uniform(0, 1, (3, 1))])
    else:
        target = np.log(rng.dirichlet(np.ones(C), 3))
    mask_seed = int(rng.integers(2**32))

    def loss(params):
        return student_loss(loss_kind, target, forward(Model(spec, params), x, train_mode,
                                                       np.random.default_rng(mask_seed)))[0]

    _, grad, _ = grad_from_output(model, x, lambda out: student_loss(loss_kind, target, out), train_mode,
                                  np.random.default_rng(mask_seed))
    return rel_error(grad, ad.finite_diff_grad(model, loss, 1e-6))


GRADIENT_CASES = {
    "dense+relu+softmax/cross_entropy": (mlp([3, 5, 4]), "cross_entropy", False),
    "conv+relu+maxpool+dense/cross_entropy": (NetworkSpec((2, 6, 6), (
        Conv2D(2, 3, 3), Activation("relu"), MaxPool2D(2), Dense(12, 3), Activation("softmax"))), "cross_entropy", False),
    "dropout(train)/cross_entropy": (mlp([3, 6, 3], dropout=0.4), "cross_entropy", True),
    "exponential/l1": (mlp([3, 5, 1], head="exponential"), "l1", False),
    "log_softmax/l1": (mlp([3, 5, 3], head="log_softmax"), "l1", False),
    "joint/joint": (mlp([3, 5, 4], head="joint"), "joint", False),
    "dirichlet/dirichlet_nll": (student_spec_for(mlp([3, 5, 3]), "dirichlet", 3, 2.5), "dirichlet", False),
}


def test_criterion_1_gradients(criterion):
    c = criterion(1, "gradient suite vs central finite differences")
    t0 = time.time()
    for name, (spec, kind, train) in GRADIENT_CASES.items():
        worst = max(_fd_check(spec, kind, seed, train) for seed in range(100))
        c.check(name, worst < 1e-5, f"max rel err {worst:.1e}")
    worst = 0.0
    for seed in range(100):
        spec = mlp([3, 4, 5, 2])
        params = init_model(spec, np.random.default_rng(seed)).params
        part = build_groups(spec)
        scaled = bool(seed % 2)
        _, grad = group_reg(params, part, scaled)
        fd = ad.finite_diff_grad(params, lambda p: group_reg(p, part, scaled)[0], 1e-6)
        worst = max(worst, rel_error(grad, fd))
    c.check("group regularizer", worst < 1e-5, f"max rel err {worst:.1e}")
    elapsed = time.time() - t0
    c.check("runtime < 60 s", elapsed < 60, f"{elapsed:.1f} s")
    c.finish()


# ---------------------------------------------------------------- 2


def test_criterion_2_estimator_oracle(criterion):
    c = criterion(2, "U_o running mean and U_s last sample")
    rng = np.random.default_rng(0)
    n, dim = 1000, 3
    visits = rng.integers(1, 1001, n)
    uo, us = ExpectationTable.zeros(n, dim), ExpectationTable.zeros(n, dim)
    sums = np.zeros((n, dim))
    history = [[] for _ in range(n)]
    last = np.zeros((n, dim))
    for r in range(visits.max()):
        live = rng.permutation(np.flatnonzero(visits > r))
        for batch in np.array_split(live, max(1, len(live) // 100)):
            g = rng.dirichlet(np.ones(dim), size=len(batch))
            update_Uo(uo, batch, g)
            update_Us(us, batch, g)
            for i, row in zip(batch, g):
                history[i].append(row)
            last[batch] = g
    exact = np.array([[math.fsum(col) / len(h) for col in zip(*h)] for h in history])
    err = np.abs(uo.g_hat - exact).max()
    c.check("U_o vs batch mean", err <= 1e-12, f"max |diff| {err:.1e} over {visits.sum()} visits")
    c.check("U_s equals last sample", np.array_equal(us.g_hat, last))
    c.check("visit counts", np.array_equal(uo.counts, visits) and np.array_equal(us.counts, visits))
    c.finish()


# ---------------------------------------------------------------- 3


def test_criterion_3_sgld(criterion):
    c = criterion(3, "SGLD correctness")
    a, b = oracles.sgld_vs_sgd(seed=3, steps=500)
    c.check("(a) SGD reduction bit-exact", a.shape == b.shape and np.array_equal(a, b))
    (m, v), (m_ref, v_ref) = oracles.conjugate_gaussian(post_burn_steps=100_000, seed=0)
    em, ev = abs(m - m_ref) / abs(m_ref), abs(v - v_ref) / v_ref
    c.check("(b) conjugate posterior moments", em < 0.10 and ev < 0.10,
            f"mean rel err {em:.3f}, var rel err {ev:.3f}")
    emp, eta = oracles.langevin_noise_variance(eta=2e-3, steps=10_000, dim=50, seed=0)
    c.check("(c) noise variance", abs(emp / eta - 1) < 0.05, f"ratio {emp / eta:.4f}")
    c.finish()


# ---------------------------------------------------------------- 4


def test_criterion_4_bdk(criterion):
    c = criterion(4, "BDK special case vs straight-line reference")
    engine, ref = oracles.bdk_case(steps=500, seed=0)
    diff = np.abs(engine - ref).max()
    c.check("trajectory match over 500 steps", engine.shape == ref.shape and engine.shape[0] == 500 and diff <= 1e-10,
            f"max |diff| {diff:.1e}")
    c.finish()


# ---------------------------------------------------------------- 5 and 9


@pytest.fixture(scope="module")
def fixture_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture")
    common = {"prune.enabled": False, "search.enabled": False}
    t0 = time.time()
    uo = _config("fixture.toml", **common, **{"sgld.dump_samples": True, "run.id": "uo"})
    Run(uo, out).run("distill")
    Run(uo, out).run("eval")
    us = _config("fixture.toml", **common, **{"distill.estimator": "Us", "distill.end2": False,
                                              "distill.targets": ["expected_entropy"], "run.id": "us"})
    Run(us, out).run("distill")
    Run(us, out).run("eval")
    elapsed = time.time() - t0
    metrics = {k: json.loads((out / k / "metrics.json").read_text())["models"] for k in ("uo", "us")}
    return {"out": out, "manifest": uo, "metrics": metrics, "elapsed": elapsed}


def test_criterion_5_fixture_distillation(criterion, fixture_runs):
    c = criterion(5, "fixture distillation")
    m = fixture_runs["manifest"]
    data = build_data(m)
    samples = load_samples(fixture_runs["out"] / "uo" / "models" / "samples.jsonl")
    ens_nll = nll(EnsemblePredictor(teacher_spec(m, data), [s.params for s in samples]).predict(data.test).probs,
                  data.test.labels)
    uo, us = fixture_runs["metrics"]["uo"], fixture_runs["metrics"]["us"]
    student_nll = uo["predictive_distribution"]["nll"]
    c.check("student NLL within 0.05 of ensemble", abs(student_nll - ens_nll) <= 0.05,
            f"{student_nll:.4f} vs {ens_nll:.4f} from {len(samples)} dumped samples")
    c.check("streamed ensemble equals dumped ensemble", abs(uo["ensemble"]["nll"] - ens_nll) < 1e-9)
    mae_o, mae_s = uo["expected_entropy"]["entropy_mae"], us["expected_entropy"]["entropy_mae"]
    c.check("entropy MAE < 0.05", mae_o < 0.05, f"{mae_o:.4f} nats")
    c.check("U_o MAE <= U_s MAE", mae_o <= mae_s, f"{mae_o:.4f} vs {mae_s:.4f}")
    hist = read_artifact_csv(fixture_runs["out"] / "uo" / "history.csv")
    curve = [float(r["probe_loss"]) for r in hist if r["model_id"] == "predictive_distribution"]
    q = len(curve) // 4
    first, last = np.mean(curve[:q]), np.mean(curve[-q:])
    c.check("probe loss falls between first and last quartile", last < first, f"{first:.4f} -> {last:.4f}")
    elapsed = fixture_runs["elapsed"]
    c.check("runtime < 5 min", elapsed < 300, f"{elapsed:.0f} s for both estimators")
    c.finish()


def test_criterion_9_end2(criterion, fixture_runs):
    c = criterion(9, "EnD2 baseline")
    v = dirichlet_nll(np.array([1.0, 1.0]), np.array([0.5, 0.5]))[0]
    c.check("Dirichlet NLL((1,1),(.5,.5)) = 0", v == 0.0, repr(v))
    _, expected, _ = dirichlet_statistics(np.array([1.0, 1.0]))
    pi = np.random.default_rng(0).dirichlet([1.0, 1.0], size=400_000)
    mc = float(-(pi * np.log(pi)).sum(axis=1).mean())
    c.check("E[H] for alpha=(1,1)", abs(expected - 0.5) <= 1e-3 and abs(expected - mc) <= 1e-3,
            f"{float(expected):.6f}, sampling {mc:.6f}")
    uo = fixture_runs["metrics"]["uo"]
    g, e = uo["predictive_distribution"]["entropy_mae"], uo["end2"]["entropy_mae"]
    c.check("GPED entropy MAE <= EnD2 entropy MAE", g <= e, f"{g:.4f} vs {e:.4f}")
    c.finish()


# ---------------------------------------------------------------- 6


def test_criterion_6_masking_trend(criterion, tmp_path):
    c = criterion(6, "MNIST masking trend")
    t0 = time.time()
    teacher, gap, rates = [], [], []
    for mask in (0, 14, 26):
        m = _config("mnist_masked.toml", **{"dataset.mask": mask, "run.id": f"mask{mask}"})
        Run(m, tmp_path).run("distill")
        Run(m, tmp_path).run("eval")
        models = json.loads((tmp_path / f"mask{mask}" / "metrics.json").read_text())["models"]
        t_nll, s_nll = models["ensemble"]["nll"], models["predictive_distribution"]["nll"]
        teacher.append(t_nll)
        gap.append(s_nll - t_nll)
        rates.append(mask * mask / 784)
    elapsed = time.time() - t0
    fmt = ", ".join(f"r={r:.3f}: teacher {t:.4f} gap {g:+.4f}" for r, t, g in zip(rates, teacher, gap))
    c.check("teacher NLL strictly increasing", teacher[0] < teacher[1] < teacher[2], fmt)
    c.check("gap peaks at r=0.25", gap[1] > gap[0] and gap[1] > gap[2])
    c.check("saturation at r=0.862", abs(teacher[2] - math.log(10)) <= 0.05, f"|{teacher[2]:.4f} - ln 10|")
    c.check("runtime < 30 min", elapsed < 1800, f"{elapsed / 60:.1f} min")
    c.finish()


# ---------------------------------------------------------------- 7


def test_criterion_7_pruning(criterion):
    c = criterion(7, "pruning")
    rng = np.random.default_rng(0)
    worst, idem = 0.0, True
    for seed in range(20):
        spec = [mlp([2, 3, 2]), mlp([5, 8, 6, 3]), mnist_cnn(0.5, 0.5)][seed % 3]
        m = init_model(spec, np.random.default_rng(seed))
        m.params += rng.normal(scale=0.1, size=m.params.shape)
        for b in build_groups(spec).blocks:
            dead = rng.choice(b.n_groups, size=rng.integers(0, b.n_groups), replace=False)
            for k in dead:
                m.params[b.start + k * b.size: b.start + (k + 1) * b.size] = 0.0
        x = rng.uniform(size=(6,) + spec.input_shape)
        pruned, _ = prune(m)
        worst = max(worst, np.abs(forward(pruned, x) - forward(m, x)).max())
        again, report = prune(pruned)
        idem &= again.spec == pruned.spec and np.array_equal(again.params, pruned.params) and not report["layers"]
    c.check("forward equivalence", worst <= 1e-10, f"max |diff| {worst:.1e}")
    c.check("idempotence", idem)
    sweeps = [oracles.lambda_sweep(seed) for seed in range(5)]
    mono = all(all(a <= b for a, b in zip(s, s[1:])) for s in sweeps)
    c.check("lambda monotonicity (5 seeds)", mono, "counts " + " ".join(str(s) for s in sweeps))
    hand = {
        "Dense(784,400)": (mlp([784, 400]), 314_000, 627_600),
        "FCNN 784-400-400-10": (mlp([784, 400, 400, 10]), 478_410, 956_010),
        "FCNN 784-100-100-10": (mlp([784, 100, 100, 10]), 89_610, 179_010),
        "MNIST CNN": (mnist_cnn(), 29_880, 779_160),
        "CIFAR CNN": (cifar_cnn(), 184_808, 4_798_604),
    }
    bad = [k for k, (s, p, f) in hand.items() if (count_params(s), count_flops(s)) != (p, f)]
    c.check("params/FLOPs counters", not bad, ", ".join(bad) or f"{len(hand)} architectures exact")
    c.finish()


# ---------------------------------------------------------------- 8


def test_criterion_8_metrics(criterion):
    c = criterion(8, "metric oracles")
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(200):
        n, m = rng.integers(1, 60, size=2)
        a, b = rng.integers(0, 12, n) / 3.0, rng.integers(0, 12, m) / 3.0 + rng.choice([0.0, 1.0])
        ok &= auroc(a, b) == auroc_oracle(a, b)
    c.check("AUROC exact on 200 sets", ok)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 80))
        k = int(rng.integers(1, n + 1))
        s, rel = rng.integers(0, 8, n).astype(float), rng.uniform(0, 3, n)
        worst = max(worst, abs(ndcg_at_k(s, rel, k) - ndcg_oracle(list(s), list(rel), k)))
    c.check("nDCG@k vs direct formula", worst <= 1e-12, f"max |diff| {worst:.1e}")
    id_err, kmin = 0.0, math.inf
    for _ in range(10_000):
        p = rng.dirichlet(np.full(rng.integers(2, 8), rng.uniform(0.1, 3.0)), size=rng.integers(1, 10))
        r = decompose(p)
        id_err = max(id_err, abs(r.total - r.expected_data - r.knowledge))
        kmin = min(kmin, r.knowledge)
    c.check("decomposition identity", id_err <= 1e-12, f"max err {id_err:.1e}")
    c.check("knowledge >= -1e-9", kmin >= -1e-9, f"min {kmin:.1e}")
    c.finish()


# ---------------------------------------------------------------- 10


def test_criterion_10_determinism(criterion, tmp_path):
    c = criterion(10, "byte-identical reruns")
    m = _config("fixture.toml")
    trees = []
    for name in ("a", "b"):
        Run(m, tmp_path / name).run("all")
        trees.append(_tree(tmp_path / name))
    data_files = [k for k in trees[0] if k.endswith((".csv", ".json", ".jsonl", ".svg"))]
    diff = [k for k in set(trees[0]) | set(trees[1]) if trees[0].get(k) != trees[1].get(k)]
    c.check("all artifacts identical", not diff and len(data_files) > 10,
            f"{len(data_files)} files compared" + (f", differing: {sorted(diff)}" if diff else ""))
    c.finish()
