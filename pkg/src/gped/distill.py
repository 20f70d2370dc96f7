"""Online distillation of posterior expectations from an SGLD teacher.

Every SGLD iteration updates the teacher. On every H-th iteration after
burn-in, a minibatch of the distillation set is scored by the current teacher
sample, the per-instance expectation estimates are refreshed (overwrite for
``Us``, running mean for ``Uo``) and the student takes one optimizer step
towards them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import add_noise, minibatch
from .errors import ContractError, RangeError
from .nn import Activation, Model, forward, grad_from_output, init_model
from .optim import AdamState, HalvingSchedule, adam_step
from .sgld import ChainConfig, ClassifierLikelihood, PriorSpec, SamplerState, StepSchedule, run_chain

LOG_FLOOR = 1e-12
TARGETS = ("predictive_distribution", "expected_entropy", "marginal_variance", "joint", "dirichlet")
DEFAULT_LOSS = {
    "predictive_distribution": "cross_entropy",
    "expected_entropy": "l1",
    "marginal_variance": "l1",
    "joint": "joint",
    "dirichlet": "dirichlet",
}


# ---------------------------------------------------------------- targets


def entropy(p):
    """Natural-log entropy along the last axis, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


def g_eval(target, teacher_output):
    """The per-sample statistic g(y, x, theta) computed from teacher probabilities.

    Returns a (n, dim) array for (n, C) input, or a (dim,) vector for a single
    distribution.
    """
    p = np.asarray(teacher_output, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError("teacher output is not a probability distribution")
    if target == "predictive_distribution":
        g = p
    elif target == "expected_entropy":
        g = entropy(p)[:, None]
    elif target == "marginal_variance":
        g = p * (1.0 - p)
    elif target == "joint":
        g = np.concatenate([p, entropy(p)[:, None]], axis=1)
    elif target == "dirichlet":
        g = np.log(np.maximum(p, LOG_FLOOR))
    else:
        raise ContractError(f"unknown target {target!r}")
    return g[0] if single else g


def target_dim(target, num_classes):
    return {"expected_entropy": 1, "joint": num_classes + 1}.get(target, num_classes)


def student_head(target, temperature=1.0):
    if target == "predictive_distribution":
        return Activation("softmax")
    if target == "joint":
        return Activation("joint")
    if target == "dirichlet":
        return Activation("exponential", temperature)
    return Activation("exponential")


def student_spec_for(template, target, num_classes, temperature=1.0):
    """``template`` with its output width and head adapted to ``target``."""
    return template.with_head(student_head(target, temperature), target_dim(target, num_classes))


def clip_entropy(h, num_classes):
    """Evaluation-time clip of entropy-head outputs to [0, ln C + 0.1]."""
    return np.clip(h, 0.0, math.log(num_classes) + 0.1)


# ---------------------------------------------------------------- estimators


@dataclass
class ExpectationTable:
    """Per-instance estimates g_hat (n, dim) and visit counts (n,)."""

    g_hat: np.ndarray
    counts: np.ndarray

    @classmethod
    def zeros(cls, n, dim):
        return cls(np.zeros((n, dim)), np.zeros(n, dtype=np.int64))


def _rows(table, index):
    idx = np.atleast_1d(np.asarray(index))
    if len(np.unique(idx)) != len(idx):
        raise ContractError("indices within one update must be distinct")
    return idx


def update_Us(table, index, g_new, cols=slice(None), count=True):
    """Overwrite the estimate with the newest sample."""
    idx = _rows(table, index)
    table.g_hat[idx, cols] = np.asarray(g_new).reshape(len(idx), -1)
    if count:
        table.counts[idx] += 1
    return table


def update_Uo(table, index, g_new, cols=slice(None), count=True):
    """Running Monte Carlo mean: (m * g_hat + g_new) / (m + 1)."""
    idx = _rows(table, index)
    m = table.counts[idx].astype(np.float64)[:, None]
    g = np.asarray(g_new).reshape(len(idx), -1)
    table.g_hat[idx, cols] = (m * table.g_hat[idx, cols] + g) / (m + 1.0)
    if count:
        table.counts[idx] += 1
    return table


UPDATES = {"Us": update_Us, "Uo": update_Uo}


# ---------------------------------------------------------------- losses


def student_loss(loss_kind, target_value, student_output, entropy_weight=1.0):
    """Summed loss over a batch and its gradient w.r.t. the student output.

    ``cross_entropy``: sum_y -g_y log q_y with q floored at 1e-12.
    ``l1``: |g - h|, subgradient sign(h - g) w.r.t. the output (0 at equality).
    ``joint``: cross-entropy on all but the last column plus weighted l1 on it.
    ``dirichlet``: Dirichlet negative log-likelihood (output = concentrations).
    """
    g = np.asarray(target_value, dtype=np.float64)
    q = np.asarray(student_output, dtype=np.float64)
    if g.shape != q.shape:
        raise ContractError(f"target shape {g.shape} != output shape {q.shape}")
    if loss_kind == "cross_entropy":
        live = q > LOG_FLOOR
        safe = np.where(live, q, LOG_FLOOR)
        value = float(-(g * np.log(safe)).sum())
        grad = np.where(live, -g / safe, 0.0)
        return value, grad
    if loss_kind == "l1":
        diff = q - g
        return float(np.abs(diff).sum()), np.sign(diff)
    if loss_kind == "joint":
        v1, g1 = student_loss("cross_entropy", g[..., :-1], q[..., :-1])
        v2, g2 = student_loss("l1", g[..., -1:], q[..., -1:])
        return v1 + entropy_weight * v2, np.concatenate([g1, entropy_weight * g2], axis=-1)
    if loss_kind == "dirichlet":
        from .end2 import dirichlet_nll_from_logs

        return dirichlet_nll_from_logs(q, g)
    raise ContractError(f"unknown loss {loss_kind!r}")


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class DistillConfig:
    """Hyper-parameters of one distillation run (defaults follow the MNIST setup)."""

    T: int = 1_000_000
    B: int = 1000
    H: int = 100
    M: int = 100
    M_prime: int = 100
    lam: float = 0.0
    estimator: str = "Us"
    loss: str | None = None
    teacher_lr: float = 4e-6
    teacher_schedule: str = "constant"
    teacher_decay_steps: float = 1.0
    prior_precision: float = 10.0
    student_lr: float = 1e-3
    halve_every_epochs: int = 200
    optimizer: str = "adam"
    normalize_student_grad: bool = False
    group_scaled: bool = False
    bdk_noise_std: float = 0.0
    entropy_weight: float = 1.0
    probe_every: int = 50

    def __post_init__(self):
        if not self.T > self.B >= 0:
            raise ContractError(f"distill.burn_in must be < sgld.total_iters (B={self.B}, T={self.T})")
        if self.H < 1:
            raise ContractError("thinning interval H must be >= 1")
        if self.lam < 0:
            raise ContractError("regularization strength must be >= 0")
        if self.estimator not in UPDATES:
            raise ContractError(f"unknown estimator {self.estimator!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.M < 1 or self.M_prime < 1:
            raise ContractError("minibatch sizes must be positive")

    def loss_for(self, target):
        return self.loss or DEFAULT_LOSS[target]

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- engine


class Distiller:
    """Student-side state of a run: table, student, optimizer and probe history.

    Call it as a chain sink, ``distiller(t, theta_t)``.
    """

    def __init__(self, teacher_spec, student, target, config, D_prime, rng, probe=None, partition=None):
        if target not in TARGETS:
            raise ContractError(f"unknown target {target!r}")
        self.teacher_spec = teacher_spec
        self.student = student
        self.target = target
        self.config = config
        self.loss_kind = config.loss_for(target)
        self.D_prime = D_prime
        self.rng = rng
        self.num_classes = teacher_spec.output_dim
        dim = target_dim(target, self.num_classes)
        if student.spec.output_dim != dim:
            raise ContractError(f"student emits {student.spec.output_dim} values, target needs {dim}")
        if config.M_prime > len(D_prime):
            raise RangeError(f"M' = {config.M_prime} exceeds |D'| = {len(D_prime)}")
        self.table = ExpectationTable.zeros(len(D_prime), dim)
        self.adam = AdamState.zeros(student.params.size)
        self.s = 0
        steps_per_epoch = math.ceil(len(D_prime) / config.M_prime)
        self.lr = HalvingSchedule(config.student_lr, config.halve_every_epochs * steps_per_epoch)
        self.partition = partition
        if config.lam > 0 and partition is None:
            from .pruning import build_groups

            self.partition = build_groups(student.spec)
        self.probe = probe
        self.probe_table = None if probe is None else ExpectationTable.zeros(len(probe), dim)
        self.history = []
        self.last_t = -1

    # -- teacher side --

    def teacher_g(self, theta, x):
        p = forward(Model(self.teacher_spec, theta), x.reshape((len(x),) + self.teacher_spec.input_shape))
        return g_eval(self.target, p)

    def update_table(self, table, idx, g):
        if self.target == "joint":
            C = self.num_classes
            UPDATES[self.config.estimator](table, idx, g[:, :C], cols=slice(0, C), count=False)
            update_Uo(table, idx, g[:, C:], cols=slice(C, C + 1), count=False)
            table.counts[idx] += 1
        else:
            UPDATES[self.config.estimator](table, idx, g)

    def __call__(self, t, theta):
        idx, x, _ = minibatch(self.D_prime, self.config.M_prime, self.rng)
        if self.config.bdk_noise_std > 0:
            x = add_noise(x, self.config.bdk_noise_std, self.rng)
        self.update_table(self.table, idx, self.teacher_g(theta, x))
        if self.probe is not None:
            pidx = np.arange(len(self.probe))
            update_Uo(self.probe_table, pidx, self.teacher_g(theta, self.probe.features))
        self.step(x, self.table.g_hat[idx])
        self.last_t = t
        if self.probe is not None and self.s % self.config.probe_every == 0:
            self.record()

    # -- student side --

    def step(self, x, targets, lam=None, lr=None):
        """One regularized optimizer step on a minibatch; returns the batch loss."""
        cfg = self.config
        lam = cfg.lam if lam is None else lam
        student = self.student
        x = x.reshape((len(x),) + student.spec.input_shape)
        scale = (1.0 / cfg.M_prime) if cfg.normalize_student_grad else len(self.D_prime) / cfg.M_prime

        def loss_fn(out):
            return student_loss(self.loss_kind, targets, out, cfg.entropy_weight)

        value, grad, _ = grad_from_output(student, x, loss_fn, train_mode=True, rng=self.rng)
        grad = scale * grad
        if lam > 0:
            from .pruning import group_reg

            grad = grad + lam * group_reg(student.params, self.partition, cfg.group_scaled)[1]
        rate = self.lr(self.s) if lr is None else lr
        if cfg.optimizer == "adam":
            params, self.adam = adam_step(student.params, grad, self.adam, rate)
        else:
            params = student.params - rate * grad
        self.student = Model(student.spec, params)
        self.s += 1
        return value

    def probe_loss(self, model=None):
        """Mean distillation loss of ``model`` against the running ensemble on the probe set."""
        model = model or self.student
        out = forward(model, self.probe.inputs(model.spec.input_shape))
        value, _ = student_loss(self.loss_kind, self.probe_table.g_hat, out, self.config.entropy_weight)
        return value / len(self.probe), out

    def probe_metric(self, out):
        C = self.num_classes
        if self.target in ("predictive_distribution", "joint") and self.probe.labels is not None:
            p = out[:, :C]
            return float(-np.mean(np.log(np.maximum(p[np.arange(len(p)), self.probe.labels], LOG_FLOOR))))
        if self.target == "expected_entropy":
            return float(np.mean(np.abs(clip_entropy(out[:, 0], C) - self.probe_table.g_hat[:, 0])))
        return float("nan")

    def record(self):
        loss, out = self.probe_loss()
        row = {"sgld_iter": self.last_t, "distill_iter": self.s, "probe_loss": loss, "probe_metric": self.probe_metric(out)}
        self.history.append(row)
        return row

    def train_on_table(self, steps, lr, model=None):
        """Continue training against the frozen table (visited instances only), regularizer off."""
        if model is not None:
            self.student = model
            self.adam = AdamState.zeros(model.params.size)
        seen = np.flatnonzero(self.table.counts > 0)
        if len(seen) == 0:
            raise ContractError("expectation table is empty; nothing to train on")
        size = min(self.config.M_prime, len(seen))
        for _ in range(steps):
            idx = seen[self.rng.choice(len(seen), size=size, replace=False)]
            self.step(self.D_prime.features[idx], self.table.g_hat[idx], lam=0.0, lr=lr)
        return self.student


@dataclass
class GPEDResult:
    student: Model
    history: list
    distiller: Distiller = field(repr=False)
    teacher_state: SamplerState = field(repr=False)


def distill_step(distiller, idx, features, teacher_theta):
    """Table update and student step for one minibatch of distillation instances."""
    distiller.update_table(distiller.table, idx, distiller.teacher_g(teacher_theta, features))
    return distiller.step(features, distiller.table.g_hat[idx])


def make_teacher_state(teacher_spec, config, seed):
    rng = np.random.default_rng(seed)
    teacher = init_model(teacher_spec, rng)
    schedule = StepSchedule(config.teacher_lr, config.teacher_schedule, config.teacher_decay_steps)
    return SamplerState(teacher.params, 0, rng, schedule)


def run_teacher(teacher_spec, D, config, seed, sinks=()):
    """One SGLD chain; every sink gets each retained (t, theta_t). Returns the final state."""
    if config.M > len(D):
        raise RangeError(f"M = {config.M} exceeds |D| = {len(D)}")
    state = make_teacher_state(teacher_spec, config, seed)

    def sink(t, theta):
        for s in sinks:
            s(t, theta)

    chain = ChainConfig(T=config.T, B=config.B, M=config.M, H=config.H)
    prior = PriorSpec(0.0, config.prior_precision)
    return run_chain(state, ClassifierLikelihood(teacher_spec), D, chain, prior, sink)


def make_distiller(teacher_spec, student_spec, target, config, D_prime, seed, probe=None, partition=None):
    rng = np.random.default_rng(seed)
    student = init_model(student_spec, rng)
    return Distiller(teacher_spec, student, target, config, D_prime, rng, probe, partition)


def finish(distiller):
    """Final probe record unless the last step was already recorded."""
    if distiller.probe is not None and (not distiller.history or distiller.history[-1]["distill_iter"] != distiller.s):
        distiller.record()


def run_gped(teacher_spec, student_spec, D, D_prime, target, config, seeds, probe=None, sinks=(), partition=None):
    """Full online run: SGLD every iteration, distillation every H-th after burn-in.

    ``seeds`` maps "teacher" and "student" to integers. Extra ``sinks`` receive
    every retained (t, theta), e.g. a sample dump or ensemble accumulator.
    """
    if config.M > len(D):
        raise RangeError(f"M = {config.M} exceeds |D| = {len(D)}")
    distiller = make_distiller(teacher_spec, student_spec, target, config, D_prime, seeds["student"], probe, partition)
    state = run_teacher(teacher_spec, D, config, seeds["teacher"], (distiller,) + tuple(sinks))
    finish(distiller)
    return GPEDResult(distiller.student, distiller.history, distiller, state)
