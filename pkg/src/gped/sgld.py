"""Stochastic gradient Langevin dynamics over flat teacher parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .data import minibatch
from .errors import ContractError, NumericError, RangeError
from .nn import Model, bind, model_to_json, run_layers


@dataclass(frozen=True)
class PriorSpec:
    """Spherical Gaussian prior N(mean, 1/precision)."""

    mean: float = 0.0
    precision: float = 10.0

    def __post_init__(self):
        if self.precision < 0:
            raise ContractError("prior precision must be nonnegative")


@dataclass(frozen=True)
class StepSchedule:
    """Step size eta_t: constant, or ``base_rate * (1 + t / decay_steps) ** -gamma``."""

    base_rate: float
    kind: str = "constant"
    decay_steps: float = 1.0
    gamma: float = 0.55

    def __post_init__(self):
        if self.kind not in ("constant", "polynomial"):
            raise ContractError(f"unknown schedule kind {self.kind!r}")
        if self.base_rate <= 0:
            raise ContractError("step size must be positive")

    def __call__(self, t):
        if self.kind == "constant":
            return self.base_rate
        return self.base_rate * (1.0 + t / self.decay_steps) ** (-self.gamma)


@dataclass
class SamplerState:
    theta: np.ndarray
    t: int
    rng: np.random.Generator
    schedule: StepSchedule


def log_prior_grad(theta, prior):
    return -prior.precision * (np.asarray(theta) - prior.mean)


class ClassifierLikelihood:
    """log p(y | x, theta) for a network whose head is a softmax over classes."""

    def __init__(self, spec):
        self.spec = spec

    def grad_log_lik(self, theta, features, labels):
        """Sum over the batch of grad_theta log p(y_i | x_i, theta)."""
        model = Model(self.spec, theta)
        x = np.asarray(features, dtype=np.float64).reshape((len(features),) + self.spec.input_shape)
        tape = ad.Tape()
        leaves, order = bind(model, tape)
        logits = run_layers(model, ad.Tensor(x), leaves, pre_head=True)
        onehot = np.zeros(logits.shape)
        onehot[np.arange(len(labels)), labels] = 1.0
        loglik = ad.tsum(ad.mul(ad.log_softmax(logits), onehot))
        return ad.backward(tape, loglik, order)


class GaussianMeanLikelihood:
    """x_i ~ N(theta, sigma^2) with a one-dimensional theta; conjugate test model."""

    def __init__(self, sigma=1.0):
        self.sigma = sigma

    def grad_log_lik(self, theta, features, labels=None):
        x = np.asarray(features, dtype=np.float64).reshape(-1)
        return np.array([np.sum(x - theta[0]) / self.sigma**2])

    def posterior(self, data, prior):
        """Closed-form (mean, variance) of theta given all observations."""
        x = np.asarray(data, dtype=np.float64).reshape(-1)
        precision = prior.precision + len(x) / self.sigma**2
        mean = (prior.precision * prior.mean + x.sum() / self.sigma**2) / precision
        return mean, 1.0 / precision


def sgld_step(state, model, batch, N, M, prior, noise=True):
    """theta <- theta + eta/2 (grad log prior + N/M sum grad log lik) + N(0, eta I).

    ``batch`` is (features, labels) of size M; ``model`` is any likelihood with
    a ``grad_log_lik(theta, features, labels)`` method.
    """
    features, labels = batch
    eta = state.schedule(state.t)
    g = model.grad_log_lik(state.theta, features, labels)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite log-likelihood gradient", iteration=state.t)
    total = log_prior_grad(state.theta, prior) + (N / M) * g
    theta = state.theta + (eta / 2.0) * total
    if noise:
        theta = theta + state.rng.normal(0.0, np.sqrt(eta), size=theta.shape)
    if not np.all(np.isfinite(theta)):
        raise NumericError("non-finite parameters after SGLD step", iteration=state.t)
    return replace(state, theta=theta, t=state.t + 1)


@dataclass(frozen=True)
class ChainConfig:
    T: int
    B: int = 0
    M: int = 32
    H: int = 1
    noise: bool = True

    def __post_init__(self):
        if not self.T >= self.B >= 0:
            raise ContractError(f"need T >= B >= 0, got T={self.T}, B={self.B}")
        if self.H < 1:
            raise ContractError("thinning interval H must be >= 1")

    def keep(self, t):
        return t % self.H == 0 and t > self.B


def run_chain(state, model, dataset, config, prior, sink=None, keep=None):
    """Run iterations t = 0..T; ``sink(t, theta_t)`` fires where ``keep(t)`` holds.

    ``keep`` defaults to ``config.keep`` (every H-th iteration after burn-in B).
    The sink sees the parameters before that iteration's update.
    """
    if config.M > len(dataset):
        raise RangeError(f"minibatch size {config.M} exceeds dataset size {len(dataset)}")
    keep = keep or config.keep
    N = len(dataset)
    for t in range(state.t, config.T + 1):
        _, x, y = minibatch(dataset, config.M, state.rng)
        theta_t = state.theta
        state = sgld_step(state, model, (x, y), N, config.M, prior, noise=config.noise)
        if sink is not None and keep(t):
            sink(t, theta_t)
    return state


class SampleDump:
    """Sink appending retained theta_t as model-JSON lines.

    ``every`` keeps one of every that many retained samples; ``extra`` keys are
    written into each line.
    """

    def __init__(self, path, spec, every=1, **extra):
        self.spec = spec
        self.every = every
        self.extra = extra
        self.file = open(path, "w")
        self.seen = 0
        self.count = 0

    def __call__(self, t, theta):
        if self.seen % self.every == 0:
            self.file.write(model_to_json(Model(self.spec, theta), t=int(t), **self.extra) + "\n")
            self.count += 1
        self.seen += 1

    def close(self):
        self.file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def load_samples(path):
    """Models from a :class:`SampleDump` file, in chain order."""
    from .nn import model_from_json

    with open(path) as f:
        return [model_from_json(line) for line in f if line.strip()]
