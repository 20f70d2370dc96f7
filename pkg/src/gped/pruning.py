"""Group l1/l2 regularization, structural pruning and cost accounting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, PruneError
from .nn import Activation, Conv2D, Dense, Model, NetworkSpec

DEFAULT_THRESHOLD = 1e-3


@dataclass(frozen=True)
class GroupBlock:
    """Contiguous run of equally sized groups: the incoming weights of one layer's units."""

    layer: int
    kind: str  # fc_unit | conv_out_channel
    start: int
    n_groups: int
    size: int


@dataclass(frozen=True)
class GroupPartition:
    blocks: tuple

    @property
    def groups(self):
        """Flat index array of every group, in layer then unit order."""
        return [
            np.arange(b.start + k * b.size, b.start + (k + 1) * b.size)
            for b in self.blocks
            for k in range(b.n_groups)
        ]

    def owners(self):
        """(layer, kind, unit id) for every group, aligned with :attr:`groups`."""
        return [(b.layer, b.kind, k) for b in self.blocks for k in range(b.n_groups)]

    def __len__(self):
        return sum(b.n_groups for b in self.blocks)


@dataclass(frozen=True)
class PruneConfig:
    lam: float = 0.0
    eps: float = DEFAULT_THRESHOLD
    scaled: bool = False
    fine_tune_epochs: int = 0

    def __post_init__(self):
        if self.eps <= 0:
            raise ContractError("pruning threshold must be positive")
        if self.lam < 0:
            raise ContractError("regularization strength must be >= 0")


def build_groups(spec):
    """One group per hidden Dense unit (its weight row) and per conv output channel.

    The final parametrized layer produces the outputs and is never grouped;
    biases are never grouped.
    """
    offsets = spec.offsets()
    layers = spec.param_layers()
    if not layers:
        raise ContractError("network has no Dense or Conv2D layer")
    blocks = []
    for i in layers[:-1]:
        ws, wshape, _, _ = offsets[i]
        kind = "fc_unit" if isinstance(spec.layers[i], Dense) else "conv_out_channel"
        blocks.append(GroupBlock(i, kind, ws.start, wshape[0], math.prod(wshape[1:])))
    return GroupPartition(tuple(blocks))


def group_norms(params, partition):
    return [np.linalg.norm(params[b.start : b.start + b.n_groups * b.size].reshape(b.n_groups, b.size), axis=1)
            for b in partition.blocks]


def group_reg(params, partition, scaled=False):
    """sum_k c_k ||phi_{G_k}||_2 and its subgradient (zero on groups with norm < 1e-12).

    ``scaled`` sets c_k = sqrt(|G_k|); otherwise c_k = 1.
    """
    params = np.asarray(params, dtype=np.float64)
    value = 0.0
    grad = np.zeros_like(params)
    for b in partition.blocks:
        sl = slice(b.start, b.start + b.n_groups * b.size)
        w = params[sl].reshape(b.n_groups, b.size)
        norms = np.linalg.norm(w, axis=1)
        c = math.sqrt(b.size) if scaled else 1.0
        value += c * norms.sum()
        live = norms >= 1e-12
        g = np.zeros_like(w)
        g[live] = c * w[live] / norms[live, None]
        grad[sl] = g.ravel()
    return value, grad


def lambda_grid(lo=1e-8, hi=1e-3, num=6):
    """Log-spaced regularization strengths."""
    return list(np.logspace(math.log10(lo), math.log10(hi), num))


# ---------------------------------------------------------------- costs


def count_params(spec):
    return spec.num_params()


def count_flops(spec):
    """Dense: 2*in*out + out. Conv2D: 2*in*out*k^2*Ho*Wo + out*Ho*Wo. Pool/activations free."""
    total = 0
    for layer, shape in zip(spec.layers, spec.shapes()):
        if isinstance(layer, Dense):
            total += 2 * layer.in_features * layer.out_features + layer.out_features
        elif isinstance(layer, Conv2D):
            _, ho, wo = shape
            total += 2 * layer.in_channels * layer.out_channels * layer.kernel**2 * ho * wo
            total += layer.out_channels * ho * wo
    return total


# ---------------------------------------------------------------- pruning


def _between(spec, i, j):
    """Layers strictly between parametrized layers i and j."""
    return spec.layers[i + 1 : j]


def _const_through(layers, value):
    """Push a constant unit output through whatever separates two layers (pooling and dropout keep it)."""
    for l in layers:
        if isinstance(l, Activation) and l.kind == "relu":
            value = max(value, 0.0)
    return value


def _prune_once(model, partition, eps):
    spec = model.spec
    param_layers = spec.param_layers()
    shapes = spec.shapes()
    weights = {i: [a.copy() for a in model.layer_params(i)] for i in param_layers}
    removed = {}
    for b in partition.blocks:
        w, _ = weights[b.layer]
        dead = np.flatnonzero(np.all(np.abs(w.reshape(b.n_groups, -1)) < eps, axis=1))
        if len(dead):
            removed[b.layer] = dead
    if not removed:
        return model, []
    entries = []
    for i in param_layers:
        if i not in removed:
            continue
        dead = removed[i]
        w, b = weights[i]
        if len(dead) == w.shape[0]:
            raise PruneError(f"pruning would remove every unit of layer {i}")
        j = param_layers[param_layers.index(i) + 1]
        wn, bn = weights[j]
        consts = np.array([_const_through(_between(spec, i, j), float(b[k])) for k in dead])
        if isinstance(spec.layers[j], Dense) and isinstance(spec.layers[i], Conv2D):
            # flattened (channel, h, w) input of the next dense layer
            per = math.prod(shapes[j - 1][1:]) if len(shapes[j - 1]) == 3 else 1
            cols = (dead[:, None] * per + np.arange(per)).ravel()
            bn += (wn[:, cols].reshape(wn.shape[0], len(dead), per) * consts[None, :, None]).sum(axis=(1, 2))
            wn = np.delete(wn, cols, axis=1)
        elif isinstance(spec.layers[j], Dense):
            bn += wn[:, dead] @ consts
            wn = np.delete(wn, dead, axis=1)
        else:
            bn += np.einsum("ockl,c->o", wn[:, dead], consts)
            wn = np.delete(wn, dead, axis=1)
        weights[j] = [wn, bn]
        entries.append(
            {"layer": i, "removed_units": [int(k) for k in dead], "dropped_bias_abs": [abs(float(b[k])) for k in dead]}
        )
        weights[i] = [np.delete(w, dead, axis=0), np.delete(b, dead)]
    layers = []
    for i, l in enumerate(spec.layers):
        if isinstance(l, Dense):
            wi = weights[i][0]
            layers.append(Dense(wi.shape[1], wi.shape[0]))
        elif isinstance(l, Conv2D):
            wi = weights[i][0]
            layers.append(Conv2D(wi.shape[1], wi.shape[0], l.kernel, l.stride))
        else:
            layers.append(l)
    new_spec = NetworkSpec(spec.input_shape, tuple(layers))
    params = np.concatenate([np.concatenate([weights[i][0].ravel(), weights[i][1].ravel()]) for i in param_layers])
    return Model(new_spec, params), entries


def prune(model, partition=None, eps=DEFAULT_THRESHOLD):
    """Remove every unit/channel whose incoming weights all have magnitude < eps.

    The removed unit's constant output (its bias through the following
    activation) is folded into the next layer's bias, so a unit with exactly
    zero incoming weights is removed without changing the network function.
    Repeats until nothing more falls below threshold. Returns (model, report).
    """
    before = model.spec
    entries = []
    current = model
    try:
        while True:
            part = build_groups(current.spec) if partition is None or current is not model else partition
            current, found = _prune_once(current, part, eps)
            if not found:
                break
            entries.extend(found)
    except PruneError as err:
        err.report = make_report(before, current.spec, entries)
        raise
    return current, make_report(before, current.spec, entries)


def make_report(before, after, entries):
    return {
        "layers": entries,
        "params_before": count_params(before),
        "params_after": count_params(after),
        "flops_before": count_flops(before),
        "flops_after": count_flops(after),
    }


def report_to_json(report):
    return json.dumps(report, indent=2, sort_keys=True)


def pruned_group_count(report):
    return sum(len(e["removed_units"]) for e in report["layers"])


def default_restart_lr(spec):
    """1e-3 for networks with convolutions, 1e-4 for fully connected ones."""
    return 1e-3 if any(isinstance(l, Conv2D) for l in spec.layers) else 1e-4


def fine_tune(model, distiller, epochs, restart_lr=None):
    """Continue distillation on ``model`` for ``epochs`` passes over D', no regularizer."""
    if epochs <= 0:
        return model
    lr = default_restart_lr(model.spec) if restart_lr is None else restart_lr
    steps = epochs * math.ceil(len(distiller.D_prime) / distiller.config.M_prime)
    return distiller.train_on_table(steps, lr, model=model)
