"""Network descriptions, flat-parameter models, forward passes and serialization."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, FormatError, NumericError

HEAD_KINDS = ("softmax", "log_softmax", "exponential", "joint")
ACTIVATION_KINDS = ("relu",) + HEAD_KINDS
MODEL_FORMAT = "gped-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class MaxPool2D:
    kernel: int


@dataclass(frozen=True)
class Activation:
    """Elementwise activation or output head.

    ``joint`` applies softmax to all but the last column and ``exp`` to the
    last one (a predictive-distribution plus entropy head). ``temperature``
    divides the logits of an exponential head.
    """

    kind: str
    temperature: float = 1.0


@dataclass(frozen=True)
class Dropout:
    rate: float


LAYER_TYPES = {cls.__name__: cls for cls in (Dense, Conv2D, MaxPool2D, Activation, Dropout)}


def _out_shape(layer, shape, index):
    if isinstance(layer, Dense):
        flat = math.prod(shape)
        if flat != layer.in_features:
            raise DimensionError(
                f"Dense expects {layer.in_features} inputs, previous layer gives {flat}", index
            )
        return (layer.out_features,)
    if isinstance(layer, Conv2D):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise DimensionError(
                f"Conv2D expects ({layer.in_channels}, H, W) input, got {shape}", index
            )
        _, h, w = shape
        if h < layer.kernel or w < layer.kernel:
            raise DimensionError(f"kernel {layer.kernel} exceeds spatial size {(h, w)}", index)
        ho = (h - layer.kernel) // layer.stride + 1
        wo = (w - layer.kernel) // layer.stride + 1
        return (layer.out_channels, ho, wo)
    if isinstance(layer, MaxPool2D):
        if len(shape) != 3 or shape[1] < layer.kernel or shape[2] < layer.kernel:
            raise DimensionError(f"MaxPool2D({layer.kernel}) cannot pool shape {shape}", index)
        return (shape[0], shape[1] // layer.kernel, shape[2] // layer.kernel)
    if isinstance(layer, (Activation, Dropout)):
        return shape
    raise DimensionError(f"unknown layer {layer!r}", index)


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer sequence; the final layer must be a head activation."""

    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ContractError("network has no layers")
        heads = [
            i for i, l in enumerate(self.layers) if isinstance(l, Activation) and l.kind in HEAD_KINDS
        ]
        for i, l in enumerate(self.layers):
            if isinstance(l, Activation) and l.kind not in ACTIVATION_KINDS:
                raise ContractError(f"layer {i}: unknown activation {l.kind!r}")
            if isinstance(l, Dropout) and not 0.0 <= l.rate < 1.0:
                raise ContractError(f"layer {i}: dropout rate must lie in [0, 1)")
        if heads != [len(self.layers) - 1]:
            raise ContractError("exactly one head activation is required, as the final layer")
        self.shapes()

    def shapes(self):
        """Output shape (without batch axis) after every layer."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            shape = _out_shape(layer, shape, i)
            out.append(shape)
        return out

    @property
    def output_dim(self):
        return math.prod(self.shapes()[-1])

    @property
    def head(self):
        return self.layers[-1]

    def param_layers(self):
        """Indices of layers that own parameters."""
        return [i for i, l in enumerate(self.layers) if isinstance(l, (Dense, Conv2D))]

    def param_shapes(self):
        """(layer index, weight shape, bias shape) for each parametrized layer."""
        out = []
        for i in self.param_layers():
            l = self.layers[i]
            if isinstance(l, Dense):
                out.append((i, (l.out_features, l.in_features), (l.out_features,)))
            else:
                out.append((i, (l.out_channels, l.in_channels, l.kernel, l.kernel), (l.out_channels,)))
        return out

    def offsets(self):
        """{layer index: (weight slice, weight shape, bias slice, bias shape)} into the flat vector."""
        table = {}
        pos = 0
        for i, ws, bs in self.param_shapes():
            nw, nb = math.prod(ws), math.prod(bs)
            table[i] = (slice(pos, pos + nw), ws, slice(pos + nw, pos + nw + nb), bs)
            pos += nw + nb
        return table

    def num_params(self):
        return sum(math.prod(ws) + math.prod(bs) for _, ws, bs in self.param_shapes())

    def with_dropout(self, rate):
        """Copy with every Dropout layer's rate replaced (rate 0 removes them)."""
        layers = [l for l in self.layers if not isinstance(l, Dropout)] if rate == 0 else [
            Dropout(rate) if isinstance(l, Dropout) else l for l in self.layers
        ]
        return NetworkSpec(self.input_shape, tuple(layers))

    def with_head(self, head, output_dim=None):
        """Copy with the head activation (and optionally final layer width) replaced."""
        layers = list(self.layers[:-1])
        if output_dim is not None:
            last = max(i for i, l in enumerate(layers) if isinstance(l, (Dense, Conv2D)))
            if not isinstance(layers[last], Dense):
                raise ContractError("output width can only be changed on a Dense output layer")
            layers[last] = Dense(layers[last].in_features, output_dim)
        return NetworkSpec(self.input_shape, tuple(layers) + (head,))

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [{"type": type(l).__name__, **l.__dict__} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            kind = entry.pop("type")
            if kind not in LAYER_TYPES:
                raise FormatError(f"unknown layer type {kind!r}", field="layers")
            layers.append(LAYER_TYPES[kind](**entry))
        return cls(tuple(d["input_shape"]), tuple(layers))


def mlp(sizes, head="softmax", dropout=0.0):
    """Fully connected ReLU network, e.g. ``mlp([784, 400, 400, 10])``."""
    layers = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        if k < len(sizes) - 2:
            layers.append(Activation("relu"))
            if dropout > 0:
                layers.append(Dropout(dropout))
    layers.append(Activation(head) if isinstance(head, str) else head)
    return NetworkSpec((sizes[0],), tuple(layers))


def mnist_cnn(k1=1.0, k2=1.0, output_dim=10, head="softmax"):
    """Conv(10,4)-Pool(2)-Conv(20,4)-Pool(2)-FC(80)-FC(out), widths scaled by k1/k2."""
    c1, c2, f = int(10 * k1), int(20 * k1), int(80 * k2)
    layers = (
        Conv2D(1, c1, 4), Activation("relu"), MaxPool2D(2),
        Conv2D(c1, c2, 4), Activation("relu"), MaxPool2D(2),
        Dense(c2 * 4 * 4, f), Activation("relu"),
        Dense(f, output_dim), Activation(head) if isinstance(head, str) else head,
    )
    return NetworkSpec((1, 28, 28), layers)


def cifar_cnn(k1=1.0, k2=1.0, output_dim=10, head="softmax"):
    """Conv(16,5)-Pool-Conv(32,5)-Pool-FC(200)-FC(50)-FC(out) on 3x32x32 inputs."""
    c1, c2, f1, f2 = int(16 * k1), int(32 * k1), int(200 * k2), int(50 * k2)
    layers = (
        Conv2D(3, c1, 5), Activation("relu"), MaxPool2D(2),
        Conv2D(c1, c2, 5), Activation("relu"), MaxPool2D(2),
        Dense(c2 * 5 * 5, f1), Activation("relu"),
        Dense(f1, f2), Activation("relu"),
        Dense(f2, output_dim), Activation(head) if isinstance(head, str) else head,
    )
    return NetworkSpec((3, 32, 32), layers)


@dataclass
class Model:
    spec: NetworkSpec
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.ndim != 1 or self.params.size != self.spec.num_params():
            raise ContractError(
                f"parameter vector has {self.params.size} entries, spec needs {self.spec.num_params()}"
            )

    def layer_params(self, index):
        """(weight, bias) views for a parametrized layer."""
        ws, wshape, bs, bshape = self.spec.offsets()[index]
        return self.params[ws].reshape(wshape), self.params[bs].reshape(bshape)

    def copy(self):
        return replace(self, params=self.params.copy())


def init_model(spec, rng):
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    params = np.zeros(spec.num_params())
    for i, (ws, wshape, bs, bshape) in spec.offsets().items():
        fan_in = math.prod(wshape[1:])
        bound = math.sqrt(6.0 / fan_in)
        params[ws] = rng.uniform(-bound, bound, size=math.prod(wshape))
    return Model(spec, params)


def bind(model, tape):
    """Leaf tensors (weight, bias per layer, in flat order) viewing ``model.params``."""
    leaves = {}
    order = []
    for i, (ws, wshape, bs, bshape) in model.spec.offsets().items():
        w = tape.variable(model.params[ws].reshape(wshape))
        b = tape.variable(model.params[bs].reshape(bshape))
        leaves[i] = (w, b)
        order += [w, b]
    return leaves, order


def _apply_head(head, h):
    if head.kind == "softmax":
        return ad.softmax(h)
    if head.kind == "log_softmax":
        return ad.log_softmax(h)
    if head.kind == "exponential":
        if head.temperature != 1.0:
            h = ad.scale(h, 1.0 / head.temperature)
        return ad.texp(h)
    if head.kind == "joint":
        c = h.shape[1]
        return ad.concat([ad.softmax(ad.columns(h, 0, c - 1)), ad.texp(ad.columns(h, c - 1, c))])
    raise ContractError(f"unknown head {head.kind!r}")


def run_layers(model, x, leaves=None, train_mode=False, rng=None, pre_head=False):
    """Push ``x`` (Tensor) through the network; ``leaves`` from :func:`bind` enable recording."""
    spec = model.spec
    if tuple(x.shape[1:]) != spec.input_shape:
        raise DimensionError(
            f"batch has instance shape {tuple(x.shape[1:])}, network expects {spec.input_shape}", 0
        )
    h = x
    last = len(spec.layers) - 1
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, (Dense, Conv2D)):
            if leaves is not None:
                w, b = leaves[i]
            else:
                wd, bd = model.layer_params(i)
                w, b = ad.Tensor(wd), ad.Tensor(bd)
            if isinstance(layer, Dense):
                if h.data.ndim != 2:
                    h = ad.reshape(h, (h.shape[0], -1))
                h = ad.linear(h, w, b)
            else:
                h = ad.conv2d(h, w, b, layer.stride)
        elif isinstance(layer, MaxPool2D):
            h = ad.maxpool2d(h, layer.kernel)
        elif isinstance(layer, Dropout):
            if train_mode and layer.rate > 0:
                if rng is None:
                    raise ContractError("train-mode dropout needs an rng")
                h = ad.dropout(h, layer.rate, rng)
        elif isinstance(layer, Activation):
            if i == last:
                if pre_head:
                    return h
                h = _apply_head(layer, h)
            else:
                h = ad.relu(h)
    return h


def forward(model, batch, train_mode=False, rng=None, pre_head=False):
    """Head output per instance as an ndarray; dropout only active in train mode."""
    x = np.asarray(batch, dtype=np.float64)
    out = run_layers(model, ad.Tensor(x), None, train_mode, rng, pre_head).data
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite network output")
    return out


def grad_from_output(model, batch, loss_fn, train_mode=False, rng=None):
    """Parameter gradient for a loss computed outside the tape.

    ``loss_fn(head_output) -> (value, d value / d head_output)``. The output
    gradient is pushed back through a recorded forward pass. Returns
    (value, gradient vector, head output).
    """
    tape = ad.Tape()
    leaves, order = bind(model, tape)
    out = run_layers(model, ad.Tensor(np.asarray(batch, dtype=np.float64)), leaves, train_mode, rng)
    value, out_grad = loss_fn(out.data)
    if np.shape(out_grad) != out.shape:
        raise DimensionError(f"output gradient shape {np.shape(out_grad)} != output {out.shape}")
    grad = ad.backward(tape, ad.tsum(ad.mul(out, np.asarray(out_grad))), order)
    return value, grad, out.data


def loss_and_grad(model, batch, loss_fn, train_mode=False, rng=None, pre_head=False):
    """Evaluate ``loss_fn(output Tensor)`` on a fresh tape; returns (value, grad vector)."""
    tape = ad.Tape()
    leaves, order = bind(model, tape)
    out = run_layers(model, ad.Tensor(np.asarray(batch, dtype=np.float64)), leaves, train_mode, rng, pre_head)
    loss = loss_fn(out)
    value = float(loss.data)
    grad = ad.backward(tape, loss, order)
    return value, grad


# ---------------------------------------------------------------- serialization


def model_to_json(model, **extra):
    """JSON text with the spec and parameters written at 17 significant digits."""
    header = {"format": MODEL_FORMAT, "version": MODEL_VERSION, **model.spec.to_dict(), **extra}
    body = json.dumps(header, sort_keys=True)
    params = ",".join(format(float(v), ".17g") for v in model.params)
    return body[:-1] + f', "params": [{params}]}}'


def model_from_json(text):
    d = json.loads(text)
    if d.get("format") != MODEL_FORMAT:
        raise FormatError("not a gped model file", field="format")
    if d.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported model version {d.get('version')}", field="version")
    return Model(NetworkSpec.from_dict(d), np.array(d["params"], dtype=np.float64))


def save_model(model, path, **extra):
    with open(path, "w") as f:
        f.write(model_to_json(model, **extra))


def load_model(path):
    with open(path) as f:
        return model_from_json(f.read())
