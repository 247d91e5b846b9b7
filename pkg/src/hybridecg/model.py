"""Declarative architecture specs, layer objects, and the assembled network.

A network is a flat list of layers. Each layer exposes ``params`` (trainable
arrays, updated in place by the optimiser), ``forward(x, mode, rng)`` returning
``(y, cache)`` and ``backward(cache, dy)`` returning ``(dx, grads)``.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels as K
from . import recurrent as R
from .errors import DimensionError, ValidationError

N_LEADS = 12
N_SAMPLES = 1000
N_CLASSES = 23


# ---------------------------------------------------------------- spec

@dataclass(frozen=True)
class ConvBlock:
    filters: int
    kernel: int
    pool: int = 2
    spatial_dropout: float = 0.0


@dataclass(frozen=True)
class RecurrentLayer:
    kind: str  # lstm | gru | bilstm
    hidden: int


@dataclass(frozen=True)
class HeadLayer:
    width: int
    dropout: float = 0.5


DEFAULT_CONV = (
    ConvBlock(64, 15, 2, 0.1),
    ConvBlock(128, 10, 2, 0.1),
    ConvBlock(256, 5, 2, 0.0),
)
DEFAULT_HEAD = (HeadLayer(512, 0.5), HeadLayer(256, 0.5))


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str = "custom"
    conv_blocks: tuple = DEFAULT_CONV
    recurrent_stack: tuple = ()
    gating_enabled: bool = True
    head: tuple = DEFAULT_HEAD
    num_classes: int = N_CLASSES
    in_channels: int = N_LEADS
    gating_reduction: int = 4
    inter_recurrent_dropout: float = 0.1

    def validate(self):
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if self.in_channels < 1:
            raise ValidationError("in_channels must be >= 1")
        for blk in self.conv_blocks:
            if blk.filters < 1 or blk.kernel < 1 or blk.pool < 1:
                raise ValidationError(f"invalid conv block {blk}")
            if not 0 <= blk.spatial_dropout < 1:
                raise ValidationError(f"invalid spatial dropout in {blk}")
        for layer in self.recurrent_stack:
            if layer.kind not in ("lstm", "gru", "bilstm"):
                raise ValidationError(f"unknown recurrent kind {layer.kind!r}")
            if layer.hidden < 1:
                raise ValidationError(f"invalid hidden width in {layer}")
        for h in self.head:
            if h.width < 1 or not 0 <= h.dropout < 1:
                raise ValidationError(f"invalid head layer {h}")
        if self.gating_reduction < 1:
            raise ValidationError("gating_reduction must be >= 1")
        if not 0 <= self.inter_recurrent_dropout < 1:
            raise ValidationError("inter_recurrent_dropout must lie in [0, 1)")
        return self

    def with_gating(self, enabled):
        d = self.to_dict()
        d["gating_enabled"] = enabled
        return ArchitectureSpec.from_dict(d)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            if "conv_blocks" in d:
                d["conv_blocks"] = tuple(ConvBlock(**_unlist(b, ConvBlock)) for b in d["conv_blocks"])
            if "recurrent_stack" in d:
                d["recurrent_stack"] = tuple(RecurrentLayer(**_unlist(b, RecurrentLayer))
                                             for b in d["recurrent_stack"])
            if "head" in d:
                d["head"] = tuple(HeadLayer(**_unlist(b, HeadLayer)) for b in d["head"])
            spec = cls(**d)
        except TypeError as exc:
            raise ValidationError(f"malformed architecture spec: {exc}") from exc
        return spec.validate()

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"architecture spec is not valid JSON: {exc}") from exc


def _unlist(item, klass):
    # accept both {"filters": 64, ...} and [64, 15, 2, 0.1]
    if isinstance(item, dict):
        return item
    names = list(klass.__dataclass_fields__)
    return dict(zip(names, item))


def presets():
    stacks = {
        "CNN": (),
        "LSTM": (RecurrentLayer("lstm", 128),),
        "BiLSTM": (RecurrentLayer("bilstm", 128),),
        "GRU": (RecurrentLayer("gru", 128),),
        "LSTM+BiLSTM": (RecurrentLayer("lstm", 128), RecurrentLayer("bilstm", 128)),
        "GRU+BiLSTM+LSTM": (RecurrentLayer("gru", 128), RecurrentLayer("bilstm", 128),
                            RecurrentLayer("lstm", 128)),
    }
    return {name: ArchitectureSpec(name=name, recurrent_stack=stack) for name, stack in stacks.items()}


def get_preset(name):
    table = presets()
    if name not in table:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(table)}")
    return table[name]


# ---------------------------------------------------------------- layers

def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    kind = "layer"
    stochastic = False

    def __init__(self, name):
        self.name = name
        self.params = {}
        self.state = {}

    def forward(self, x, mode, rng=None):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError

    def n_params(self):
        return sum(p.size for p in self.params.values())


class Conv1D(Layer):
    kind = "conv1d"
    input_grad = True

    def __init__(self, name, c_in, c_out, kernel, rng, dtype):
        super().__init__(name)
        self.params = {
            "weight": he_normal(rng, (kernel, c_in, c_out), kernel * c_in, dtype),
            "bias": np.zeros(c_out, dtype),
        }

    def forward(self, x, mode, rng=None):
        return K.conv1d_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, cache, dy):
        dx, dw, db = K.conv1d_backward(cache, dy, self.input_grad)
        return dx, {"weight": dw, "bias": db}


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name, channels, dtype, momentum=0.99, epsilon=1e-3):
        super().__init__(name)
        self.bn = K.BatchNormState.fresh(channels, dtype, momentum, epsilon)
        self.params = {"gamma": self.bn.gamma, "beta": self.bn.beta}
        self.state = {"running_mean": self.bn.running_mean, "running_var": self.bn.running_var}

    def forward(self, x, mode, rng=None):
        return K.batchnorm_forward(x, self.bn, mode)

    def backward(self, cache, dy):
        dx, dg, db = K.batchnorm_backward(cache, dy)
        return dx, {"gamma": dg, "beta": db}


class Activation(Layer):
    def __init__(self, name, fn):
        super().__init__(name)
        self.fn = fn
        self.kind = fn

    def forward(self, x, mode, rng=None):
        return K.activation_forward(x, self.fn)

    def backward(self, cache, dy):
        return K.activation_backward(cache, dy), {}


class MaxPool(Layer):
    kind = "maxpool1d"

    def __init__(self, name, pool):
        super().__init__(name)
        self.pool = pool

    def forward(self, x, mode, rng=None):
        return K.maxpool1d_forward(x, self.pool)

    def backward(self, cache, dy):
        return K.maxpool1d_backward(cache, dy), {}


class SpatialDropout(Layer):
    kind = "spatial_dropout"
    stochastic = True

    def __init__(self, name, rate):
        super().__init__(name)
        self.rate = rate
        self.frozen_mask = None

    def forward(self, x, mode, rng=None):
        return K.spatial_dropout_forward(x, self.rate, mode, rng, self.frozen_mask)

    def backward(self, cache, dy):
        return K.dropout_backward(cache, dy), {}


class Dropout(SpatialDropout):
    kind = "dropout"

    def forward(self, x, mode, rng=None):
        return K.dropout_forward(x, self.rate, mode, rng, self.frozen_mask)


class Recurrent(Layer):
    def __init__(self, name, kind, d_in, hidden, rng, dtype):
        super().__init__(name)
        self.kind = kind
        self.cell = R.RecurrentParams.initialise(kind, d_in, hidden, rng, dtype)
        self.params = self.cell.arrays()
        self.out_dim = hidden

    def forward(self, x, mode, rng=None):
        return R.run_sequence(x, self.cell)

    def backward(self, cache, dy):
        return R.bptt_backward(cache, dy)


class BiLSTM(Layer):
    kind = "bilstm"

    def __init__(self, name, d_in, hidden, rng, dtype):
        super().__init__(name)
        self.fwd = R.RecurrentParams.initialise("lstm", d_in, hidden, rng, dtype)
        self.bwd = R.RecurrentParams.initialise("lstm", d_in, hidden, rng, dtype)
        self.params = {f"fwd.{k}": v for k, v in self.fwd.arrays().items()}
        self.params.update({f"bwd.{k}": v for k, v in self.bwd.arrays().items()})
        self.out_dim = 2 * hidden

    def forward(self, x, mode, rng=None):
        return R.bidirectional_forward(x, self.fwd, self.bwd)

    def backward(self, cache, dy):
        dx, gf, gb = R.bidirectional_backward(cache, dy)
        grads = {f"fwd.{k}": v for k, v in gf.items()}
        grads.update({f"bwd.{k}": v for k, v in gb.items()})
        return dx, grads


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x, mode, rng=None):
        return K.gap_forward(x)

    def backward(self, cache, dy):
        return K.gap_backward(cache, dy), {}


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, d_in, d_out, rng, dtype):
        super().__init__(name)
        self.params = {"weight": he_normal(rng, (d_in, d_out), d_in, dtype),
                       "bias": np.zeros(d_out, dtype)}

    def forward(self, x, mode, rng=None):
        return K.dense_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, cache, dy):
        dx, dw, db = K.dense_backward(cache, dy)
        return dx, {"weight": dw, "bias": db}


# ---------------------------------------------------------------- gating

def gating_hidden(d, reduction=4):
    return max(math.ceil(d / reduction), 4)


@dataclass
class GatingModule:
    fc1_weight: np.ndarray
    fc1_bias: np.ndarray
    fc2_weight: np.ndarray
    fc2_bias: np.ndarray

    @property
    def reduction(self):
        return self.fc1_weight.shape[0] / self.fc1_weight.shape[1]


def apply_gating(pooled, gating):
    """``pooled * sigmoid(fc2(relu(fc1(pooled))))``; the gate has the input's shape."""
    a1, c1 = K.dense_forward(pooled, gating.fc1_weight, gating.fc1_bias)
    h, c2 = K.activation_forward(a1, "relu")
    a2, c3 = K.dense_forward(h, gating.fc2_weight, gating.fc2_bias)
    gate, c4 = K.activation_forward(a2, "sigmoid")
    return pooled * gate, K.Cache("gating", pooled=pooled, gate=gate, caches=(c1, c2, c3, c4))


def apply_gating_backward(cache, dy):
    """Returns ``(dx, grads)`` with grads keyed like the GatingModule fields."""
    s = cache.consume("gating")
    c1, c2, c3, c4 = s["caches"]
    dgate = dy * s["pooled"]
    da2 = K.activation_backward(c4, dgate)
    dh, dw2, db2 = K.dense_backward(c3, da2)
    da1 = K.activation_backward(c2, dh)
    dx_gate, dw1, db1 = K.dense_backward(c1, da1)
    grads = {"fc1_weight": dw1, "fc1_bias": db1, "fc2_weight": dw2, "fc2_bias": db2}
    return dy * s["gate"] + dx_gate, grads


class Gating(Layer):
    kind = "gating"

    def __init__(self, name, d, reduction, rng, dtype):
        super().__init__(name)
        hidden = gating_hidden(d, reduction)
        self.module = GatingModule(
            fc1_weight=he_normal(rng, (d, hidden), d, dtype),
            fc1_bias=np.zeros(hidden, dtype),
            fc2_weight=he_normal(rng, (hidden, d), hidden, dtype),
            fc2_bias=np.zeros(d, dtype),
        )
        self.params = dict(vars(self.module))

    def forward(self, x, mode, rng=None):
        return apply_gating(x, self.module)

    def backward(self, cache, dy):
        return apply_gating_backward(cache, dy)


# ---------------------------------------------------------------- model

class Model:
    def __init__(self, spec, layers, seed, dtype):
        self.spec = spec
        self.layers = layers
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.mode = "infer"

    # parameters -------------------------------------------------------

    def parameters(self):
        """Ordered ``{"layer.param": array}``; arrays are live views."""
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.params.items()}

    def state_arrays(self):
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.state.items()}

    def load_arrays(self, arrays):
        """Copy arrays into parameters/state in place (names must match)."""
        targets = {**self.parameters(), **self.state_arrays()}
        missing = set(targets) - set(arrays)
        extra = set(arrays) - set(targets)
        if missing or extra:
            raise ValidationError(f"array names do not match model: missing {sorted(missing)}, "
                                  f"unexpected {sorted(extra)}")
        for name, arr in arrays.items():
            if targets[name].shape != arr.shape:
                raise ValidationError(f"shape mismatch for {name}: {arr.shape} vs {targets[name].shape}")
            targets[name][...] = arr

    def snapshot(self):
        return {k: v.copy() for k, v in {**self.parameters(), **self.state_arrays()}.items()}

    def count_parameters(self):
        return count_parameters(self)[0]

    # passes -----------------------------------------------------------

    def forward(self, x, mode=None, rng=None):
        """Returns ``(probs, caches)``; probs has shape (B, num_classes)."""
        mode = mode or self.mode
        x = np.asarray(x)
        expected = (self.spec.in_channels,)
        if x.ndim != 3 or x.shape[2:] != expected:
            raise DimensionError(f"model input must be (B, T, {self.spec.in_channels}), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, mode, rng)
            caches.append(cache)
        return x, caches

    def predict(self, x, batch_size=64):
        out = [self.forward(x[i:i + batch_size], "infer")[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def backward(self, caches, dprobs=None, dlogits=None):
        """Backpropagate from the probabilities or, skipping the sigmoid, from the logits.

        Returns ``(grads, dx)``. ``dx`` is None when the first layer skips its input gradient.
        """
        if (dprobs is None) == (dlogits is None):
            raise ValueError("pass exactly one of dprobs / dlogits")
        grads = {}
        layers = self.layers
        if dlogits is not None:
            caches[-1].consume(caches[-1].kind)
            dy, layers, caches = dlogits, layers[:-1], caches[:-1]
        else:
            dy = dprobs
        for layer, cache in zip(reversed(layers), reversed(caches)):
            dy, g = layer.backward(cache, dy)
            for k, v in g.items():
                grads[f"{layer.name}.{k}"] = v
        return grads, dy

    def layer_shapes(self, t=N_SAMPLES):
        """Per-layer output shapes for a single (t, in_channels) input, batch axis dropped."""
        x = np.zeros((1, t, self.spec.in_channels), self.dtype)
        shapes = []
        for layer in self.layers:
            x, _ = layer.forward(x, "infer")
            shapes.append((layer.name, layer.kind, tuple(x.shape[1:])))
        return shapes


def build(spec, seed=0, dtype=np.float32):
    """Assemble a network from a spec with deterministic initialisation."""
    spec.validate()
    rng = np.random.default_rng(seed)
    layers = []
    c = spec.in_channels
    for n, blk in enumerate(spec.conv_blocks, 1):
        layers += [
            Conv1D(f"conv{n}", c, blk.filters, blk.kernel, rng, dtype),
            BatchNorm(f"conv{n}_bn", blk.filters, dtype),
            Activation(f"conv{n}_relu", "relu"),
            MaxPool(f"conv{n}_pool", blk.pool),
        ]
        if blk.spatial_dropout > 0:
            layers.append(SpatialDropout(f"conv{n}_sdrop", blk.spatial_dropout))
        c = blk.filters
    for n, rl in enumerate(spec.recurrent_stack, 1):
        if n > 1:
            layers.append(BatchNorm(f"rnn{n - 1}_bn", c, dtype))
            if spec.inter_recurrent_dropout > 0:
                layers.append(SpatialDropout(f"rnn{n - 1}_sdrop", spec.inter_recurrent_dropout))
        if rl.kind == "bilstm":
            layer = BiLSTM(f"rnn{n}_bilstm", c, rl.hidden, rng, dtype)
        else:
            layer = Recurrent(f"rnn{n}_{rl.kind}", rl.kind, c, rl.hidden, rng, dtype)
        layers.append(layer)
        c = layer.out_dim
    layers.append(GlobalAvgPool("gap"))
    if spec.gating_enabled:
        layers.append(Gating("gating", c, spec.gating_reduction, rng, dtype))
    for n, h in enumerate(spec.head, 1):
        layers += [
            Dense(f"dense{n}", c, h.width, rng, dtype),
            BatchNorm(f"dense{n}_bn", h.width, dtype),
            Activation(f"dense{n}_relu", "relu"),
        ]
        if h.dropout > 0:
            layers.append(Dropout(f"dense{n}_drop", h.dropout))
        c = h.width
    if layers and isinstance(layers[0], Conv1D):
        layers[0].input_grad = False
    layers += [Dense("output", c, spec.num_classes, rng, dtype), Activation("output_sigmoid", "sigmoid")]
    return Model(spec, layers, seed, dtype)


def count_parameters(model):
    """Total trainable parameter count and a per-layer breakdown ``[(name, kind, count)]``."""
    rows = [(l.name, l.kind, l.n_params()) for l in model.layers]
    return sum(r[2] for r in rows), rows


def recurrent_parameter_count(model):
    return sum(n for _, kind, n in count_parameters(model)[1] if kind in ("lstm", "gru", "bilstm"))
