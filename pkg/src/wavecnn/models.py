"""Declarative construction of the network family and its ablation variants.

Each network takes a [batch, time, 1] waveform, opens with one wide-field
strided convolution, alternates small-field conv stacks with maxpool-4
downsampling, and closes with global average pooling into a softmax head.
The '-res' column swaps conv stacks for residual blocks. Variants:

  -srf / -lrf   first-layer receptive field 8 / 320 (base uses 80)
  -big          every conv widened by 50% (m3-big) or 100% (m5-big)
  -fc           two 1000-wide fully connected layers (BN + dropout 0.3)
                between global average pooling and the softmax head
  -no-bn        batch normalization removed, conv biases enabled
  m11-stride1   first convolution with stride 1 instead of 4

All weights are Glorot-uniform initialized; conv fans are
(rf * in_ch, rf * out_ch). Layers followed by BN carry no bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import ops
from .tensor import RandomSource, TRAIN_DTYPE, check_shape

FC_WIDTH = 1000
FC_DROPOUT = 0.3
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | maxpool4 | resblock_group | global_avg_pool | dense_softmax | fc_block
    rf: int = 0
    stride: int = 1
    out_channels: int = 0
    repeat: int = 1
    with_bn: bool = True


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    layers: tuple
    num_classes: int
    weight_layers: int


def _conv(rf, stride, ch, repeat=1, bn=True):
    return LayerSpec("conv", rf=rf, stride=stride, out_channels=ch, repeat=repeat, with_bn=bn)


def _res(ch, repeat, bn=True):
    return LayerSpec("resblock_group", rf=3, out_channels=ch, repeat=repeat, with_bn=bn)


_POOL = LayerSpec("maxpool4")

# Body of each base column: (first-conv channels, then the conv/pool spine).
# The closing global-average-pool and softmax head are appended at build time.
_BASE_BODY = {
    "m3": lambda c: [_conv(80, 4, c(256)), _POOL, _conv(3, 1, c(256)), _POOL],
    "m5": lambda c: [
        _conv(80, 4, c(128)), _POOL,
        _conv(3, 1, c(128)), _POOL,
        _conv(3, 1, c(256)), _POOL,
        _conv(3, 1, c(512)), _POOL,
    ],
    "m11": lambda c: [
        _conv(80, 4, c(64)), _POOL,
        _conv(3, 1, c(64), 2), _POOL,
        _conv(3, 1, c(128), 2), _POOL,
        _conv(3, 1, c(256), 3), _POOL,
        _conv(3, 1, c(512), 2),
    ],
    "m18": lambda c: [
        _conv(80, 4, c(64)), _POOL,
        _conv(3, 1, c(64), 4), _POOL,
        _conv(3, 1, c(128), 4), _POOL,
        _conv(3, 1, c(256), 4), _POOL,
        _conv(3, 1, c(512), 4),
    ],
    "m34-res": lambda c: [
        _conv(80, 4, c(48)), _POOL,
        _res(c(48), 3), _POOL,
        _res(c(96), 4), _POOL,
        _res(c(192), 6), _POOL,
        _res(c(384), 3),
    ],
}

_BIG_FACTOR = {"m3": 1.5, "m5": 2.0}
_FC_BASES = ("m3", "m5", "m11", "m18")
_RF_VARIANT = {"srf": 8, "lrf": 320}


def valid_architectures() -> list:
    names = list(_BASE_BODY)
    names += [f"{b}-big" for b in _BIG_FACTOR]
    names += [f"{b}-{s}" for b in ("m11", "m18") for s in _RF_VARIANT]
    names += [f"{b}-fc" for b in _FC_BASES]
    names += ["m3-no-bn", "m5-no-bn", "m11-no-bn", "m18-no-bn", "m34-no-bn"]
    names += ["m11-stride1"]
    return sorted(names)


def architecture(name: str, num_classes: int = 10, channel_scale: float = 1.0) -> ArchitectureSpec:
    """Resolve an architecture name into its layer list.

    channel_scale shrinks every conv/res width uniformly (used for the
    reduced-width smoke and trainability harnesses); 1.0 is the published
    width.
    """
    base, variant = name, None
    if name == "m34-no-bn":
        base, variant = "m34-res", "no-bn"
    elif name == "m11-stride1":
        base, variant = "m11", "stride1"
    elif name.endswith("-no-bn"):
        base, variant = name[: -len("-no-bn")], "no-bn"
    elif "-" in name and name != "m34-res":
        base, variant = name.rsplit("-", 1)

    factor = channel_scale
    if variant == "big":
        if base not in _BIG_FACTOR:
            raise ValueError(f"unknown architecture {name!r}; valid: {valid_architectures()}")
        factor *= _BIG_FACTOR[base]

    if base not in _BASE_BODY or (variant == "fc" and base not in _FC_BASES):
        raise ValueError(f"unknown architecture {name!r}; valid: {valid_architectures()}")
    if variant in _RF_VARIANT and base not in ("m11", "m18"):
        raise ValueError(f"unknown architecture {name!r}; valid: {valid_architectures()}")
    if variant not in (None, "big", "fc", "no-bn", "stride1", "srf", "lrf"):
        raise ValueError(f"unknown architecture {name!r}; valid: {valid_architectures()}")

    def ch(n: int) -> int:
        return max(1, int(round(n * factor)))

    layers = list(_BASE_BODY[base](ch))
    if variant in _RF_VARIANT:
        first = layers[0]
        layers[0] = _conv(_RF_VARIANT[variant], first.stride, first.out_channels)
    if variant == "stride1":
        first = layers[0]
        layers[0] = _conv(first.rf, 1, first.out_channels)
    if variant == "no-bn":
        layers = [
            LayerSpec(l.kind, l.rf, l.stride, l.out_channels, l.repeat, with_bn=False)
            for l in layers
        ]
    layers.append(LayerSpec("global_avg_pool"))
    if variant == "fc":
        layers.append(LayerSpec("fc_block", out_channels=FC_WIDTH, repeat=2))
    layers.append(LayerSpec("dense_softmax", out_channels=num_classes))

    weight_layers = 0
    for l in layers:
        if l.kind == "conv":
            weight_layers += l.repeat
        elif l.kind == "resblock_group":
            weight_layers += 2 * l.repeat
        elif l.kind in ("fc_block", "dense_softmax"):
            weight_layers += l.repeat
    return ArchitectureSpec(name, tuple(layers), num_classes, weight_layers)


class ForwardResult(NamedTuple):
    probs: np.ndarray
    logits: np.ndarray
    tape: ops.OpTape | None


def _glorot(rng: RandomSource, shape, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape, dtype=dtype)


class _ConvUnit:
    def __init__(self, idx, rf, stride, out_ch, with_bn):
        self.idx, self.rf, self.stride = idx, rf, stride
        self.out_ch, self.with_bn = out_ch, with_bn
        self.label = f"conv{idx}"

    def build(self, in_ch, rng, graph):
        k = f"conv{self.idx}"
        graph.params[f"{k}.kernel"] = _glorot(
            rng, (self.rf, in_ch, self.out_ch),
            self.rf * in_ch, self.rf * self.out_ch, graph.dtype,
        )
        if self.with_bn:
            graph.params[f"{k}.bn.gamma"] = np.ones(self.out_ch, dtype=graph.dtype)
            graph.params[f"{k}.bn.beta"] = np.zeros(self.out_ch, dtype=graph.dtype)
            graph.state[f"{k}.bn.running_mean"] = np.zeros(self.out_ch, dtype=graph.dtype)
            graph.state[f"{k}.bn.running_var"] = np.ones(self.out_ch, dtype=graph.dtype)
        else:
            graph.params[f"{k}.bias"] = np.zeros(self.out_ch, dtype=graph.dtype)
        return self.out_ch

    def _conv_params(self, graph):
        k = f"conv{self.idx}"
        return ops.ConvParams(
            kernel=graph.params[f"{k}.kernel"],
            bias=None if self.with_bn else graph.params[f"{k}.bias"],
            stride=self.stride,
        )

    def _bn_state(self, graph):
        k = f"conv{self.idx}"
        return ops.BatchNormState(
            gamma=graph.params[f"{k}.bn.gamma"],
            beta=graph.params[f"{k}.bn.beta"],
            running_mean=graph.state[f"{k}.bn.running_mean"],
            running_var=graph.state[f"{k}.bn.running_var"],
            momentum=BN_MOMENTUM,
            eps=BN_EPS,
        )

    def forward(self, x, graph, mode, tape, rng):
        k = f"conv{self.idx}"
        y, cache = ops.conv1d_forward(x, self._conv_params(graph))
        if tape is not None:
            def conv_back(g, grads, cache=cache, k=k, with_bn=self.with_bn):
                gx, gk, gb = ops.conv1d_backward(g, cache)
                ops.accumulate_grad(grads, f"{k}.kernel", gk)
                if not with_bn:
                    ops.accumulate_grad(grads, f"{k}.bias", gb)
                return gx
            tape.record(conv_back)
        if self.with_bn:
            y, bcache = ops.batchnorm_forward(y, self._bn_state(graph), mode)
            if tape is not None:
                def bn_back(g, grads, bcache=bcache, k=k):
                    gx, gg, gb = ops.batchnorm_backward(g, bcache)
                    ops.accumulate_grad(grads, f"{k}.bn.gamma", gg)
                    ops.accumulate_grad(grads, f"{k}.bn.beta", gb)
                    return gx
                tape.record(bn_back)
        y, mask = ops.relu_forward(y)
        if tape is not None:
            tape.record(lambda g, grads, mask=mask: ops.relu_backward(g, mask))
        return y

    def trace(self, T, C):
        return -(-T // self.stride), self.out_ch

    def param_names(self):
        k = f"conv{self.idx}"
        names = [f"{k}.kernel"]
        names += [f"{k}.bn.gamma", f"{k}.bn.beta"] if self.with_bn else [f"{k}.bias"]
        return names

    weight_layers = 1


class _ResBlockUnit:
    """Two stride-1 convs with a zero-pad shortcut; conv indices i, i+1."""

    def __init__(self, idx, out_ch, with_bn):
        self.idx, self.out_ch, self.with_bn = idx, out_ch, with_bn
        self.label = f"resblock[conv{idx}-conv{idx + 1}]"
        self._convs = None

    def build(self, in_ch, rng, graph):
        self._convs = (
            _ConvUnit(self.idx, 3, 1, self.out_ch, self.with_bn),
            _ConvUnit(self.idx + 1, 3, 1, self.out_ch, self.with_bn),
        )
        if self.out_ch < in_ch:
            raise ValueError(f"residual block cannot shrink channels {in_ch} -> {self.out_ch}")
        for c in self._convs:
            in_ch = c.build(in_ch, rng, graph)
        return self.out_ch

    def forward(self, x, graph, mode, tape, rng):
        c1, c2 = self._convs
        bn1 = c1._bn_state(graph) if self.with_bn else None
        bn2 = c2._bn_state(graph) if self.with_bn else None
        y, cache = ops.residual_block_forward(
            x, c1._conv_params(graph), bn1, c2._conv_params(graph), bn2, mode
        )
        if tape is not None:
            k1, k2 = f"conv{self.idx}", f"conv{self.idx + 1}"
            def block_back(g, grads, cache=cache, k1=k1, k2=k2, with_bn=self.with_bn):
                (gx, gk1, gb1, gg1, gbeta1, gk2, gb2, gg2, gbeta2) = (
                    ops.residual_block_backward(g, cache)
                )
                ops.accumulate_grad(grads, f"{k1}.kernel", gk1)
                ops.accumulate_grad(grads, f"{k2}.kernel", gk2)
                if with_bn:
                    ops.accumulate_grad(grads, f"{k1}.bn.gamma", gg1)
                    ops.accumulate_grad(grads, f"{k1}.bn.beta", gbeta1)
                    ops.accumulate_grad(grads, f"{k2}.bn.gamma", gg2)
                    ops.accumulate_grad(grads, f"{k2}.bn.beta", gbeta2)
                else:
                    ops.accumulate_grad(grads, f"{k1}.bias", gb1)
                    ops.accumulate_grad(grads, f"{k2}.bias", gb2)
                return gx
            tape.record(block_back)
        return y

    def trace(self, T, C):
        return T, self.out_ch

    def param_names(self):
        return self._convs[0].param_names() + self._convs[1].param_names()

    weight_layers = 2


class _MaxPoolUnit:
    def __init__(self, idx):
        self.label = f"maxpool{idx}"

    def build(self, in_ch, rng, graph):
        return in_ch

    def forward(self, x, graph, mode, tape, rng):
        y, cache = ops.maxpool1d_forward(x, window=4)
        if tape is not None:
            tape.record(lambda g, grads, cache=cache: ops.maxpool1d_backward(g, cache))
        return y

    def trace(self, T, C):
        return -(-T // 4), C

    def param_names(self):
        return []

    weight_layers = 0


class _GlobalAvgPoolUnit:
    label = "global_avg_pool"

    def build(self, in_ch, rng, graph):
        return in_ch

    def forward(self, x, graph, mode, tape, rng):
        y, T = ops.global_avg_pool(x)
        out = y[:, 0, :]  # flatten [B,1,C] -> [B,C] for the head
        if tape is not None:
            def gap_back(g, grads, T=T):
                return ops.global_avg_pool_backward(g[:, None, :], T)
            tape.record(gap_back)
        return out

    def trace(self, T, C):
        return 1, C

    def param_names(self):
        return []

    weight_layers = 0


class _FCUnit:
    """Fully connected layer with BN, ReLU, and inverted dropout."""

    def __init__(self, idx, width, rate=FC_DROPOUT):
        self.idx, self.width, self.rate = idx, width, rate
        self.label = f"fc{idx}"

    def build(self, in_ch, rng, graph):
        k = f"fc{self.idx}"
        graph.params[f"{k}.w"] = _glorot(rng, (in_ch, self.width), in_ch, self.width, graph.dtype)
        graph.params[f"{k}.bn.gamma"] = np.ones(self.width, dtype=graph.dtype)
        graph.params[f"{k}.bn.beta"] = np.zeros(self.width, dtype=graph.dtype)
        graph.state[f"{k}.bn.running_mean"] = np.zeros(self.width, dtype=graph.dtype)
        graph.state[f"{k}.bn.running_var"] = np.ones(self.width, dtype=graph.dtype)
        return self.width

    def forward(self, x, graph, mode, tape, rng):
        k = f"fc{self.idx}"
        y, cache = ops.affine_forward(x, graph.params[f"{k}.w"])
        if tape is not None:
            def fc_back(g, grads, cache=cache, k=k):
                gx, gw, _ = ops.affine_backward(g, cache)
                ops.accumulate_grad(grads, f"{k}.w", gw)
                return gx
            tape.record(fc_back)
        s = ops.BatchNormState(
            gamma=graph.params[f"{k}.bn.gamma"],
            beta=graph.params[f"{k}.bn.beta"],
            running_mean=graph.state[f"{k}.bn.running_mean"],
            running_var=graph.state[f"{k}.bn.running_var"],
            momentum=BN_MOMENTUM,
            eps=BN_EPS,
        )
        y, bcache = ops.batchnorm_forward(y, s, mode)
        if tape is not None:
            def fc_bn_back(g, grads, bcache=bcache, k=k):
                gx, gg, gb = ops.batchnorm_backward(g, bcache)
                ops.accumulate_grad(grads, f"{k}.bn.gamma", gg)
                ops.accumulate_grad(grads, f"{k}.bn.beta", gb)
                return gx
            tape.record(fc_bn_back)
        y, mask = ops.relu_forward(y)
        if tape is not None:
            tape.record(lambda g, grads, mask=mask: ops.relu_backward(g, mask))
        y, dcache = ops.dropout(y, self.rate, mode, rng)
        if tape is not None:
            tape.record(lambda g, grads, dcache=dcache: ops.dropout_backward(g, dcache))
        return y

    def trace(self, T, C):
        return 1, self.width

    def param_names(self):
        k = f"fc{self.idx}"
        return [f"{k}.w", f"{k}.bn.gamma", f"{k}.bn.beta"]

    weight_layers = 1


class _DenseUnit:
    label = "dense"

    def __init__(self, num_classes):
        self.num_classes = num_classes

    def build(self, in_ch, rng, graph):
        graph.params["dense.w"] = _glorot(
            rng, (in_ch, self.num_classes), in_ch, self.num_classes, graph.dtype
        )
        graph.params["dense.b"] = np.zeros(self.num_classes, dtype=graph.dtype)
        return self.num_classes

    def forward(self, x, graph, mode, tape, rng):
        y, cache = ops.affine_forward(x, graph.params["dense.w"], graph.params["dense.b"])
        if tape is not None:
            def dense_back(g, grads, cache=cache):
                gx, gw, gb = ops.affine_backward(g, cache)
                ops.accumulate_grad(grads, "dense.w", gw)
                ops.accumulate_grad(grads, "dense.b", gb)
                return gx
            tape.record(dense_back)
        return y

    def trace(self, T, C):
        return 1, self.num_classes

    def param_names(self):
        return ["dense.w", "dense.b"]

    weight_layers = 1


def _compile_units(spec: ArchitectureSpec):
    units, conv_idx, pool_idx, fc_idx = [], 1, 1, 1
    for l in spec.layers:
        if l.kind == "conv":
            for _ in range(l.repeat):
                units.append(_ConvUnit(conv_idx, l.rf, l.stride, l.out_channels, l.with_bn))
                conv_idx += 1
        elif l.kind == "resblock_group":
            for _ in range(l.repeat):
                units.append(_ResBlockUnit(conv_idx, l.out_channels, l.with_bn))
                conv_idx += 2
        elif l.kind == "maxpool4":
            units.append(_MaxPoolUnit(pool_idx))
            pool_idx += 1
        elif l.kind == "global_avg_pool":
            units.append(_GlobalAvgPoolUnit())
        elif l.kind == "fc_block":
            for _ in range(l.repeat):
                units.append(_FCUnit(fc_idx, l.out_channels))
                fc_idx += 1
        elif l.kind == "dense_softmax":
            units.append(_DenseUnit(l.out_channels))
        else:
            raise ValueError(f"unknown layer kind {l.kind!r}")
    return units


class ModelGraph:
    """Executable layer sequence with a named, deterministically ordered
    parameter map and per-layer BN running statistics."""

    def __init__(self, spec: ArchitectureSpec, rng: RandomSource | None = None, dtype=TRAIN_DTYPE):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params: dict = {}
        self.state: dict = {}
        self.mode = "infer"
        self.units = _compile_units(spec)
        rng = rng if rng is not None else RandomSource(0)
        in_ch = 1
        for u in self.units:
            in_ch = u.build(in_ch, rng, self)
        self.first_rf = self.units[0].rf

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def forward(self, x: np.ndarray, mode: str | None = None, rng: RandomSource | None = None) -> ForwardResult:
        """Run the network; returns probabilities, logits, and (in train
        mode) the op tape for the backward pass."""
        mode = mode or self.mode
        if x.ndim != 3 or x.shape[2] != 1:
            raise ValueError(f"expected input [B,T,1], got {x.shape}")
        if x.shape[1] < self.first_rf:
            raise ValueError(
                f"input time length {x.shape[1]} < first receptive field {self.first_rf}"
            )
        tape = ops.OpTape() if mode == "train" else None
        h = x.astype(self.dtype, copy=False)
        for u in self.units:
            h = u.forward(h, self, mode, tape, rng)
        return ForwardResult(probs=ops.softmax_probs(h), logits=h, tape=tape)

    def weight_layer_count(self) -> int:
        return sum(u.weight_layers for u in self.units)


def build(name: str, num_classes: int = 10, rng: RandomSource | None = None,
          dtype=TRAIN_DTYPE, channel_scale: float = 1.0) -> ModelGraph:
    """Construct a freshly initialized network by name."""
    return ModelGraph(architecture(name, num_classes, channel_scale), rng=rng, dtype=dtype)


def count_parameters(graph: ModelGraph) -> int:
    """Trainable parameter elements (kernels, biases, gamma, beta);
    running statistics excluded."""
    return int(sum(p.size for p in graph.params.values()))


def parameter_breakdown(graph: ModelGraph) -> list:
    """Per-unit (label, parameter count) in layer order."""
    return [
        (u.label, int(sum(graph.params[n].size for n in u.param_names())))
        for u in graph.units
    ]


def rounded_millions(count: int) -> str:
    return f"{round(count / 1e5) / 10:.1f}M"


def shape_trace(spec_or_name, input_T: int, num_classes: int = 10) -> list:
    """Symbolic forward over shapes only: [(layer label, (T, C)), ...]."""
    spec = (
        architecture(spec_or_name, num_classes)
        if isinstance(spec_or_name, str)
        else spec_or_name
    )
    if isinstance(spec, ModelGraph):
        units = spec.units
        first_rf = spec.first_rf
    else:
        units = _compile_units(spec)
        first_rf = units[0].rf
    check_shape((input_T,))
    if input_T < first_rf:
        raise ValueError(f"input length {input_T} < first receptive field {first_rf}")
    rows = [("input", (input_T, 1))]
    T, C = input_T, 1
    for u in units:
        T, C = u.trace(T, C)
        rows.append((u.label, (T, C)))
    return rows
