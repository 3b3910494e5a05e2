"""Model graphs: residual / plain network builders and graph execution.

A :class:`ModelGraph` is a topologically ordered list of :class:`LayerSpec`
nodes plus a flat parameter dictionary.  Every node consumes the outputs of
the nodes named in ``inputs``; the implicit source node is called
``"input"``.  Layer names follow::

    stem.conv  stem.bn  stem.relu  stem.maxpool
    stage{S}.block{B}.conv1 .bn1 .relu1 .conv2 .bn2 [.add] .relu2
    downsample{S}.conv  downsample{S}.bn
    head.avgpool  head.fc

Main-path convolutions can also be addressed as ``layer1`` .. ``layerN``
(``layer1`` is the stem convolution).
"""
from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .rng import stream

INPUT = "input"
KINDS = ("conv", "bn", "relu", "maxpool", "avgpool", "linear", "add")

# parameter suffixes per layer kind
PARAM_NAMES = {
    "conv": ("weight",),
    "linear": ("weight", "bias"),
    "bn": ("gamma", "beta", "running_mean", "running_var"),
}
NO_DECAY_SUFFIXES = (".bias", ".gamma", ".beta")
BUFFER_SUFFIXES = (".running_mean", ".running_var")


class GraphError(KeyError):
    """Unknown or invalid layer reference."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...]
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    bias: bool = False
    skip: bool = False  # lies on a residual shortcut rather than the main path

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inputs"] = list(self.inputs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["inputs"] = tuple(d["inputs"])
        return cls(**d)


@dataclass
class ModelGraph:
    layers: list[LayerSpec]
    params: dict[str, np.ndarray]
    input_dims: tuple[int, int, int]
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {spec.name: spec for spec in self.layers}
        self.validate()

    # -- structure ---------------------------------------------------------
    def validate(self) -> None:
        seen = {INPUT}
        if len(self._index) != len(self.layers):
            raise ValueError("layer names must be unique")
        for spec in self.layers:
            if spec.kind not in KINDS:
                raise ValueError(f"{spec.name}: unknown layer kind {spec.kind!r}")
            want = 2 if spec.kind == "add" else 1
            if len(spec.inputs) != want:
                raise ValueError(f"{spec.name}: {spec.kind} takes {want} input(s), got {len(spec.inputs)}")
            for src in spec.inputs:
                if src not in seen:
                    raise ValueError(f"{spec.name}: input {src!r} is not defined earlier in the graph")
            for suffix in PARAM_NAMES.get(spec.kind, ()):
                if f"{spec.name}.{suffix}" not in self.params:
                    raise ValueError(f"{spec.name}: missing parameter {suffix}")
            seen.add(spec.name)

    @property
    def output(self) -> str:
        return self.layers[-1].name

    def __contains__(self, name: str) -> bool:
        try:
            self.resolve(name)
        except GraphError:
            return False
        return True

    def main_path_convs(self) -> list[str]:
        return [s.name for s in self.layers if s.kind == "conv" and not s.skip]

    def resolve(self, name: str) -> str:
        """Map a layer name or a ``layerN`` alias to the canonical layer name."""
        if name in self._index:
            return name
        m = re.fullmatch(r"layer(\d+)", name)
        if m:
            convs = self.main_path_convs()
            k = int(m.group(1))
            if 1 <= k <= len(convs):
                return convs[k - 1]
            raise GraphError(f"alias {name!r} out of range: model has {len(convs)} main-path convs")
        raise GraphError(f"unknown layer {name!r}")

    def layer(self, name: str) -> LayerSpec:
        return self._index[self.resolve(name)]

    def consumers(self, name: str) -> list[LayerSpec]:
        return [s for s in self.layers if name in s.inputs]

    def bn_state(self, name: str) -> T.BatchNormState:
        p = self.params
        return T.BatchNormState(
            gamma=p[f"{name}.gamma"],
            beta=p[f"{name}.beta"],
            running_mean=p[f"{name}.running_mean"],
            running_var=p[f"{name}.running_var"],
        )

    # -- parameters --------------------------------------------------------
    def trainable(self) -> list[str]:
        return [k for k in self.params if not k.endswith(BUFFER_SUFFIXES)]

    def decays(self, param: str) -> bool:
        return not param.endswith(NO_DECAY_SUFFIXES)

    def astype(self, dtype) -> "ModelGraph":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return ModelGraph(list(self.layers), params, self.input_dims, copy.deepcopy(self.config))

    def copy(self) -> "ModelGraph":
        return ModelGraph(list(self.layers), {k: v.copy() for k, v in self.params.items()},
                          self.input_dims, copy.deepcopy(self.config))

    def structure(self) -> dict:
        return {
            "input_dims": list(self.input_dims),
            "layers": [s.to_dict() for s in self.layers],
            "config": self.config,
        }

    def structure_hash(self) -> str:
        blob = json.dumps(self.structure(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def output_dims(self, input_dims=None) -> dict[str, tuple[int, ...]]:
        """Per-layer output dims (without batch) by shape propagation."""
        input_dims = tuple(input_dims or self.input_dims)
        dims: dict[str, tuple[int, ...]] = {INPUT: input_dims}
        for s in self.layers:
            src = dims[s.inputs[0]]
            if s.kind == "conv":
                h, w = T.conv_output_hw(src[1], src[2], s.kernel, s.stride, s.padding)
                d = (s.out_channels, h, w)
            elif s.kind == "maxpool":
                h, w = T.conv_output_hw(src[1], src[2], s.kernel, s.stride, s.padding)
                d = (src[0], h, w)
            elif s.kind == "avgpool":
                d = (src[0], 1, 1)
            elif s.kind == "linear":
                d = (s.out_channels,)
            elif s.kind == "add":
                other = dims[s.inputs[1]]
                if other != src:
                    raise ValueError(f"{s.name}: add operands differ {src} vs {other}")
                d = src
            else:
                d = src
            if any(v <= 0 for v in d):
                raise ValueError(f"{s.name}: input dims {input_dims} collapse to {d}")
            dims[s.name] = d
        return dims


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

class GraphBuilder:
    """Incremental graph construction with Kaiming fan-out initialisation."""

    def __init__(self, input_dims, seed: int = 0, config: dict | None = None, init: bool = True):
        self.input_dims = tuple(int(v) for v in input_dims)
        self.init = init  # False leaves weights at zero (structure-only graphs)
        self.layers: list[LayerSpec] = []
        self.params: dict[str, np.ndarray] = {}
        self.channels: dict[str, int] = {INPUT: self.input_dims[0]}
        self.seed = seed
        self.config = config or {}

    def _rng(self):
        return stream(self.seed, len(self.layers))

    def _add(self, spec: LayerSpec, channels: int) -> str:
        self.layers.append(spec)
        self.channels[spec.name] = channels
        return spec.name

    def conv(self, name, src, out_channels, kernel, stride=1, padding=0, bias=False, skip=False) -> str:
        cin = self.channels[src]
        std = np.sqrt(2.0 / (out_channels * kernel * kernel))
        shape = (out_channels, cin, kernel, kernel)
        self.params[f"{name}.weight"] = (
            (self._rng().standard_normal(shape) * std).astype(np.float32) if self.init else np.zeros(shape, np.float32))
        if bias:
            self.params[f"{name}.bias"] = np.zeros(out_channels, np.float32)
        return self._add(LayerSpec(name, "conv", (src,), cin, out_channels, kernel, stride, padding, bias, skip),
                         out_channels)

    def bn(self, name, src, skip=False) -> str:
        c = self.channels[src]
        st = T.BatchNormState.fresh(c)
        for k in PARAM_NAMES["bn"]:
            self.params[f"{name}.{k}"] = getattr(st, k)
        return self._add(LayerSpec(name, "bn", (src,), c, c, skip=skip), c)

    def relu(self, name, src, skip=False) -> str:
        c = self.channels[src]
        return self._add(LayerSpec(name, "relu", (src,), c, c, skip=skip), c)

    def maxpool(self, name, src, kernel=3, stride=2, padding=1) -> str:
        c = self.channels[src]
        return self._add(LayerSpec(name, "maxpool", (src,), c, c, kernel, stride, padding), c)

    def avgpool(self, name, src) -> str:
        c = self.channels[src]
        return self._add(LayerSpec(name, "avgpool", (src,), c, c), c)

    def linear(self, name, src, out_features, in_features=None) -> str:
        cin = in_features or self.channels[src]
        bound = 1.0 / np.sqrt(cin)
        if self.init:
            rng = self._rng()
            self.params[f"{name}.weight"] = rng.uniform(-bound, bound, (out_features, cin)).astype(np.float32)
            self.params[f"{name}.bias"] = rng.uniform(-bound, bound, out_features).astype(np.float32)
        else:
            self.params[f"{name}.weight"] = np.zeros((out_features, cin), np.float32)
            self.params[f"{name}.bias"] = np.zeros(out_features, np.float32)
        return self._add(LayerSpec(name, "linear", (src,), cin, out_features, bias=True), out_features)

    def add(self, name, a, b) -> str:
        c = self.channels[a]
        if self.channels[b] != c:
            raise ValueError(f"{name}: add of {c} and {self.channels[b]} channels")
        return self._add(LayerSpec(name, "add", (a, b), c, c), c)

    def build(self) -> ModelGraph:
        g = ModelGraph(self.layers, self.params, self.input_dims, self.config)
        g.output_dims()
        return g


def build_scaled(arch: str, stage_blocks: Iterable[int], base_channels: int, input_dims=(3, 224, 224),
                 num_classes: int = 1000, stem_kernel: int = 7, stem_stride: int = 2, stem_pool: bool = True,
                 seed: int = 0, init: bool = True) -> ModelGraph:
    """Two-conv residual (``arch="resnet"``) or skip-free (``"plain"``) network.

    Stage ``S`` has ``base_channels * 2**(S-1)`` channels; every stage after
    the first halves the resolution in its first block, whose shortcut
    becomes a 1x1 stride-2 convolution followed by BN.
    """
    if arch not in ("resnet", "plain"):
        raise ValueError(f"arch must be 'resnet' or 'plain', got {arch!r}")
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    stage_blocks = [int(b) for b in stage_blocks]
    if not stage_blocks or min(stage_blocks) < 1:
        raise ValueError(f"stage_blocks must be positive counts, got {stage_blocks}")
    config = {
        "arch": arch, "stage_blocks": stage_blocks, "base_channels": base_channels,
        "num_classes": num_classes, "stem_kernel": stem_kernel, "stem_stride": stem_stride,
        "stem_pool": stem_pool, "seed": seed,
    }
    b = GraphBuilder(input_dims, seed, config, init)
    x = b.conv("stem.conv", INPUT, base_channels, stem_kernel, stem_stride, stem_kernel // 2)
    x = b.bn("stem.bn", x)
    x = b.relu("stem.relu", x)
    if stem_pool:
        x = b.maxpool("stem.maxpool", x, 3, 2, 1)
    channels = base_channels
    for s, blocks in enumerate(stage_blocks, start=1):
        width = base_channels * 2 ** (s - 1)
        for blk in range(1, blocks + 1):
            stride = 2 if (s > 1 and blk == 1) else 1
            pre = f"stage{s}.block{blk}"
            shortcut = x
            y = b.conv(f"{pre}.conv1", x, width, 3, stride, 1)
            y = b.bn(f"{pre}.bn1", y)
            y = b.relu(f"{pre}.relu1", y)
            y = b.conv(f"{pre}.conv2", y, width, 3, 1, 1)
            y = b.bn(f"{pre}.bn2", y)
            if arch == "resnet":
                if stride != 1 or channels != width:
                    shortcut = b.conv(f"downsample{s}.conv", shortcut, width, 1, stride, 0, skip=True)
                    shortcut = b.bn(f"downsample{s}.bn", shortcut, skip=True)
                y = b.add(f"{pre}.add", y, shortcut)
            x = b.relu(f"{pre}.relu2", y)
            channels = width
    x = b.avgpool("head.avgpool", x)
    b.linear("head.fc", x, num_classes)
    return b.build()


def build_resnet34(num_classes: int = 1000, input_dims=(3, 224, 224), seed: int = 0,
                   init: bool = True) -> ModelGraph:
    return build_scaled("resnet", [3, 4, 6, 3], 64, input_dims, num_classes, seed=seed, init=init)


def build_plainnet34(num_classes: int = 1000, input_dims=(3, 224, 224), seed: int = 0,
                   init: bool = True) -> ModelGraph:
    return build_scaled("plain", [3, 4, 6, 3], 64, input_dims, num_classes, seed=seed, init=init)


def from_structure(structure: dict, params: dict[str, np.ndarray]) -> ModelGraph:
    layers = [LayerSpec.from_dict(d) for d in structure["layers"]]
    return ModelGraph(layers, params, tuple(structure["input_dims"]), structure.get("config", {}))


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

Hook = Callable[[np.ndarray], np.ndarray]


def run(model: ModelGraph, x: np.ndarray, mode: str = "eval", hooks: dict[str, Hook] | None = None,
        stop_at: str | None = None) -> dict[str, np.ndarray]:
    """Evaluate the graph and return every node's output (``"input"`` included).

    ``hooks`` map a layer name to a function applied to that layer's output
    before it is consumed downstream.  Evaluation ends after ``stop_at``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_dims):
        raise T.ShapeError(f"model expects (N, {', '.join(map(str, model.input_dims))}), got {tuple(x.shape)}")
    hooks = {model.resolve(k): v for k, v in (hooks or {}).items()}
    stop = model.resolve(stop_at) if stop_at else None
    p = model.params
    values = {INPUT: x}
    for s in model.layers:
        a = values[s.inputs[0]]
        if s.kind == "conv":
            y = T.conv2d_forward(a, p[f"{s.name}.weight"], p.get(f"{s.name}.bias"), s.stride, s.padding)
        elif s.kind == "bn":
            y = T.batchnorm_forward(a, model.bn_state(s.name), mode)
        elif s.kind == "relu":
            y = T.relu_forward(a)
        elif s.kind == "maxpool":
            y = T.maxpool_forward(a, s.kernel, s.stride, s.padding)
        elif s.kind == "avgpool":
            y = T.global_avgpool_forward(a)
        elif s.kind == "linear":
            y = T.linear_forward(a, p[f"{s.name}.weight"], p[f"{s.name}.bias"])
        else:
            y = T.add_forward(a, values[s.inputs[1]])
        if s.name in hooks:
            y = hooks[s.name](y)
        values[s.name] = y
        if s.name == stop:
            break
    return values


def forward(model: ModelGraph, x: np.ndarray, mode: str = "eval", capture: Iterable[str] = (),
            hooks: dict[str, Hook] | None = None):
    """Return ``(output, captured)`` where ``captured`` maps each requested name to its feature map."""
    names = {c: model.resolve(c) for c in capture}
    values = run(model, x, mode, hooks)
    return values[model.output], {c: values[n] for c, n in names.items()}


def backward(model: ModelGraph, values: dict[str, np.ndarray], seeds: dict[str, np.ndarray],
             mode: str = "eval", need_param_grads: bool = True):
    """Reverse-mode sweep from ``seeds`` (layer name -> dL/d output).

    Returns ``(grad_input, param_grads)``.
    """
    p = model.params
    grads: dict[str, np.ndarray] = {}
    for name, g in seeds.items():
        grads[model.resolve(name)] = g
    pgrads: dict[str, np.ndarray] = {}

    def push(name, g):
        if name in grads:
            grads[name] = grads[name] + g
        else:
            grads[name] = g

    for s in reversed(model.layers):
        g = grads.pop(s.name, None)
        if g is None:
            continue
        a = values[s.inputs[0]]
        if s.kind == "conv":
            w = p[f"{s.name}.weight"]
            gx, gw, gb = T.conv2d_backward(g, a, w, s.stride, s.padding, s.bias, need_param_grads)
            if need_param_grads:
                pgrads[f"{s.name}.weight"] = gw
                if s.bias:
                    pgrads[f"{s.name}.bias"] = gb
        elif s.kind == "bn":
            gx, gg, gbeta = T.batchnorm_backward(g, a, model.bn_state(s.name), mode)
            if need_param_grads:
                pgrads[f"{s.name}.gamma"] = gg
                pgrads[f"{s.name}.beta"] = gbeta
        elif s.kind == "relu":
            gx = T.relu_backward(g, a)
        elif s.kind == "maxpool":
            gx = T.maxpool_backward(g, a, s.kernel, s.stride, s.padding)
        elif s.kind == "avgpool":
            gx = T.global_avgpool_backward(g, a.shape)
        elif s.kind == "linear":
            gx, gw, gb = T.linear_backward(g, a, p[f"{s.name}.weight"])
            if need_param_grads:
                pgrads[f"{s.name}.weight"] = gw
                pgrads[f"{s.name}.bias"] = gb
        else:
            ga, gb2 = T.add_backward(g)
            push(s.inputs[1], gb2)
            gx = ga
        push(s.inputs[0], gx)
    return grads.get(INPUT), pgrads


Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


def neuron_objective(channel: int, i: int, j: int) -> Objective:
    """Sum over the batch of one neuron's activation."""
    def f(act):
        seed = np.zeros_like(act)
        seed[:, channel, i, j] = 1
        return float(act[:, channel, i, j].sum()), seed
    return f


def channel_mean_objective(channel: int) -> Objective:
    """Sum over the batch of the spatial mean of one channel."""
    def f(act):
        seed = np.zeros_like(act)
        h, w = act.shape[2:]
        seed[:, channel] = 1.0 / (h * w)
        return float(act[:, channel].mean(axis=(1, 2)).sum()), seed
    return f


def backward_to_input(model: ModelGraph, x: np.ndarray, layer: str, objective: Objective):
    """Value and input gradient of a scalar objective over one layer's activation (eval mode)."""
    name = model.resolve(layer)
    values = run(model, x, "eval", stop_at=name)
    value, seed = objective(values[name])
    grad_x, _ = backward(model, values, {name: seed.astype(values[name].dtype, copy=False)},
                         "eval", need_param_grads=False)
    if grad_x is None:
        grad_x = np.zeros_like(x)
    return value, grad_x
