"""Declarative model graphs and the VGG-Lite / VGG-Lite+CEEM presets.

A graph is a list of :class:`LayerSpec` records wired by id. Exactly one layer
has no inputs (it reads the graph input) and exactly one layer is consumed by
nobody (the softmax head). Execution order is a topological sort with ids as
the tie-break, so the declaration order in a config file does not matter.
"""

from __future__ import annotations

import copy
import heapq
import json
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

from . import layers as L
from .errors import CeemError, ShapeError, StateError
from .rng import Rng, derive_seed
from .tensor import Tensor, pool_grid

KINDS = ("conv2d", "dwsc", "relu", "maxpool", "maxminpool", "twomaxminpool",
         "negative", "gap", "concat", "dense_softmax")
POOL_KINDS = {"maxpool": "max", "maxminpool": "maxmin", "twomaxminpool": "twomaxmin"}
PARAM_KINDS = ("conv2d", "dwsc", "dense_softmax")

CLASS_NAMES = ("BP", "Covid", "LO", "Normal", "TB", "VP")


class GraphError(CeemError, ValueError):
    code = "E_GRAPH"


@dataclass
class LayerSpec:
    id: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "inputs": list(self.inputs), **self.config}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        try:
            lid, kind = d.pop("id"), d.pop("kind")
        except KeyError as e:
            raise GraphError(f"layer entry is missing {e.args[0]!r}") from None
        return cls(lid, kind, list(d.pop("inputs", [])), d)


def _topo_order(specs: list[LayerSpec]) -> list[LayerSpec]:
    by_id = {s.id: s for s in specs}
    indeg = {s.id: len(s.inputs) for s in specs}
    users: dict[str, list[str]] = {s.id: [] for s in specs}
    for s in specs:
        for src in s.inputs:
            users[src].append(s.id)
    ready = [i for i, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        lid = heapq.heappop(ready)
        order.append(by_id[lid])
        for u in users[lid]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, u)
    if len(order) != len(specs):
        raise GraphError("layer graph contains a cycle")
    return order


class ModelGraph:
    """Executable two-branch CNN.

    ``params`` maps each parameterised layer id to its spec object from
    :mod:`ceemkit.layers` (weights live on those objects). ``forward`` caches
    every activation; ``backward`` consumes that cache.
    """

    def __init__(self, layers: list[LayerSpec], input_shape=(224, 224, 1), classes: int = 6,
                 tap_point: str | None = None, class_names=None, seed: int = 0, init: bool = True):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.classes = int(classes)
        self.tap_point = tap_point
        self.class_names = list(class_names) if class_names else (
            list(CLASS_NAMES) if self.classes == len(CLASS_NAMES) else [str(k) for k in range(self.classes)])
        self.layers = self._validate(layers)
        self.ops: dict[str, Any] = {}
        self.params: dict[str, Any] = {}
        self.shapes: dict[str, tuple] = {}
        self._build()
        if init:
            self.init_params(seed)
        self._cache: dict | None = None
        self.output_grads: dict[str, Tensor] = {}

    # ------------------------------------------------------------------ build

    def _validate(self, specs: list[LayerSpec]) -> list[LayerSpec]:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise GraphError(f"input_shape must be (H, W, C), got {self.input_shape}")
        ids = [s.id for s in specs]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise GraphError(f"duplicate layer ids: {dup}")
        known = set(ids)
        for s in specs:
            if s.kind not in KINDS:
                raise GraphError(f"layer {s.id!r} has unknown kind {s.kind!r}")
            missing = [i for i in s.inputs if i not in known]
            if missing:
                raise GraphError(f"layer {s.id!r} reads unknown layers {missing}")
            want = 2 if s.kind == "concat" else (0, 1)
            if (s.kind == "concat" and len(s.inputs) != 2) or (s.kind != "concat" and len(s.inputs) > 1):
                raise GraphError(f"layer {s.id!r} ({s.kind}) needs {want} inputs, got {len(s.inputs)}")
        sources = [s.id for s in specs if not s.inputs]
        if len(sources) != 1:
            raise GraphError(f"expected exactly one source layer, got {sources}")
        consumed = {i for s in specs for i in s.inputs}
        sinks = [s.id for s in specs if s.id not in consumed]
        if len(sinks) != 1:
            raise GraphError(f"expected exactly one sink layer, got {sinks}")
        order = _topo_order(specs)
        if order[-1].kind != "dense_softmax":
            raise GraphError("the sink layer must be dense_softmax")
        if self.tap_point is not None and self.tap_point not in known:
            raise GraphError(f"tap point {self.tap_point!r} is not a layer id")
        return [copy.deepcopy(s) for s in order]

    def _build(self) -> None:
        for s in self.layers:
            ins = [self.shapes[i] for i in s.inputs] or [self.input_shape]
            try:
                self.shapes[s.id] = self._infer(s, ins)
            except ShapeError as e:
                raise ShapeError(f"layer {s.id!r}: {e}") from None

    def _infer(self, s: LayerSpec, ins: list[tuple]) -> tuple:
        cfg = s.config
        x = ins[0]
        spatial = s.kind in ("conv2d", "dwsc", "relu", "negative", "gap") or s.kind in POOL_KINDS
        if spatial and s.kind != "relu" and len(x) != 3:
            raise ShapeError(f"{s.kind} needs a [H, W, C] input, got {x}")
        if s.kind == "conv2d":
            self.params[s.id] = L.Conv2DSpec(x[2], int(cfg["filters"]), int(cfg.get("kernel", 3)),
                                             cfg.get("activation", "relu"))
            return x[:2] + (int(cfg["filters"]),)
        if s.kind == "dwsc":
            self.params[s.id] = L.DWSConv2DSpec(x[2], int(cfg["filters"]), cfg.get("activation", "relu"))
            return x[:2] + (int(cfg["filters"]),)
        if s.kind in POOL_KINDS:
            pool = tuple(int(p) for p in cfg.get("pool", (3, 3)))
            op = L.PoolSpec(POOL_KINDS[s.kind], pool, int(cfg.get("stride", 2)))
            self.ops[s.id] = op
            return pool_grid(x[0], x[1], op.pool, op.stride) + (x[2],)
        if s.kind == "negative":
            self.ops[s.id] = L.NegativeSpec(float(cfg.get("reference", 255.0)))
            return x
        if s.kind == "relu":
            return x
        if s.kind == "gap":
            return (x[2],)
        if s.kind == "concat":
            a, b = ins
            if len(a) != 1 or len(b) != 1:
                raise ShapeError(f"concat needs two feature vectors, got {a} and {b}")
            return (a[0] + b[0],)
        if s.kind == "dense_softmax":
            if len(x) != 1:
                raise ShapeError(f"dense_softmax needs a feature vector, got {x}")
            classes = int(cfg.get("classes", self.classes))
            if classes != self.classes:
                raise ShapeError(f"head has {classes} classes, graph declares {self.classes}")
            self.params[s.id] = L.DenseSoftmaxSpec(x[0], classes)
            return (classes,)
        raise GraphError(f"unhandled kind {s.kind}")

    def init_params(self, seed: int) -> None:
        """He-uniform weights, zero biases; each layer draws from its own id-derived stream."""
        for lid, p in self.params.items():
            rng = Rng(derive_seed(seed, lid))
            if isinstance(p, L.Conv2DSpec):
                p.weights = _he_uniform(rng, p.weights.shape, p.kernel ** 2 * p.in_channels)
                p.bias = np.zeros_like(p.bias)
            elif isinstance(p, L.DWSConv2DSpec):
                p.depthwise = _he_uniform(rng, p.depthwise.shape, 9)
                p.pointwise = _he_uniform(rng, p.pointwise.shape, p.in_channels)
                p.depthwise_bias = np.zeros_like(p.depthwise_bias)
                p.pointwise_bias = np.zeros_like(p.pointwise_bias)
            else:
                p.weights = _he_uniform(rng, p.weights.shape, p.in_features)
                p.bias = np.zeros_like(p.bias)

    # ------------------------------------------------------------ parameters

    def parameters(self) -> Iterator[tuple[str, str, Tensor]]:
        """(layer id, parameter name, array) in execution order."""
        for s in self.layers:
            p = self.params.get(s.id)
            if p is not None:
                for name in _param_names(p):
                    yield s.id, name, getattr(p, name)

    def set_parameter(self, lid: str, name: str, value: Tensor) -> None:
        p = self.params[lid]
        old = getattr(p, name)
        if old.shape != value.shape:
            raise ShapeError(f"{lid}/{name}: expected shape {old.shape}, got {value.shape}")
        setattr(p, name, value)

    def param_count(self) -> int:
        return sum(a.size for _, _, a in self.parameters())

    # -------------------------------------------------------------- execution

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected input [B, {', '.join(map(str, self.input_shape))}], got {x.shape}")
        outs: dict[str, Tensor] = {}
        caches: dict[str, Any] = {}
        for s in self.layers:
            ins = [outs[i] for i in s.inputs] or [x]
            outs[s.id], caches[s.id] = self._forward_layer(s, ins)
        self._cache = {"outs": outs, "caches": caches, "input": x}
        return outs[self.layers[-1].id]

    def _forward_layer(self, s: LayerSpec, ins: list[Tensor]):
        k = s.kind
        x = ins[0]
        if k == "conv2d":
            return L.conv2d_forward(x, self.params[s.id])
        if k == "dwsc":
            return L.dwsc_forward(x, self.params[s.id])
        if k in POOL_KINDS:
            return L.pool_forward(x, self.ops[s.id])
        if k == "negative":
            return L.negative_forward(x, self.ops[s.id]), None
        if k == "relu":
            return L.relu_forward(x)
        if k == "gap":
            return L.gap_forward(x)
        if k == "concat":
            return L.concat_channels(ins[0], ins[1])
        return L.dense_softmax_forward(x, self.params[s.id])

    def backward(self, grad_logits: Tensor) -> dict[str, dict[str, Tensor]]:
        """Parameter gradients given dLoss/dlogits of the head.

        Gradients of tensors read by more than one layer are summed. After the
        call ``output_grads`` holds dLoss/d(output) for every layer and
        ``input_grad`` holds dLoss/d(graph input).
        """
        if self._cache is None:
            raise StateError("backward called before forward")
        caches = self._cache["caches"]
        acc: dict[str, Tensor] = {self.layers[-1].id: grad_logits}
        pgrads: dict[str, dict[str, Tensor]] = {}
        input_grad = None
        for s in reversed(self.layers):
            g = acc[s.id]  # single-sink validation guarantees every output reaches the head
            dins, dp = self._backward_layer(s, g, caches[s.id])
            if dp is not None:
                pgrads[s.id] = dp
            targets = s.inputs or [None]
            for src, d in zip(targets, dins):
                if src is None:
                    input_grad = d if input_grad is None else input_grad + d
                elif src in acc:
                    acc[src] = acc[src] + d
                else:
                    acc[src] = d
        self.output_grads = acc
        self.input_grad = input_grad
        self._cache = None
        return pgrads

    def _backward_layer(self, s: LayerSpec, g: Tensor, cache):
        k = s.kind
        if k == "conv2d":
            dx, dp = L.conv2d_backward(g, self.params[s.id], cache)
            return [dx], dp
        if k == "dwsc":
            dx, dp = L.dwsc_backward(g, self.params[s.id], cache)
            return [dx], dp
        if k in POOL_KINDS:
            return [L.pool_backward(g, self.ops[s.id], cache)], None
        if k == "negative":
            return [L.negative_backward(g)], None
        if k == "relu":
            return [L.relu_backward(g, cache)], None
        if k == "gap":
            return [L.gap_backward(g, cache)], None
        if k == "concat":
            return list(L.concat_backward(g, cache)), None
        dx, dp = L.dense_softmax_backward(g, self.params[s.id], cache)
        return [dx], dp

    def predict_proba(self, x: Tensor, batch_size: int = 64) -> Tensor:
        out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        self._cache = None
        return np.concatenate(out, axis=0)

    # ---------------------------------------------------------------- reports

    def summary(self) -> dict:
        rows = []
        for s in self.layers:
            p = self.params.get(s.id)
            true = p.param_count() if p is not None else 0
            if s.kind == "conv2d":
                simple = L.conv2d_param_count(p.in_channels, p.filters, p.kernel)
            elif s.kind == "dwsc":
                simple = L.dwsc_param_count_paper(p.in_channels)
            else:
                simple = true
            rows.append({"id": s.id, "kind": s.kind, "output_shape": list(self.shapes[s.id]),
                         "params_simplified": simple, "params_true": true})
        return {
            "rows": rows,
            "total_simplified": sum(r["params_simplified"] for r in rows),
            "total_true": sum(r["params_true"] for r in rows),
        }

    def attention_ratio(self) -> tuple[int, int] | None:
        """(base channels, branch channels) at the concatenation, or None without a branch."""
        for s in self.layers:
            if s.kind == "concat":
                a, b = s.inputs
                return self.shapes[a][0], self.shapes[b][0]
        return None

    # ------------------------------------------------------------------ config

    def to_config(self) -> dict:
        return {
            "format": "ceemkit-model",
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "class_names": list(self.class_names),
            "tap_point": self.tap_point,
            "layers": [s.to_dict() for s in self.layers],
        }

    @classmethod
    def from_config(cls, cfg: dict, seed: int = 0, init: bool = True) -> "ModelGraph":
        if cfg.get("format") != "ceemkit-model":
            raise GraphError("not a ceemkit model config (missing format tag)")
        try:
            layers = [LayerSpec.from_dict(d) for d in cfg["layers"]]
            return cls(layers, cfg["input_shape"], cfg["classes"], cfg.get("tap_point"),
                       cfg.get("class_names"), seed=seed, init=init)
        except (KeyError, TypeError) as e:
            raise GraphError(f"malformed model config: {e}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_config(), indent=2, sort_keys=True)


def _param_names(p) -> tuple[str, ...]:
    if isinstance(p, L.DWSConv2DSpec):
        return ("depthwise", "depthwise_bias", "pointwise", "pointwise_bias")
    return ("weights", "bias")


def _he_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(int(np.prod(shape)), -limit, limit).reshape(shape)


# ---------------------------------------------------------------------------
# presets

BASE_BLOCKS = (
    ("b1", (("conv2d", 32), ("dwsc", 32))),
    ("b2", (("conv2d", 64), ("dwsc", 64))),
    ("b3", (("conv2d", 128), ("conv2d", 128), ("dwsc", 128))),
    ("b4", (("conv2d", 256), ("conv2d", 512), ("dwsc", 512))),
)
BRANCH = (("conv2d", 32, 3), ("dwsc", 32, 3), ("conv2d", 64, 5), ("conv2d", 224, 3))
SCALES = {"full": 1, "tiny": 8}
TAP = "b2_pool"


def _scale(channels: int, scale: str) -> int:
    try:
        div = SCALES[scale]
    except KeyError:
        raise GraphError(f"unknown scale {scale!r}; expected one of {sorted(SCALES)}") from None
    return max(1, channels // div)


def _base_layers(scale: str) -> list[LayerSpec]:
    out: list[LayerSpec] = []
    prev: list[str] = []
    for block, convs in BASE_BLOCKS:
        counts = {"conv2d": 0, "dwsc": 0}
        for kind, ch in convs:
            counts[kind] += 1
            lid = f"{block}_{'conv' if kind == 'conv2d' else 'dwsc'}{counts[kind]}"
            cfg = {"filters": _scale(ch, scale), "activation": "relu"}
            if kind == "conv2d":
                cfg["kernel"] = 3
            out.append(LayerSpec(lid, kind, prev, cfg))
            prev = [lid]
        out.append(LayerSpec(f"{block}_pool", "maxpool", prev, {"pool": [2, 2], "stride": 2}))
        prev = [f"{block}_pool"]
    out.append(LayerSpec("gap", "gap", prev))
    return out


def preset_vgg_lite(scale: str = "full", input_shape=(224, 224, 1), classes: int = 6,
                    seed: int = 0) -> ModelGraph:
    layers = _base_layers(scale)
    layers.append(LayerSpec("head", "dense_softmax", ["gap"], {"classes": classes}))
    return ModelGraph(layers, input_shape, classes, tap_point=TAP, seed=seed)


def preset_vgg_lite_ceem(scale: str = "full", input_shape=(224, 224, 1), classes: int = 6,
                         seed: int = 0, reference: float = 255.0,
                         branch_filters: int = 224) -> ModelGraph:
    layers = _base_layers(scale)
    layers.append(LayerSpec("ceem_neg", "negative", [TAP], {"reference": reference}))
    layers.append(LayerSpec("ceem_pool", "twomaxminpool", ["ceem_neg"], {"pool": [3, 3], "stride": 2}))
    prev = "ceem_pool"
    for i, (kind, ch, k) in enumerate(BRANCH, start=1):
        if i == len(BRANCH):
            ch = branch_filters
        lid = f"ceem_{'conv' if kind == 'conv2d' else 'dwsc'}{i}"
        cfg = {"filters": _scale(ch, scale), "activation": "relu"}
        if kind == "conv2d":
            cfg["kernel"] = k
        layers.append(LayerSpec(lid, kind, [prev], cfg))
        prev = lid
    layers.append(LayerSpec("ceem_gap", "gap", [prev]))
    layers.append(LayerSpec("concat", "concat", ["gap", "ceem_gap"]))
    layers.append(LayerSpec("head", "dense_softmax", ["concat"], {"classes": classes}))
    return ModelGraph(layers, input_shape, classes, tap_point=TAP, seed=seed)


PRESETS = {"vgg_lite": preset_vgg_lite, "vgg_lite_ceem": preset_vgg_lite_ceem}


def build_preset(name: str, scale: str = "full", **kw) -> ModelGraph:
    try:
        fn = PRESETS[name]
    except KeyError:
        raise GraphError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    return fn(scale, **kw)
