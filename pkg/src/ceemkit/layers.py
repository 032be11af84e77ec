"""Forward and backward passes for every layer kind.

All ops work on ``[B, H, W, C]`` float64 arrays (``[B, F]`` after global
pooling). Forward functions return ``(out, cache)``; backward functions take
the upstream gradient plus that cache and return the input gradient, and for
parameterised layers also a dict of parameter gradients keyed by the *Spec
attribute names.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, pool_grid

Activation = Literal["relu", "none"]
PoolKind = Literal["max", "maxmin", "twomaxmin"]


# ---------------------------------------------------------------------------
# parameter counts


def conv2d_param_count(p0: int, p1: int, k: int = 3) -> int:
    return (k * k * p0 + 1) * p1


def dwsc_param_count_paper(p0: int) -> int:
    """Depthwise 3x3 kernel plus one bias per input channel (pointwise part excluded)."""
    return (3 * 3 * 1 + 1) * p0


def dwsc_param_count_true(p0: int, p1: int) -> int:
    return 9 * p0 + p0 + p0 * p1 + p1


# ---------------------------------------------------------------------------
# specs


@dataclass
class Conv2DSpec:
    in_channels: int
    filters: int
    kernel: int = 3
    activation: Activation = "relu"
    weights: Tensor = field(default=None, repr=False)  # [k, k, p0, p1]
    bias: Tensor = field(default=None, repr=False)  # [p1]

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ShapeError(f"'same' padding needs an odd kernel, got {self.kernel}")
        k, p0, p1 = self.kernel, self.in_channels, self.filters
        if self.weights is None:
            self.weights = np.zeros((k, k, p0, p1))
        if self.bias is None:
            self.bias = np.zeros(p1)
        if self.weights.shape != (k, k, p0, p1) or self.bias.shape != (p1,):
            raise ShapeError("conv parameter shapes do not match the layer config")

    def param_count(self) -> int:
        return self.weights.size + self.bias.size


@dataclass
class DWSConv2DSpec:
    in_channels: int
    out_channels: int
    activation: Activation = "relu"
    depthwise: Tensor = field(default=None, repr=False)  # [3, 3, p0]
    depthwise_bias: Tensor = field(default=None, repr=False)  # [p0]
    pointwise: Tensor = field(default=None, repr=False)  # [1, 1, p0, p1]
    pointwise_bias: Tensor = field(default=None, repr=False)  # [p1]

    def __post_init__(self):
        p0, p1 = self.in_channels, self.out_channels
        if self.depthwise is None:
            self.depthwise = np.zeros((3, 3, p0))
        if self.depthwise_bias is None:
            self.depthwise_bias = np.zeros(p0)
        if self.pointwise is None:
            self.pointwise = np.zeros((1, 1, p0, p1))
        if self.pointwise_bias is None:
            self.pointwise_bias = np.zeros(p1)
        shapes = (self.depthwise.shape, self.depthwise_bias.shape,
                  self.pointwise.shape, self.pointwise_bias.shape)
        if shapes != ((3, 3, p0), (p0,), (1, 1, p0, p1), (p1,)):
            raise ShapeError(f"DWSC parameter shapes {shapes} do not match the layer config")

    def param_count(self) -> int:
        return (self.depthwise.size + self.depthwise_bias.size
                + self.pointwise.size + self.pointwise_bias.size)


@dataclass(frozen=True)
class PoolSpec:
    kind: PoolKind = "twomaxmin"
    pool: tuple[int, int] = (3, 3)
    stride: int = 2

    def __post_init__(self):
        if self.kind not in ("max", "maxmin", "twomaxmin"):
            raise ValueError(f"unknown pooling kind {self.kind!r}")


@dataclass(frozen=True)
class NegativeSpec:
    reference: float = 255.0


@dataclass
class DenseSoftmaxSpec:
    in_features: int
    classes: int
    weights: Tensor = field(default=None, repr=False)  # [in, classes]
    bias: Tensor = field(default=None, repr=False)  # [classes]

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.zeros((self.in_features, self.classes))
        if self.bias is None:
            self.bias = np.zeros(self.classes)
        if self.weights.shape != (self.in_features, self.classes) or self.bias.shape != (self.classes,):
            raise ShapeError("dense parameter shapes do not match the layer config")

    def param_count(self) -> int:
        return self.weights.size + self.bias.size


# ---------------------------------------------------------------------------
# helpers


def _require_4d(x: Tensor, channels: int | None = None) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected [B, H, W, C] input, got shape {x.shape}")
    if channels is not None and x.shape[3] != channels:
        raise ShapeError(f"expected {channels} input channels, got {x.shape[3]}")


def _same_patches(x: Tensor, k: int) -> np.ndarray:
    """[B, H, W, C, k, k] view of zero-padded ``x`` (stride 1, 'same')."""
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    return sliding_window_view(xp, (k, k), axis=(1, 2))


# ---------------------------------------------------------------------------
# activations


def relu_forward(x: Tensor) -> tuple[Tensor, Tensor]:
    return np.maximum(x, 0.0), x


def relu_backward(grad: Tensor, cache: Tensor) -> Tensor:
    # derivative at exactly 0 is taken as 0
    return grad * (cache > 0)


def _activate(z: Tensor, activation: Activation) -> Tensor:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "none":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def _activation_grad(grad: Tensor, out: Tensor, activation: Activation) -> Tensor:
    # relu(z) > 0 iff z > 0, so the output doubles as the mask
    return grad * (out > 0) if activation == "relu" else grad


# ---------------------------------------------------------------------------
# standard convolution


def conv2d_forward(x: Tensor, spec: Conv2DSpec) -> tuple[Tensor, tuple]:
    _require_4d(x, spec.in_channels)
    patches = _same_patches(x, spec.kernel)  # b h w c i j
    z = np.tensordot(patches, spec.weights, axes=([4, 5, 3], [0, 1, 2])) + spec.bias
    out = _activate(z, spec.activation)
    return out, (x, out)


def conv2d_backward(grad: Tensor, spec: Conv2DSpec, cache) -> tuple[Tensor, dict]:
    x, out = cache
    if grad.shape != out.shape:
        raise ShapeError(f"gradient shape {grad.shape} != output shape {out.shape}")
    gz = _activation_grad(grad, out, spec.activation)
    k = spec.kernel
    patches = _same_patches(x, k)
    dw = np.tensordot(patches, gz, axes=([0, 1, 2], [0, 1, 2]))  # c i j f
    dw = dw.transpose(1, 2, 0, 3)
    db = gz.sum(axis=(0, 1, 2))
    # input gradient is the full correlation of gz with the flipped kernel
    gpatches = _same_patches(gz, k)  # b h w f i j
    wflip = spec.weights[::-1, ::-1]  # i j c f
    dx = np.tensordot(gpatches, wflip, axes=([4, 5, 3], [0, 1, 3]))
    return dx, {"weights": dw, "bias": db}


# ---------------------------------------------------------------------------
# depthwise-separable convolution


def dwsc_forward(x: Tensor, spec: DWSConv2DSpec) -> tuple[Tensor, tuple]:
    _require_4d(x, spec.in_channels)
    patches = _same_patches(x, 3)  # b h w c i j
    d = np.einsum("bhwcij,ijc->bhwc", patches, spec.depthwise) + spec.depthwise_bias
    z = d @ spec.pointwise[0, 0] + spec.pointwise_bias
    out = _activate(z, spec.activation)
    return out, (x, d, out)


def dwsc_backward(grad: Tensor, spec: DWSConv2DSpec, cache) -> tuple[Tensor, dict]:
    x, d, out = cache
    if grad.shape != out.shape:
        raise ShapeError(f"gradient shape {grad.shape} != output shape {out.shape}")
    gz = _activation_grad(grad, out, spec.activation)
    pw = spec.pointwise[0, 0]
    dpw = np.tensordot(d, gz, axes=([0, 1, 2], [0, 1, 2]))
    dpb = gz.sum(axis=(0, 1, 2))
    gd = gz @ pw.T
    ddb = gd.sum(axis=(0, 1, 2))
    patches = _same_patches(x, 3)
    ddw = np.einsum("bhwcij,bhwc->ijc", patches, gd)
    gpatches = _same_patches(gd, 3)
    dx = np.einsum("bhwcij,ijc->bhwc", gpatches, spec.depthwise[::-1, ::-1])
    return dx, {
        "depthwise": ddw,
        "depthwise_bias": ddb,
        "pointwise": dpw[None, None],
        "pointwise_bias": dpb,
    }


# ---------------------------------------------------------------------------
# max-family pooling


def _pool_windows(x: Tensor, spec: PoolSpec) -> np.ndarray:
    """[B, Ho, Wo, C, ph*pw] window values, each window flattened row-major."""
    _require_4d(x)
    ph, pw = spec.pool
    gh, gw = pool_grid(x.shape[1], x.shape[2], spec.pool, spec.stride)
    s = spec.stride
    v = sliding_window_view(x, (ph, pw), axis=(1, 2))[:, ::s, ::s][:, :gh, :gw]
    return v.reshape(v.shape[:4] + (ph * pw,))


def pool_forward(x: Tensor, spec: PoolSpec) -> tuple[Tensor, tuple]:
    w = _pool_windows(x, spec)
    # argmax/argmin return the first occurrence, i.e. row-major tie-breaking
    amax = w.argmax(axis=-1)
    hi = np.take_along_axis(w, amax[..., None], -1)[..., 0]
    if spec.kind == "max":
        return hi, (x.shape, amax, None)
    amin = w.argmin(axis=-1)
    lo = np.take_along_axis(w, amin[..., None], -1)[..., 0]
    span = hi - lo
    # max + (max - min) rather than 2*max - min keeps the max/maxmin split bit-exact
    out = span if spec.kind == "maxmin" else hi + span
    return out, (x.shape, amax, amin)


def _scatter_windows(dx: Tensor, grad: Tensor, idx: np.ndarray, spec: PoolSpec) -> None:
    B, gh, gw, C = idx.shape
    pw = spec.pool[1]
    s = spec.stride
    bb, ii, jj, cc = np.indices(idx.shape, sparse=False)
    rows = ii * s + idx // pw
    cols = jj * s + idx % pw
    np.add.at(dx, (bb, rows, cols, cc), grad)


def pool_backward(grad: Tensor, spec: PoolSpec, cache) -> Tensor:
    in_shape, amax, amin = cache
    if grad.shape != amax.shape:
        raise ShapeError(f"gradient shape {grad.shape} != pooled shape {amax.shape}")
    dx = np.zeros(in_shape)
    up = {"max": 1.0, "maxmin": 1.0, "twomaxmin": 2.0}[spec.kind]
    _scatter_windows(dx, up * grad, amax, spec)
    if amin is not None:
        _scatter_windows(dx, -grad, amin, spec)
    return dx


# ---------------------------------------------------------------------------
# negative layer


def negative_forward(x: Tensor, spec: NegativeSpec = NegativeSpec()) -> Tensor:
    return spec.reference - x


def negative_backward(grad: Tensor) -> Tensor:
    return -grad


# ---------------------------------------------------------------------------
# global average pooling and concatenation


def gap_forward(x: Tensor) -> tuple[Tensor, tuple]:
    _require_4d(x)
    return x.mean(axis=(1, 2)), x.shape


def gap_backward(grad: Tensor, cache) -> Tensor:
    B, H, W, C = cache
    if grad.shape != (B, C):
        raise ShapeError(f"gradient shape {grad.shape} != ({B}, {C})")
    return np.broadcast_to(grad[:, None, None, :] / (H * W), cache).copy()


def concat_channels(a: Tensor, b: Tensor) -> tuple[Tensor, int]:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"concat expects [B, F] operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"batch mismatch {a.shape[0]} vs {b.shape[0]}")
    if a.shape[1] < 1 or b.shape[1] < 1:
        raise ShapeError("both concat operands need at least one feature")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_backward(grad: Tensor, split: int) -> tuple[Tensor, Tensor]:
    return grad[:, :split].copy(), grad[:, split:].copy()


# ---------------------------------------------------------------------------
# output head


def softmax(logits: Tensor) -> Tensor:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dense_softmax_forward(x: Tensor, spec: DenseSoftmaxSpec) -> tuple[Tensor, tuple]:
    if x.ndim != 2 or x.shape[1] != spec.in_features:
        raise ShapeError(f"expected [B, {spec.in_features}] input, got {x.shape}")
    logits = x @ spec.weights + spec.bias
    return softmax(logits), (x, logits)


def dense_softmax_backward(grad_logits: Tensor, spec: DenseSoftmaxSpec, cache) -> tuple[Tensor, dict]:
    """Backward from the gradient w.r.t. the logits (softmax is fused into the loss)."""
    x, logits = cache
    if grad_logits.shape != logits.shape:
        raise ShapeError(f"gradient shape {grad_logits.shape} != logits shape {logits.shape}")
    return grad_logits @ spec.weights.T, {
        "weights": x.T @ grad_logits,
        "bias": grad_logits.sum(axis=0),
    }
