"""Central finite-difference gradient checks for layers and whole graphs.

Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)`` where
``a`` is the analytic and ``n`` the numeric derivative. The floor (1e-7 by
default) keeps coordinates whose true derivative is numerically zero from
turning roundoff into huge ratios.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import layers as L
from .graph import ModelGraph, build_preset
from .rng import Rng, derive_seed
from .train import cce_loss, one_hot

DEFAULT_EPS = 1e-5
DEFAULT_FLOOR = 1e-7
TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    # (layer id, param name) -> max relative error over the sampled coordinates
    per_param: dict[tuple[str, str], float] = field(default_factory=dict)
    checked: int = 0

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_rel_error < tol


def rel_error(a: float, n: float, floor: float = DEFAULT_FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def _sample(size: int, samples: int, rng: Rng) -> np.ndarray:
    if size <= samples:
        return np.arange(size)
    return np.sort(rng.permutation(size)[:samples])


def check_arrays(loss: Callable[[], float], arrays: dict[str, np.ndarray], analytic: dict[str, np.ndarray],
                 eps: float = DEFAULT_EPS, samples: int = 50, seed: int = 0,
                 floor: float = DEFAULT_FLOOR) -> dict[str, float]:
    """Perturb sampled coordinates of each array in place and compare slopes.

    ``loss`` must read the arrays by reference. Every array is restored.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    out = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)  # view: arrays are C-contiguous
        grad = analytic[name].reshape(-1)
        worst = 0.0
        for i in _sample(flat.size, samples, Rng(derive_seed(seed, f"gradcheck/{name}"))):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss()
            flat[i] = orig - eps
            down = loss()
            flat[i] = orig
            worst = max(worst, rel_error(float(grad[i]), (up - down) / (2 * eps), floor))
        out[name] = worst
    return out


def graph_gradcheck(graph: ModelGraph, x: np.ndarray, labels, eps: float = DEFAULT_EPS, samples: int = 50,
                    seed: int = 0, corrupt: Callable[[dict], None] | None = None) -> GradCheckResult:
    """Check dLoss/dparam for every parameter array of ``graph`` under mean CCE.

    ``corrupt`` receives the analytic gradient dict before comparison; it is a
    hook for negative-control tests.
    """
    targets = one_hot(labels, graph.classes)

    def loss() -> float:
        value = cce_loss(graph.forward(x), targets)[0]
        graph._cache = None
        return value

    _, g = cce_loss(graph.forward(x), targets)
    grads = graph.backward(g)
    if corrupt is not None:
        corrupt(grads)
    arrays = {f"{l}/{n}": a for l, n, a in graph.parameters()}
    analytic = {f"{l}/{n}": grads[l][n] for l, n, _ in graph.parameters()}
    errs = check_arrays(loss, arrays, analytic, eps, samples, seed)
    res = GradCheckResult()
    for key, e in errs.items():
        lid, _, name = key.partition("/")
        res.per_param[(lid, name)] = e
        res.checked += min(arrays[key].size, samples)
    return res


def random_graph_case(preset: str = "vgg_lite_ceem", scale: str = "tiny", seed: int = 1,
                      size: int = 16, batch: int = 2) -> tuple[ModelGraph, np.ndarray, np.ndarray]:
    """A seeded graph with non-zero biases plus a random normalised batch."""
    graph = build_preset(preset, scale, input_shape=(size, size, 1), seed=seed)
    rng = Rng(derive_seed(seed, "gradcheck/case"))
    for lid, name, arr in list(graph.parameters()):
        if "bias" in name:
            graph.set_parameter(lid, name, rng.uniform(arr.size, -0.1, 0.1).reshape(arr.shape))
    x = rng.uniform(batch * size * size).reshape(batch, size, size, 1)
    labels = rng.integers(batch, graph.classes)
    return graph, x, labels


def layer_gradcheck(kind: str, seed: int = 1, eps: float = DEFAULT_EPS, samples: int = 50) -> dict[str, float]:
    """Check parameter and input gradients of one parameterised layer.

    The scalar loss is ``sum(out * r)`` for a fixed random ``r`` (for
    ``dense_softmax`` the projection is applied to the probabilities and the
    softmax Jacobian is folded in analytically).
    """
    rng = np.random.default_rng(derive_seed(seed, f"layer/{kind}"))
    if kind == "conv2d":
        spec = L.Conv2DSpec(3, 4, kernel=3, weights=rng.normal(size=(3, 3, 3, 4)), bias=rng.normal(size=4))
        x = rng.normal(size=(2, 6, 5, 3))
        fwd, bwd = L.conv2d_forward, L.conv2d_backward
    elif kind == "dwsc":
        spec = L.DWSConv2DSpec(3, 4, depthwise=rng.normal(size=(3, 3, 3)), depthwise_bias=rng.normal(size=3),
                               pointwise=rng.normal(size=(1, 1, 3, 4)), pointwise_bias=rng.normal(size=4))
        x = rng.normal(size=(2, 6, 5, 3))
        fwd, bwd = L.dwsc_forward, L.dwsc_backward
    elif kind == "dense_softmax":
        spec = L.DenseSoftmaxSpec(5, 4, weights=rng.normal(size=(5, 4)), bias=rng.normal(size=4))
        x = rng.normal(size=(3, 5))
        fwd = L.dense_softmax_forward

        def bwd(g, spec, cache):
            p = L.softmax(cache[1])
            return L.dense_softmax_backward(p * (g - (g * p).sum(axis=1, keepdims=True)), spec, cache)
    else:
        raise ValueError(f"no parameterised layer kind {kind!r}")
    out, cache = fwd(x, spec)
    r = rng.normal(size=out.shape)
    dx, dp = bwd(r, spec, cache)
    arrays = {n: getattr(spec, n) for n in dp}
    arrays["input"] = x
    dp["input"] = dx
    return check_arrays(lambda: float((fwd(x, spec)[0] * r).sum()), arrays, dp, eps, samples, seed)
