"""Tensor substrate.

Tensors are ``numpy.ndarray`` values of dtype float64 in C order, so the
row-major flat index of ``(b, y, x, c)`` in a ``[B, H, W, C]`` tensor is
``((b * H + y) * W + x) * C + c``. The helpers here add the shape checks the
layers rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ShapeError

Tensor = np.ndarray


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def zeros(shape: Sequence[int]) -> Tensor:
    return np.zeros(_check_shape(shape), dtype=np.float64)


def as_tensor(data, shape: Sequence[int] | None = None) -> Tensor:
    """Build a tensor from nested data or a flat sequence plus ``shape``."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = _check_shape(shape)
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"{arr.size} values do not fill shape {shape}")
        arr = arr.reshape(shape)
    else:
        _check_shape(arr.shape)
    return np.ascontiguousarray(arr)


def flat_index(shape: Sequence[int], index: Sequence[int]) -> int:
    """Row-major offset of ``index`` inside ``shape``."""
    if len(index) != len(shape):
        raise ShapeError(f"index {tuple(index)} does not match rank {len(shape)}")
    off = 0
    for i, d in zip(index, shape):
        if not 0 <= i < d:
            raise ShapeError(f"index {tuple(index)} out of range for {tuple(shape)}")
        off = off * d + i
    return off


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_OPS)}") from None
    return fn(a, b)


def pool_grid(h: int, w: int, pool: tuple[int, int], stride: int) -> tuple[int, int]:
    """Output grid of a valid-padding window sweep."""
    ph, pw = pool
    if stride < 1 or ph < 1 or pw < 1:
        raise ShapeError(f"pool {pool} and stride {stride} must be >= 1")
    if h < ph or w < pw:
        raise ShapeError(f"plane {h}x{w} is smaller than pool {ph}x{pw}")
    return (h - ph) // stride + 1, (w - pw) // stride + 1


@dataclass(frozen=True)
class WindowView:
    origin: tuple[int, int]
    size: tuple[int, int]
    values: np.ndarray  # shape == size

    @property
    def max(self) -> float:
        return float(self.values.max())

    @property
    def min(self) -> float:
        return float(self.values.min())

    def mode(self) -> float:
        """Most frequent value; smallest wins on ties."""
        vals, counts = np.unique(self.values, return_counts=True)
        return float(vals[np.argmax(counts)])

    def deviations(self, reference: float | None = None) -> tuple[float, float]:
        """Largest upward and downward departures from ``reference`` (default: mode)."""
        a = self.mode() if reference is None else reference
        return self.max - a, a - self.min


def windows(plane: Tensor, pool: tuple[int, int], stride: int) -> Iterator[WindowView]:
    """Row-major sweep of valid windows over a 2-D plane."""
    if plane.ndim != 2:
        raise ShapeError(f"expected a 2-D plane, got shape {plane.shape}")
    gh, gw = pool_grid(*plane.shape, pool, stride)
    ph, pw = pool
    for i in range(gh):
        for j in range(gw):
            r, c = i * stride, j * stride
            yield WindowView((r, c), (ph, pw), plane[r:r + ph, c:c + pw])
