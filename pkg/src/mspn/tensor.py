"""Variable-width feature-map storage and row reductions.

Arrays follow the layout ``(..., n_map, h, w)``: map-major, then row-major, so
a row reduction is a contiguous scan over the last axis.  Any leading axes are
treated as a batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError

MODES = ("max", "average")


@dataclass(frozen=True)
class FeatureMapStack:
    """A single sample's stack of 2-D response maps, shape ``(n_map, h, w)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ContractError(f"expected (n_map, h, w) array, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ContractError(f"all dimensions must be >= 1, got {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_flat(cls, n_map: int, h: int, w: int, values, dtype=np.float64):
        values = np.asarray(values, dtype=dtype)
        if values.size != n_map * h * w:
            raise ContractError(
                f"{values.size} values cannot fill {n_map}x{h}x{w} maps"
            )
        return cls(values.reshape(n_map, h, w))

    @property
    def n_map(self) -> int:
        return self.data.shape[0]

    @property
    def h(self) -> int:
        return self.data.shape[1]

    @property
    def w(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class RowReduceCache:
    mode: str
    shape: tuple
    argmax: np.ndarray | None = None


def _as_array(maps) -> np.ndarray:
    if isinstance(maps, FeatureMapStack):
        return maps.data
    arr = np.asarray(maps)
    if arr.ndim < 3:
        raise ContractError(f"expected (..., n_map, h, w) array, got shape {arr.shape}")
    return arr


def row_reduce(maps, mode: str = "max"):
    """Reduce every row of every map to one value.

    Returns ``(vector, cache)`` where ``vector`` has shape ``(..., n_map * h)``
    and element ``m * h + r`` is the max (or mean) of row ``r`` in map ``m``.
    For ``mode="max"`` the cache holds the winning column per row; ties go to
    the lowest column index.
    """
    if mode not in MODES:
        raise ContractError(f"unknown row_reduce mode {mode!r}")
    x = _as_array(maps)
    lead = x.shape[:-3]
    n_map, h, _ = x.shape[-3:]
    if mode == "max":
        idx = np.argmax(x, axis=-1)
        out = np.take_along_axis(x, idx[..., None], axis=-1)[..., 0]
        cache = RowReduceCache(mode, x.shape, idx)
    else:
        out = x.mean(axis=-1)
        cache = RowReduceCache(mode, x.shape)
    return out.reshape(*lead, n_map * h), cache


def row_reduce_backward(grad_out, cache: RowReduceCache) -> np.ndarray:
    """Scatter a row-reduced gradient back onto the input maps."""
    shape = cache.shape
    n_map, h, w = shape[-3:]
    grad_out = np.asarray(grad_out)
    if grad_out.shape != shape[:-3] + (n_map * h,):
        raise ContractError(
            f"gradient shape {grad_out.shape} does not match pooled length {n_map * h}"
        )
    g = grad_out.reshape(shape[:-1])
    if cache.mode == "max":
        grad_in = np.zeros(shape, dtype=grad_out.dtype)
        np.put_along_axis(grad_in, cache.argmax[..., None], g[..., None], axis=-1)
        return grad_in
    return np.broadcast_to((g / w)[..., None], shape).copy()


def concat(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Join flat vectors end to end along the last axis, preserving order."""
    if len(vectors) == 0:
        raise ContractError("concat needs at least one input")
    return np.concatenate([np.asarray(v) for v in vectors], axis=-1)


def split(vector: np.ndarray, lengths: Sequence[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat` for known part lengths."""
    vector = np.asarray(vector)
    if sum(lengths) != vector.shape[-1]:
        raise ContractError(
            f"part lengths sum to {sum(lengths)}, vector has {vector.shape[-1]}"
        )
    edges = np.cumsum(lengths)[:-1]
    return [part.copy() for part in np.split(vector, edges, axis=-1)]
