"""Unit partitions, multi-head attention inside units, and its cost model.

Patches are addressed by their flat row-major index over a ``(d, h, w)`` grid.
A local unit is a contiguous ``u_d x u_h x u_w`` brick; a global unit samples
one patch every ``g = grid / unit`` positions along each axis, so both modes
produce the same number of equally sized units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import (Tensor, index_select, linear, matmul, mul, permute, reshape,
                     softmax_lastdim)

_AXES = ("depth", "height", "width")


class GridDims(NamedTuple):
    d: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.d * self.h * self.w


class UnitDims(NamedTuple):
    d: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.d * self.h * self.w


def dilation(grid: GridDims, unit: UnitDims) -> tuple[int, int, int]:
    """Per-axis sampling stride ``g`` with ``grid == g * unit``."""
    for axis, n, u in zip(_AXES, grid, unit):
        if n <= 0 or u <= 0:
            raise ConfigurationError(f"non-positive {axis} extent: grid {n}, unit {u}")
        if n % u:
            raise ConfigurationError(f"{axis} grid extent {n} is not divisible by unit extent {u}")
    return tuple(n // u for n, u in zip(grid, unit))


@dataclass(frozen=True)
class UnitPartition:
    """Bijection between flat patch indices and ``(unit, slot)`` pairs.

    ``forward_index[p] == (unit, slot)`` and ``inverse_index[unit, slot] == p``.
    """

    mode: str
    grid: GridDims
    unit: UnitDims
    forward_index: np.ndarray
    inverse_index: np.ndarray

    @property
    def num_units(self) -> int:
        return self.inverse_index.shape[0]

    @property
    def slots(self) -> int:
        return self.inverse_index.shape[1]

    @property
    def gather_order(self) -> np.ndarray:
        """Patch index for each row of the ``[units * slots]`` gathered layout."""
        return self.inverse_index.reshape(-1)

    @property
    def scatter_order(self) -> np.ndarray:
        """Row of the gathered layout holding each patch."""
        return self.forward_index[:, 0] * self.slots + self.forward_index[:, 1]


def _partition(grid: GridDims, unit: UnitDims, mode: str) -> UnitPartition:
    grid, unit = GridDims(*grid), UnitDims(*unit)
    g = dilation(grid, unit)
    # unit coordinate (a, b, c) and slot coordinate (i, j, k) per axis
    a, b, c, i, j, k = np.meshgrid(*(np.arange(n) for n in (*g, *unit)), indexing="ij")
    if mode == "local":
        pd, ph, pw = a * unit.d + i, b * unit.h + j, c * unit.w + k
    else:
        pd, ph, pw = a + i * g[0], b + j * g[1], c + k * g[2]
    inverse = ((pd * grid.h + ph) * grid.w + pw).reshape(g[0] * g[1] * g[2], unit.size)
    forward = np.empty((grid.size, 2), dtype=np.int64)
    forward[inverse.reshape(-1)] = np.stack(
        np.meshgrid(np.arange(inverse.shape[0]), np.arange(unit.size), indexing="ij"),
        axis=-1).reshape(-1, 2)
    return UnitPartition(mode, grid, unit, forward, inverse.astype(np.int64))


def partition_local(grid: GridDims, unit: UnitDims) -> UnitPartition:
    """Contiguous bricks, enumerated row-major; slots row-major within a brick."""
    return _partition(grid, unit, "local")


def partition_global(grid: GridDims, unit: UnitDims) -> UnitPartition:
    """Dilated units: unit with offset ``o`` holds patches ``o + slot * g``."""
    return _partition(grid, unit, "global")


@dataclass
class AttentionParams:
    heads: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @property
    def channels(self) -> int:
        return self.wq.shape[0]


def unit_attention(tokens: Tensor, params: AttentionParams) -> Tensor:
    """Scaled dot-product multi-head attention independently within each unit.

    ``tokens`` is ``[units, slots, C]``; queries only see keys of their own unit.
    """
    if tokens.ndim != 3:
        raise DimensionError(f"expected [units, slots, C], got {tokens.shape}")
    units, slots, c = tokens.shape
    heads = params.heads
    if heads <= 0 or c % heads:
        raise ConfigurationError(f"{heads} heads do not divide {c} channels")
    hd = c // heads

    def split(w, b):
        return permute(reshape(linear(tokens, w, b), (units, slots, heads, hd)), (0, 2, 1, 3))

    q = split(params.wq, params.bq)
    k = split(params.wk, params.bk)
    v = split(params.wv, params.bv)
    scores = mul(matmul(q, permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    mixed = matmul(softmax_lastdim(scores), v)
    merged = reshape(permute(mixed, (0, 2, 1, 3)), (units, slots, c))
    return linear(merged, params.wo, params.bo)


def partitioned_attention(x: Tensor, part: UnitPartition, params: AttentionParams) -> Tensor:
    """Gather tokens into units, attend, and scatter back to patch order."""
    n, c = x.shape
    if n != part.grid.size:
        raise DimensionError(f"{n} tokens do not match grid {tuple(part.grid)}")
    units = reshape(index_select(x, part.gather_order), (part.num_units, part.slots, c))
    out = unit_attention(units, params)
    return index_select(reshape(out, (n, c)), part.scatter_order)


def ls_msa(x: Tensor, grid: GridDims, unit: UnitDims, params: AttentionParams) -> Tensor:
    if x.ndim != 2 or x.shape[0] != GridDims(*grid).size:
        raise DimensionError(f"tokens {x.shape} do not match grid {tuple(grid)}")
    return partitioned_attention(x, partition_local(grid, unit), params)


def gs_msa(x: Tensor, grid: GridDims, unit: UnitDims, params: AttentionParams) -> Tensor:
    if x.ndim != 2 or x.shape[0] != GridDims(*grid).size:
        raise DimensionError(f"tokens {x.shape} do not match grid {tuple(grid)}")
    return partitioned_attention(x, partition_global(grid, unit), params)


def attention_complexity(grid: GridDims, channels: int, unit: UnitDims | None = None) -> int:
    """Multiplies of one (LS/GS-)MSA layer: projections plus score and mixing products.

    Without ``unit`` every patch attends to every other patch.
    """
    n = GridDims(*grid).size
    if n <= 0 or channels <= 0:
        raise ConfigurationError("grid and channels must be positive")
    span = n if unit is None else UnitDims(*unit).size
    if unit is not None:
        dilation(GridDims(*grid), UnitDims(*unit))
    return 4 * n * channels * channels + 2 * span * n * channels
