"""Dense voxel grids with differentiable trilinear lookups.

Grids store channel-major tensors over an axis-aligned bounding box. Queries
outside the box return zeros (empty space); gradients flow both into the grid
values and the query positions.
"""

from __future__ import annotations

import math

import torch

from .autodiff import ParamTensor, softmax
from .errors import ConfigError, DimensionError

__all__ = [
    "DenseGrid",
    "OccupancyGrid",
    "world_to_grid",
    "trilinear_interp",
    "multi_distance_interp",
    "occupancy_probs",
]


def _as_tensor3(v, dtype, device) -> torch.Tensor:
    t = torch.as_tensor(v, dtype=dtype, device=device)
    if t.shape != (3,):
        raise DimensionError(f"expected a 3-vector, got shape {tuple(t.shape)}")
    return t


class DenseGrid:
    """C-channel dense grid whose nodes span ``bbox_min``..``bbox_max``."""

    def __init__(self, name, channels, extents, bbox_min, bbox_max, values=None,
                 dtype=torch.float32):
        extents = tuple(int(n) for n in extents)
        if len(extents) != 3 or any(n < 2 for n in extents):
            raise DimensionError("grid extents must be three counts >= 2")
        self.channels = int(channels)
        self.extents = extents
        self.bbox_min = _as_tensor3(bbox_min, dtype, "cpu")
        self.bbox_max = _as_tensor3(bbox_max, dtype, "cpu")
        if not (self.bbox_min < self.bbox_max).all():
            raise DimensionError("bbox min must be strictly below bbox max per axis")
        shape = (self.channels, *extents)
        if values is None:
            values = torch.zeros(shape, dtype=dtype)
        if tuple(values.shape) != shape:
            raise DimensionError(f"grid values must have shape {shape}, got {tuple(values.shape)}")
        self.values = ParamTensor(name, values.to(dtype))

    @property
    def dtype(self):
        return self.values.data.dtype

    def voxel_size(self) -> torch.Tensor:
        n = torch.tensor([e - 1 for e in self.extents], dtype=self.dtype)
        return (self.bbox_max - self.bbox_min) / n

    def node_positions(self) -> torch.Tensor:
        """World positions of every grid node, shape (Nx*Ny*Nz, 3)."""
        axes = [
            torch.linspace(self.bbox_min[i], self.bbox_max[i], self.extents[i], dtype=self.dtype)
            for i in range(3)
        ]
        gx, gy, gz = torch.meshgrid(*axes, indexing="ij")
        return torch.stack((gx, gy, gz), dim=-1).reshape(-1, 3)

    def strided_view(self, stride: int) -> "_GridView":
        """Coarser view sampling every ``stride``-th node; shares storage."""
        if stride < 1:
            raise ConfigError("stride must be >= 1")
        n_view = [(n + stride - 1) // stride for n in self.extents]
        if any(n < 2 for n in n_view):
            raise ConfigError(
                f"stride {stride} leaves fewer than 2 nodes per axis for extents {self.extents}"
            )
        vals = self.values.data[:, ::stride, ::stride, ::stride]
        edge = self.voxel_size()
        bmax = self.bbox_min + edge * torch.tensor(
            [(n - 1) * stride for n in n_view], dtype=self.dtype
        )
        return _GridView(vals, self.bbox_min, bmax)


class _GridView:
    """Lightweight interpolation target over a (possibly strided) value tensor."""

    def __init__(self, values: torch.Tensor, bbox_min: torch.Tensor, bbox_max: torch.Tensor):
        self.values = values
        self.bbox_min = bbox_min
        self.bbox_max = bbox_max
        self.extents = tuple(values.shape[1:])


def world_to_grid(grid, x: torch.Tensor):
    """Map world points to continuous grid coordinates.

    Returns ``(coords, in_bounds)`` where ``coords`` sends ``bbox_min`` to
    ``(0,0,0)`` and ``bbox_max`` to ``(Nx-1, Ny-1, Nz-1)``. Out-of-bounds is a
    status flag, never an error.
    """
    n = torch.tensor([e - 1 for e in grid.extents], dtype=x.dtype, device=x.device)
    bmin = grid.bbox_min.to(x.dtype)
    bmax = grid.bbox_max.to(x.dtype)
    coords = (x - bmin) / (bmax - bmin) * n
    in_bounds = ((coords >= 0) & (coords <= n)).all(dim=-1)
    return coords, in_bounds


def _interp_values(values: torch.Tensor, coords: torch.Tensor,
                   in_bounds: torch.Tensor) -> torch.Tensor:
    """8-corner blend of ``values`` (C,Nx,Ny,Nz) at continuous ``coords`` (...,3)."""
    nx, ny, nz = values.shape[1:]
    flat = coords.reshape(-1, 3)
    base = flat.detach().floor().long()
    base[:, 0].clamp_(0, nx - 2)
    base[:, 1].clamp_(0, ny - 2)
    base[:, 2].clamp_(0, nz - 2)
    frac = flat - base.to(flat.dtype)
    vflat = values.reshape(values.shape[0], -1)
    out = None
    for corner in range(8):
        dx, dy, dz = (corner >> 2) & 1, (corner >> 1) & 1, corner & 1
        idx = ((base[:, 0] + dx) * ny + (base[:, 1] + dy)) * nz + (base[:, 2] + dz)
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
        wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
        w = (wx * wy * wz).unsqueeze(-1)
        contrib = w * vflat[:, idx].t()
        out = contrib if out is None else out + contrib
    out = out * in_bounds.reshape(-1, 1).to(out.dtype)
    return out.reshape(*coords.shape[:-1], values.shape[0])


def trilinear_interp(grid, x: torch.Tensor) -> torch.Tensor:
    """Trilinear lookup of the grid at world points ``x`` (..., 3) -> (..., C)."""
    values = grid.values.data if isinstance(grid.values, ParamTensor) else grid.values
    coords, in_bounds = world_to_grid(grid, x)
    return _interp_values(values, coords, in_bounds)


def multi_distance_interp(grid: DenseGrid, x: torch.Tensor, strides) -> torch.Tensor:
    """Concatenate lookups at the base grid and every strided view of it."""
    parts = [trilinear_interp(grid, x)]
    for s in strides:
        parts.append(trilinear_interp(grid.strided_view(int(s)), x))
    if len(parts) == 1:
        return parts[0]
    return torch.cat(parts, dim=-1)


class OccupancyGrid:
    """Per-object logits on a dense lattice; one channel per slot."""

    def __init__(self, name, slots, extents, bbox_min, bbox_max, values=None,
                 dtype=torch.float32):
        if slots < 2:
            raise DimensionError("occupancy grid requires at least 2 slots")
        self.slots = int(slots)
        self._grid = DenseGrid(name, slots, extents, bbox_min, bbox_max, values, dtype)

    @property
    def values(self) -> ParamTensor:
        return self._grid.values

    @property
    def extents(self):
        return self._grid.extents

    @property
    def bbox_min(self):
        return self._grid.bbox_min

    @property
    def bbox_max(self):
        return self._grid.bbox_max

    def voxel_size(self):
        return self._grid.voxel_size()

    def node_positions(self):
        return self._grid.node_positions()


def occupancy_probs(occ: OccupancyGrid, x_canonical: torch.Tensor) -> torch.Tensor:
    """Interpolated logits followed by a unit-temperature softmax over slots."""
    logits = trilinear_interp(occ._grid, x_canonical)
    return softmax(logits, 1.0, dim=-1)


def empty_like_logits(occ: OccupancyGrid) -> torch.Tensor:
    return torch.zeros((occ.slots, *occ.extents), dtype=occ._grid.dtype)
