"""Scalar and vector fields on regular 3D grids.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x. Flattening for
patches and file I/O uses Fortran order so that x varies fastest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import _loops


def _triple(values, kind, name):
    t = tuple(kind(v) for v in values)
    if len(t) != 3:
        raise ValueError(f"{name} must have three components, got {len(t)}")
    return t


@dataclass(frozen=True)
class Grid:
    """Geometry shared by all fields: voxel counts, spacing (mm), origin (mm)."""

    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", _triple(self.dims, int, "dims"))
        object.__setattr__(self, "spacing", _triple(self.spacing, float, "spacing"))
        object.__setattr__(self, "origin", _triple(self.origin, float, "origin"))
        if min(self.dims) < 1:
            raise ValueError(f"dims must be positive, got {self.dims}")
        if not all(np.isfinite(self.spacing)) or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        if not all(np.isfinite(self.origin)):
            raise ValueError("origin must be finite")

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def extent(self):
        """Physical bounding box ``(lo, hi)`` of the voxel centres."""
        lo = np.asarray(self.origin)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        return lo, hi

    def coordinates(self) -> np.ndarray:
        """Voxel centres in mm, shape ``dims + (3,)``."""
        axes = [
            o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.dims)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_index(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return (p - np.asarray(self.origin)) / np.asarray(self.spacing)

    def to_mm(self, index) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(
            self.spacing
        )

    def matches(self, other: "Grid", tol: float = 1e-9) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
        )


def _freeze(a):
    a.setflags(write=False)
    return a


class _Field:
    ncomp = 1

    def __init__(self, grid: Grid, data):
        if not isinstance(grid, Grid):
            grid = Grid(*grid)
        arr = np.array(data, dtype=self._dtype, copy=True)
        shape = grid.dims if self.ncomp == 1 else grid.dims + (self.ncomp,)
        if arr.ndim == 1 and arr.size == int(np.prod(shape)):
            if self.ncomp == 1:
                arr = arr.reshape(grid.dims, order="F")
            else:
                arr = arr.reshape((-1, self.ncomp)).reshape(shape, order="F")
        elif arr.ndim == 2 and arr.shape == (grid.size, self.ncomp):
            arr = arr.reshape(shape, order="F")
        if arr.shape != shape:
            raise ValueError(
                f"data shape {arr.shape} does not match grid {shape}"
            )
        self._check(arr)
        self.grid = grid
        self.data = _freeze(np.ascontiguousarray(arr))

    _dtype = np.float64

    def _check(self, arr):
        if not np.all(np.isfinite(arr)):
            raise ValueError("field values must be finite")

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def origin(self):
        return self.grid.origin

    def flat(self) -> np.ndarray:
        """Values in x-fastest order (vectors as rows)."""
        if self.ncomp == 1:
            return self.data.ravel(order="F")
        return self.data.reshape((-1, self.ncomp), order="F")

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.dims}, spacing={self.spacing})"


class Volume3(_Field):
    """Real scalar image on a :class:`Grid`."""

    def with_data(self, data) -> "Volume3":
        return Volume3(self.grid, data)


class LabelVolume(_Field):
    """Non-negative integer labels on a :class:`Grid`."""

    _dtype = np.int64

    def _check(self, arr):
        if arr.size and arr.min() < 0:
            raise ValueError("labels must be non-negative")

    def mask(self, label=None) -> np.ndarray:
        if label is None:
            return self.data > 0
        return self.data == label

    def labels(self):
        return [int(v) for v in np.unique(self.data) if v > 0]


class VectorField(_Field):
    """Field of 3-vectors in mm, shape ``dims + (3,)``."""

    ncomp = 3

    def __neg__(self):
        return type(self)(self.grid, -self.data)

    def __add__(self, other):
        _require_same_grid(self.grid, other.grid)
        return type(self)(self.grid, self.data + other.data)

    def index_units(self) -> np.ndarray:
        return self.data / np.asarray(self.grid.spacing)

    def max_norm(self) -> float:
        return float(np.sqrt((self.data ** 2).sum(axis=-1)).max())


class DisplacementField(VectorField):
    """``phi(x) - x`` in mm."""


class VelocityField(VectorField):
    """Instantaneous stationary velocity in mm."""


def _require_same_grid(a: Grid, b: Grid, what="grids"):
    if not a.matches(b):
        raise ValueError(f"{what} differ: {a} vs {b}")


# -- sampling --------------------------------------------------------------


def _as4(data):
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., None]
    return np.ascontiguousarray(arr)


def sample_points(field: _Field, points) -> np.ndarray:
    """Trilinear samples at physical points (M, 3), clamped to the grid."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample points must be finite")
    idx = np.ascontiguousarray(field.grid.to_index(pts))
    out = _loops.sample_points(_as4(field.data), idx)
    return out[:, 0] if field.data.ndim == 3 else out


def sample_trilinear(vol: Volume3, point) -> float:
    """Value of ``vol`` at one physical point.

    Points outside the grid are clamped to the nearest edge voxel first.
    """
    p = np.asarray(point, dtype=float).reshape(3)
    return float(sample_points(vol, p[None, :])[0])


def gradient_central(vol: Volume3) -> np.ndarray:
    """Spatial gradient (intensity per mm), shape ``dims + (3,)``.

    Central differences inside, one-sided differences on the faces.
    """
    if min(vol.dims) < 2:
        raise ValueError(f"gradient needs at least 2 voxels per axis, got {vol.dims}")
    return np.stack(np.gradient(vol.data, *vol.spacing, edge_order=1), axis=-1)


def warp_array(data: np.ndarray, grid: Grid, disp: DisplacementField) -> np.ndarray:
    """Resample a raw array (scalar or vector valued) at ``x + disp(x)``."""
    _require_same_grid(grid, disp.grid, "displacement grid")
    out = _loops.warp_grid(_as4(data), np.ascontiguousarray(disp.index_units()))
    return out[..., 0] if np.ndim(data) == 3 else out


def warp(vol: Volume3, disp: DisplacementField) -> Volume3:
    """``out(x) = vol(x + disp(x))`` with trilinear interpolation."""
    return Volume3(vol.grid, warp_array(vol.data, vol.grid, disp))


def warp_labels(labels: LabelVolume, disp: DisplacementField) -> LabelVolume:
    """Nearest-neighbour resampling of a label volume."""
    _require_same_grid(labels.grid, disp.grid, "displacement grid")
    idx = np.indices(labels.dims).transpose(1, 2, 3, 0) + disp.index_units()
    idx = np.rint(idx).astype(np.int64)
    for a, n in enumerate(labels.dims):
        np.clip(idx[..., a], 0, n - 1, out=idx[..., a])
    return LabelVolume(labels.grid, labels.data[idx[..., 0], idx[..., 1], idx[..., 2]])


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Displacement of ``outer o inner``: ``d(x) = inner(x) + outer(x + inner(x))``."""
    moved = warp_array(outer.data, outer.grid, inner)
    return DisplacementField(inner.grid, inner.data + moved)


# -- patches ---------------------------------------------------------------


@dataclass(frozen=True)
class PatchPartition:
    """Disjoint axis-aligned blocks tiling a grid."""

    dims: tuple
    patch_edge: int
    patches: tuple = field(repr=False)

    @property
    def count(self) -> int:
        return len(self.patches)

    def slices(self, j):
        start, ext = self.patches[j]
        return tuple(slice(s, s + e) for s, e in zip(start, ext))

    def extract(self, arr: np.ndarray, j) -> np.ndarray:
        """Values of ``arr`` inside patch ``j``, flattened x-fastest."""
        return arr[self.slices(j)].ravel(order="F")

    def assign(self, out: np.ndarray, j, values) -> None:
        start, ext = self.patches[j]
        out[self.slices(j)] = np.asarray(values).reshape(ext, order="F")

    def groups(self) -> dict:
        """Patch indices grouped by extent, in partition order."""
        out: dict = {}
        for j, (_, ext) in enumerate(self.patches):
            out.setdefault(ext, []).append(j)
        return out

    def __iter__(self) -> Iterator:
        return iter(self.patches)


def make_partition(dims, patch_edge: int) -> PatchPartition:
    """Tile ``dims`` with cubes of ``patch_edge`` voxels, truncated at the far faces.

    Ordering is z-major, then y, then x.
    """
    dims = _triple(dims, int, "dims")
    patch_edge = int(patch_edge)
    if patch_edge < 1:
        raise ValueError("patch_edge must be >= 1")
    starts = [range(0, n, patch_edge) for n in dims]
    patches = []
    for z in starts[2]:
        for y in starts[1]:
            for x in starts[0]:
                start = (x, y, z)
                ext = tuple(min(patch_edge, n - s) for s, n in zip(start, dims))
                patches.append((start, ext))
    return PatchPartition(dims, patch_edge, tuple(patches))


def patch_coordinates(grid: Grid, start, extent) -> np.ndarray:
    """Physical voxel centres of a block, (n, 3), x-fastest."""
    axes = [
        grid.origin[a] + grid.spacing[a] * (start[a] + np.arange(extent[a]))
        for a in range(3)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel(order="F") for m in mesh], axis=1)


def normalize_intensities(volumes):
    """Map a cohort linearly onto [0, 1] with one shared slope and offset.

    Returns ``(scaled, scale, offset)`` with ``original = scaled * scale + offset``.
    """
    lo = min(float(v.data.min()) for v in volumes)
    hi = max(float(v.data.max()) for v in volumes)
    scale = hi - lo if hi > lo else 1.0
    scaled = [Volume3(v.grid, (v.data - lo) / scale) for v in volumes]
    return scaled, scale, lo
