"""Compactly supported Wendland kernels, control lattices and Gram matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .volume import Grid, patch_coordinates


def wendland_profile(t):
    """``(1 - t)_+^4 (4 t + 1)``, the C2 Wendland function for d <= 3."""
    t = np.asarray(t, dtype=float)
    r = np.clip(1.0 - t, 0.0, None)
    return r ** 4 * (4.0 * t + 1.0)


@dataclass(frozen=True)
class WendlandKernel:
    support: float

    def __post_init__(self):
        if not (self.support > 0 and math.isfinite(self.support)):
            raise ValueError(f"support must be positive, got {self.support}")

    def of_distance(self, dist):
        return wendland_profile(np.asarray(dist, dtype=float) / self.support)

    def __call__(self, a, b):
        d = np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), axis=-1)
        return self.of_distance(d)


def wendland_eval(kernel: WendlandKernel, a, b) -> float:
    """Kernel value between two points; exactly zero at or beyond the support."""
    return float(kernel(a, b))


@dataclass(frozen=True)
class ControlGrid:
    """Regular lattice of kernel centres.

    Node ``(i, j, k)`` sits at ``start + spacing * (i, j, k)``. Flat centre
    ordering is x fastest, matching voxel flattening.
    """

    start: tuple
    spacing: float
    counts: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def centers(self) -> np.ndarray:
        axes = [s + self.spacing * np.arange(n) for s, n in zip(self.start, self.counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel(order="F") for m in mesh], axis=1)

    def to_lattice(self, coeffs) -> np.ndarray:
        """(N, C) flat coefficients -> (Lx, Ly, Lz, C) lattice array."""
        c = np.asarray(coeffs, dtype=float)
        ncomp = c.shape[1]
        return np.ascontiguousarray(
            c.T.reshape((ncomp,) + tuple(self.counts), order="F").transpose(1, 2, 3, 0)
        )

    def from_lattice(self, arr) -> np.ndarray:
        arr = np.asarray(arr)
        ncomp = arr.shape[-1]
        return arr.transpose(3, 0, 1, 2).reshape((ncomp, -1), order="F").T.copy()


def make_control_grid(lo, hi, spacing: float) -> ControlGrid:
    """Lattice covering ``[lo, hi]`` with one extra layer of nodes beyond each face.

    Per axis the covering part has ``max(ceil(extent / spacing) + 1, 2)``
    nodes starting at ``lo``.
    """
    spacing = float(spacing)
    if not spacing > 0:
        raise ValueError("control spacing must be positive")
    lo = np.asarray(lo, dtype=float).reshape(3)
    hi = np.asarray(hi, dtype=float).reshape(3)
    counts = []
    for a in range(3):
        n = math.ceil((hi[a] - lo[a]) / spacing - 1e-9) + 1
        counts.append(max(n, 2) + 2)
    start = tuple(float(v) for v in lo - spacing)
    return ControlGrid(start, spacing, tuple(counts))


def control_grid_for(grid: Grid, spacing: float) -> ControlGrid:
    lo, hi = grid.extent
    return make_control_grid(lo, hi, spacing)


def _pairs_within(a, b, radius):
    ta, tb = cKDTree(a), cKDTree(b)
    rec = ta.sparse_distance_matrix(tb, radius, output_type="ndarray")
    return rec["i"], rec["j"], rec["v"]


def gram(kernel: WendlandKernel, centers) -> sp.csr_matrix:
    """Sparse Gram matrix ``K(c_i, c_j)`` (pairs within the support only)."""
    return basis_matrix(kernel, centers, centers)


def basis_matrix(kernel: WendlandKernel, centers, points) -> sp.csr_matrix:
    """Sparse ``(n_points, n_centers)`` matrix of ``K(x_p, c_i)``."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    points = np.atleast_2d(np.asarray(points, dtype=float))
    i, j, d = _pairs_within(points, centers, kernel.support)
    vals = kernel.of_distance(d)
    keep = vals != 0.0
    m = sp.coo_matrix(
        (vals[keep], (i[keep], j[keep])), shape=(len(points), len(centers))
    )
    return m.tocsr()


def dense_kernel_matrix(kernel: WendlandKernel, a, b) -> np.ndarray:
    """Dense brute-force kernel matrix, used for small blocks."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return kernel.of_distance(d)


@lru_cache(maxsize=16)
def _patch_eigh(extent, spacing, support):
    pts = patch_coordinates(Grid(extent, spacing), (0, 0, 0), extent)
    k = dense_kernel_matrix(WendlandKernel(support), pts, pts)
    evals, evecs = np.linalg.eigh(k)
    evals = np.clip(evals, 0.0, None)
    evals.setflags(write=False)
    evecs.setflags(write=False)
    return k, evals, evecs


def patch_kernel(extent, spacing, support):
    """Bias kernel over one patch and its eigendecomposition.

    The matrix only depends on the patch extent, so it is shared by all
    patches of the same shape. Returns ``(K, eigenvalues, eigenvectors)``;
    negative round-off eigenvalues are clipped to zero.
    """
    return _patch_eigh(
        tuple(int(e) for e in extent),
        tuple(float(s) for s in spacing),
        float(support),
    )
