"""Kernel-bundle velocity fields and their exponentials.

A :class:`KernelBundle` fixes the working image grid and one control
lattice plus Wendland kernel per level (coarse to fine). Coefficients live
in :class:`KernelBundleParams`, one ``(N_m, 3)`` array of mm-valued vectors
per level. Levels are indexed from 0 in code.
"""

from __future__ import annotations

import math
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import _loops
from .kernels import WendlandKernel, basis_matrix, control_grid_for, gram
from .volume import (
    DisplacementField,
    Grid,
    VelocityField,
    Volume3,
    gradient_central,
    warp_array,
)

DEFAULT_SPACINGS = (20.0, 10.0, 6.0)
DEFAULT_SUPPORT_FACTOR = 4.0
DEFAULT_STEPS = 16


def _as_int(x, tol=1e-6):
    r = round(x)
    return int(r) if abs(x - r) < tol else None


class BundleLevel:
    """One control lattice and kernel, with fast synthesis on the image grid.

    When the lattice spacing is an integer multiple of the voxel spacing and
    the lattice is aligned with voxel centres, synthesis and its adjoint run
    as strided stencil sums. Otherwise a sparse basis matrix is used.
    """

    def __init__(self, image_grid: Grid, spacing: float, support: float):
        self.image_grid = image_grid
        self.control = control_grid_for(image_grid, spacing)
        self.kernel = WendlandKernel(support)
        # velocity covariances over patches, keyed by patch geometry
        self.patch_cache: dict = {}

    @property
    def spacing(self) -> float:
        return self.control.spacing

    @property
    def n_centers(self) -> int:
        return self.control.size

    @cached_property
    def _aligned(self):
        h = self.image_grid.spacing
        stride, offset = [], []
        for a in range(3):
            s = _as_int(self.control.spacing / h[a])
            o = _as_int((self.control.start[a] - self.image_grid.origin[a]) / h[a])
            if s is None or o is None or s < 1:
                return None
            stride.append(s)
            offset.append(o)
        radius = [int(math.floor(self.kernel.support / h[a] + 1e-9)) for a in range(3)]
        axes = [np.arange(-r, r + 1) * h[a] for a, r in enumerate(radius)]
        dx, dy, dz = np.meshgrid(*axes, indexing="ij")
        stencil = self.kernel.of_distance(np.sqrt(dx ** 2 + dy ** 2 + dz ** 2))
        return (
            np.ascontiguousarray(stencil),
            np.array(offset, dtype=np.int64),
            np.array(stride, dtype=np.int64),
        )

    @cached_property
    def basis(self) -> sp.csr_matrix:
        """Sparse ``(n_voxels, n_centers)`` basis, voxels x-fastest."""
        pts = self.image_grid.coordinates().reshape(-1, 3, order="F")
        return basis_matrix(self.kernel, self.control.centers, pts)

    @cached_property
    def gram(self) -> sp.csr_matrix:
        return gram(self.kernel, self.control.centers)

    def synthesize(self, coeffs) -> np.ndarray:
        """``sum_i K(x - c_i) coeffs_i`` at every voxel, shape ``dims + (C,)``."""
        coeffs = np.asarray(coeffs, dtype=float)
        fast = self._aligned
        if fast is not None:
            stencil, offset, stride = fast
            out = _loops.lattice_synthesize(
                self.control.to_lattice(coeffs),
                stencil,
                offset,
                stride,
                np.array(self.image_grid.dims, dtype=np.int64),
            )
            return np.moveaxis(out, 0, -1)
        flat = self.basis @ coeffs
        ncomp = coeffs.shape[1]
        return flat.reshape(self.image_grid.dims + (ncomp,), order="F")

    def adjoint(self, field) -> np.ndarray:
        """Transpose of :meth:`synthesize`: ``(N, C)`` from a voxel field."""
        field = np.asarray(field, dtype=float)
        if field.ndim == 3:
            field = field[..., None]
        fast = self._aligned
        if fast is not None:
            stencil, offset, stride = fast
            lat = _loops.lattice_adjoint(
                np.ascontiguousarray(np.moveaxis(field, -1, 0)),
                stencil,
                offset,
                stride,
                np.array(self.control.counts, dtype=np.int64),
            )
            return self.control.from_lattice(lat)
        flat = field.reshape((-1, field.shape[-1]), order="F")
        return np.asarray(self.basis.T @ flat)


class KernelBundle:
    """Multi-level velocity parameterisation on a fixed image grid."""

    def __init__(self, image_grid: Grid, spacings=DEFAULT_SPACINGS,
                 support_factor=DEFAULT_SUPPORT_FACTOR):
        spacings = tuple(float(s) for s in spacings)
        if not spacings:
            raise ValueError("at least one bundle level is required")
        if any(b >= a for a, b in zip(spacings, spacings[1:])):
            raise ValueError(f"level spacings must be strictly decreasing, got {spacings}")
        if not support_factor > 0:
            raise ValueError("support factor must be positive")
        self.image_grid = image_grid
        self.spacings = spacings
        self.support_factor = float(support_factor)
        self.levels = tuple(
            BundleLevel(image_grid, s, self.support_factor * s) for s in spacings
        )

    def __len__(self):
        return len(self.levels)

    @property
    def sizes(self):
        """Parameter count per level (three per centre)."""
        return tuple(3 * lv.n_centers for lv in self.levels)

    @property
    def n_params(self) -> int:
        return sum(self.sizes)

    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)

    def resolve(self, active_levels=None):
        if active_levels is None:
            return tuple(range(len(self)))
        act = tuple(sorted(set(int(m) for m in active_levels)))
        if any(m < 0 or m >= len(self) for m in act):
            raise ValueError(f"active levels {act} outside 0..{len(self) - 1}")
        return act


class KernelBundleParams:
    """Coefficients of a :class:`KernelBundle`."""

    def __init__(self, bundle: KernelBundle, coeffs):
        coeffs = tuple(np.array(c, dtype=float).reshape(-1, 3) for c in coeffs)
        if len(coeffs) != len(bundle):
            raise ValueError("one coefficient array per level is required")
        for c, lv in zip(coeffs, bundle.levels):
            if c.shape != (lv.n_centers, 3):
                raise ValueError(f"expected {(lv.n_centers, 3)} coefficients, got {c.shape}")
            if not np.all(np.isfinite(c)):
                raise ValueError("coefficients must be finite")
            c.setflags(write=False)
        self.bundle = bundle
        self.coeffs = coeffs

    @classmethod
    def zeros(cls, bundle):
        return cls(bundle, [np.zeros((lv.n_centers, 3)) for lv in bundle.levels])

    @classmethod
    def from_flat(cls, bundle, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (bundle.n_params,):
            raise ValueError(f"expected {bundle.n_params} parameters, got {vec.shape}")
        off = bundle.offsets()
        return cls(bundle, [vec[off[m] : off[m + 1]] for m in range(len(bundle))])

    def flat(self) -> np.ndarray:
        return np.concatenate([c.ravel() for c in self.coeffs])

    def with_level(self, m, coeffs) -> "KernelBundleParams":
        new = list(self.coeffs)
        new[m] = coeffs
        return KernelBundleParams(self.bundle, new)

    def __add__(self, other):
        return KernelBundleParams(self.bundle, [a + b for a, b in zip(self.coeffs, other.coeffs)])

    def __neg__(self):
        return KernelBundleParams(self.bundle, [-c for c in self.coeffs])

    def scaled(self, factor):
        return KernelBundleParams(self.bundle, [factor * c for c in self.coeffs])


def velocity(params: KernelBundleParams, active_levels=None) -> VelocityField:
    """Velocity ``v(x) = sum_m sum_i K_m(c_i, x) w_i^m`` at every voxel."""
    bundle = params.bundle
    out = np.zeros(bundle.image_grid.dims + (3,))
    for m in bundle.resolve(active_levels):
        c = params.coeffs[m]
        if np.any(c):
            out += bundle.levels[m].synthesize(c)
    return VelocityField(bundle.image_grid, out)


def exp_euler(v: VelocityField, steps: int = DEFAULT_STEPS) -> DisplacementField:
    """Displacement ``Exp(v)(x) - x`` by ``steps`` forward Euler steps.

    The velocity is sampled trilinearly with edge clamping at every sub-step.
    """
    steps = int(steps)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h = np.asarray(v.grid.spacing)
    if not np.any(v.data):
        return DisplacementField(v.grid, np.zeros_like(v.data))
    disp = _loops.euler_grid(np.ascontiguousarray(v.index_units()), steps)
    return DisplacementField(v.grid, disp * h)


def flow_points(v: VelocityField, points, steps: int = DEFAULT_STEPS) -> np.ndarray:
    """Euler flow of arbitrary physical points (M, 3) to time 1."""
    idx = np.ascontiguousarray(v.grid.to_index(np.atleast_2d(points)))
    out = _loops.euler_points(np.ascontiguousarray(v.index_units()), idx, int(steps))
    return v.grid.to_mm(out)


def exp_forward(params, active_levels=None, steps=DEFAULT_STEPS) -> DisplacementField:
    return exp_euler(velocity(params, active_levels), steps)


def exp_inverse(params, active_levels=None, steps=DEFAULT_STEPS) -> DisplacementField:
    """``Exp(-v)``: the same integration applied to the negated velocity."""
    return exp_euler(-velocity(params, active_levels), steps)


def warped_with_gradient(template: Volume3, params, steps=DEFAULT_STEPS, grad=None):
    """Template and its central-difference gradient, both sampled at ``Exp(v)(x)``.

    Returns ``(warped (dims), gradient (dims + (3,)), displacement)``.
    """
    if not template.grid.matches(params.bundle.image_grid):
        raise ValueError("template grid does not match the bundle grid")
    if grad is None:
        grad = gradient_central(template)
    disp = exp_forward(params, None, steps)
    both = np.concatenate([template.data[..., None], grad], axis=-1)
    if np.any(disp.data):
        both = warp_array(both, template.grid, disp)
    return both[..., 0], both[..., 1:], disp


def z_blocks(template: Volume3, w0: KernelBundleParams, active_levels=None,
             steps=DEFAULT_STEPS):
    """Per-level sparse blocks of the linearised design matrix.

    Column ``3 * i + a`` of level ``m`` is ``g_a(x) K_m(c_i, x)`` where ``g``
    is the template gradient evaluated at ``Exp(v(w0))(x)``; the Jacobian of
    the exponential is approximated by the kernel basis.
    """
    _, g, _ = warped_with_gradient(template, w0, steps)
    gflat = g.reshape(-1, 3, order="F")
    blocks = []
    for m in w0.bundle.resolve(active_levels):
        b = w0.bundle.levels[m].basis.tocoo()
        rows = np.repeat(b.row, 3)
        cols = (3 * b.col[:, None] + np.arange(3)).ravel()
        vals = (b.data[:, None] * gflat[b.row]).ravel()
        blk = sp.coo_matrix(
            (vals, (rows, cols)), shape=(b.shape[0], 3 * b.shape[1])
        ).tocsr()
        blk.eliminate_zeros()
        blocks.append(blk)
    return blocks


def z_matrix(template: Volume3, w0: KernelBundleParams, active_levels=None,
             steps=DEFAULT_STEPS) -> sp.csr_matrix:
    """Sparse ``(n_voxels, n_w)`` design matrix over the active levels (voxels x-fastest)."""
    return sp.hstack(z_blocks(template, w0, active_levels, steps)).tocsr()


def apply_z(bundle: KernelBundle, grad_field, params, active_levels=None) -> np.ndarray:
    """``Z w`` as a voxel array: ``sum_a g_a * v_a(w)``."""
    v = velocity(params, active_levels).data
    return (grad_field * v).sum(axis=-1)


def apply_zt(bundle: KernelBundle, grad_field, y, active_levels=None):
    """``Z^T y`` per level as ``(N_m, 3)`` arrays (zeros for inactive levels)."""
    act = bundle.resolve(active_levels)
    field = grad_field * np.asarray(y)[..., None]
    out = []
    for m, lv in enumerate(bundle.levels):
        out.append(lv.adjoint(field) if m in act else np.zeros((lv.n_centers, 3)))
    return out
