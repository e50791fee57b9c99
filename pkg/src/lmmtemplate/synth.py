"""Synthetic phantoms with known template, deformations and bias fields."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .deformation import DEFAULT_SPACINGS, DEFAULT_STEPS, KernelBundle, KernelBundleParams, exp_forward
from .kernels import WendlandKernel
from .volume import DisplacementField, Grid, LabelVolume, Volume3, warp, warp_labels

log = logging.getLogger(__name__)

# above this many centres the symmetric root is taken on a circulant embedding
EIGH_LIMIT = 2000


@dataclass(frozen=True)
class Structure:
    """A smooth blob: ``intensity * exp(-ln2 * q^(2 order))`` with ``q`` the ellipsoidal radius.

    The half-maximum set is exactly the ellipsoid with semi-axes ``radii`` (mm).
    """

    center: tuple
    radii: tuple
    intensity: float = 1.0
    order: int = 1

    def __post_init__(self):
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"structure intensity must lie in [0, 1], got {self.intensity}")
        if min(self.radii) <= 0:
            raise ValueError("structure radii must be positive")
        if self.order < 1:
            raise ValueError("structure order must be >= 1")

    def q2(self, coords):
        d = (coords - np.asarray(self.center, dtype=float)) / np.asarray(self.radii, dtype=float)
        return (d * d).sum(axis=-1)


def default_structures(grid: Grid):
    """Two nested structures around the grid centre (outer shell and inner core)."""
    lo, hi = grid.extent
    c = tuple((lo + hi) / 2)
    ext = float(min(hi - lo))
    return (
        Structure(c, (0.30 * ext, 0.26 * ext, 0.24 * ext), 0.5, 2),
        Structure(
            tuple(np.asarray(c) + [0.08 * ext, 0.04 * ext, 0.0]),
            (0.12 * ext, 0.10 * ext, 0.11 * ext),
            0.9,
            2,
        ),
    )


@dataclass
class PhantomSpec:
    """Everything needed to generate a seeded cohort.

    ``bias_images`` lists the images that receive the multiplicative bias
    (all images when ``None``). ``deformation_lambdas`` holds one prior
    amplitude per bundle level.
    """

    dims: tuple = (64, 64, 64)
    spacing: tuple = (2.0, 2.0, 2.0)
    origin: tuple = (0.0, 0.0, 0.0)
    structures: tuple | None = None
    n_images: int = 5
    noise_sigma: float = 0.01
    bias_amplitude: float = 0.05
    bias_width: float = 30.0
    bias_center: tuple | None = None
    bias_images: tuple | None = None
    levels: tuple = DEFAULT_SPACINGS
    support_factor: float = 4.0
    deformation_lambdas: tuple = (0.0, 0.0, 0.0)
    euler_steps: int = DEFAULT_STEPS
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.bias_amplitude < 0 or self.bias_width <= 0:
            raise ValueError("noise and bias parameters must be non-negative (width positive)")
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if len(self.deformation_lambdas) != len(self.levels):
            raise ValueError("one deformation amplitude per level is required")

    @property
    def grid(self) -> Grid:
        return Grid(self.dims, self.spacing, self.origin)


def make_phantom(spec: PhantomSpec):
    """Clean template and its label volume.

    Labels mark each structure's half-maximum region; where regions overlap
    the brighter structure wins.
    """
    grid = spec.grid
    structures = default_structures(grid) if spec.structures is None else spec.structures
    coords = grid.coordinates()
    img = np.zeros(grid.dims)
    labels = np.zeros(grid.dims, dtype=np.int64)
    best = np.full(grid.dims, -1.0)
    for n, s in enumerate(structures, start=1):
        q2 = s.q2(coords)
        img += s.intensity * np.exp(-math.log(2.0) * q2 ** s.order)
        inside = (q2 <= 1.0) & (s.intensity > best)
        labels[inside] = n
        best[inside] = s.intensity
    return Volume3(grid, img), LabelVolume(grid, labels)


def bias_factor(grid: Grid, amplitude=0.05, width=30.0, center=None) -> np.ndarray:
    """``1 + a exp(-|x - c|^2 / (2 width^2))``; ``c`` defaults to the grid centre."""
    if amplitude < 0 or width <= 0:
        raise ValueError("amplitude must be >= 0 and width > 0")
    if center is None:
        lo, hi = grid.extent
        center = (lo + hi) / 2
    d2 = ((grid.coordinates() - np.asarray(center, dtype=float)) ** 2).sum(axis=-1)
    return 1.0 + amplitude * np.exp(-d2 / (2.0 * width ** 2))


def inject_bias(vol: Volume3, amplitude=0.05, width=30.0, center=None) -> Volume3:
    """Multiply by a Gaussian bump; see :func:`bias_factor`."""
    return Volume3(vol.grid, vol.data * bias_factor(vol.grid, amplitude, width, center))


def add_noise(vol: Volume3, sigma: float, seed=None) -> Volume3:
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    if sigma == 0:
        return vol
    rng = np.random.default_rng(seed)
    return Volume3(vol.grid, vol.data + sigma * rng.standard_normal(vol.dims))


def _sym_sqrt_apply(gram_dense, z):
    evals, evecs = np.linalg.eigh(gram_dense)
    root = (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
    return root @ z


def lattice_field(counts, spacing, kernel: WendlandKernel, z) -> np.ndarray:
    """``A z`` with ``A`` the symmetric root of a circulant embedding of the lattice Gram.

    ``z`` is white noise on a padded periodic lattice (shape returned by
    :func:`embedding_shape`, plus optional trailing component axis). With
    the period exceeding twice the kernel support the embedding is positive
    semi-definite, so the output has exactly the lattice Gram as covariance.
    """
    shape = embedding_shape(counts, spacing, kernel.support)
    axes = [np.minimum(np.arange(m), m - np.arange(m)) * spacing[a] for a, m in enumerate(shape)]
    dx, dy, dz = np.meshgrid(*axes, indexing="ij")
    row = kernel.of_distance(np.sqrt(dx ** 2 + dy ** 2 + dz ** 2))
    spec = sfft.fftn(row).real
    if spec.min() < -1e-10 * spec.max():
        log.warning("circulant embedding not PSD (min eigenvalue %.3g); clipping", spec.min())
    root = np.sqrt(np.clip(spec, 0.0, None))
    z = np.asarray(z, dtype=float)
    extra = z.shape[3:]
    zz = z.reshape(shape + (-1,))
    out = np.empty(tuple(counts) + (zz.shape[-1],))
    for q in range(zz.shape[-1]):
        y = sfft.ifftn(root * sfft.fftn(zz[..., q])).real
        out[..., q] = y[: counts[0], : counts[1], : counts[2]]
    return out.reshape(tuple(counts) + extra)


def embedding_shape(counts, spacing, support):
    shape = []
    for a, n in enumerate(counts):
        r = int(math.ceil(support / spacing[a]))
        shape.append(sfft.next_fast_len(max(2 * n, n + 2 * r + 2)))
    return tuple(shape)


def gaussian_field(grid: Grid, kernel: WendlandKernel, variance: float, seed=None) -> Volume3:
    """Zero-mean Gaussian field on the voxel grid with covariance ``variance * K``."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(embedding_shape(grid.dims, grid.spacing, kernel.support))
    f = lattice_field(grid.dims, grid.spacing, kernel, z)
    return Volume3(grid, math.sqrt(variance) * f)


def draw_deformation(bundle: KernelBundle, lambdas, seed=None) -> KernelBundleParams:
    """Sample ``w^m = lambda_m A_m z`` with ``A_m A_m = Gram_m`` and ``z`` standard normal.

    ``A_m`` is the symmetric square root from an eigendecomposition (negative
    eigenvalues clipped). Levels with more than ``EIGH_LIMIT`` centres use the
    symmetric root of a circulant embedding instead, which has the same
    covariance at a fraction of the cost.
    """
    lambdas = [float(v) for v in lambdas]
    if len(lambdas) != len(bundle):
        raise ValueError("one amplitude per level is required")
    if any(v < 0 for v in lambdas):
        raise ValueError("amplitudes must be non-negative")
    rng = np.random.default_rng(seed)
    coeffs = []
    for lam, lv in zip(lambdas, bundle.levels):
        n = lv.n_centers
        if n <= EIGH_LIMIT:
            z = rng.standard_normal((n, 3))
            w = _sym_sqrt_apply(lv.gram.toarray(), z) if lam > 0 else np.zeros((n, 3))
        else:
            counts = lv.control.counts
            h = (lv.spacing,) * 3
            z = rng.standard_normal(embedding_shape(counts, h, lv.kernel.support) + (3,))
            w = lv.control.from_lattice(lattice_field(counts, h, lv.kernel, z)) if lam > 0 else np.zeros((n, 3))
        coeffs.append(lam * w)
    return KernelBundleParams(bundle, coeffs)


@dataclass
class SimulatedImage:
    observed: Volume3
    clean: Volume3
    labels: LabelVolume
    bias: Volume3
    deformation: DisplacementField
    params: KernelBundleParams
    seed: int


@dataclass
class Cohort:
    template: Volume3
    template_labels: LabelVolume
    images: list = field(default_factory=list)


def simulate_cohort(spec: PhantomSpec) -> Cohort:
    """Template, then per image: warp by a prior draw, bias, noise.

    ``clean`` is the warped template before bias and noise; ``bias`` is the
    additive equivalent ``clean * (factor - 1)`` (zero for unbiased images).
    """
    template, labels = make_phantom(spec)
    grid = spec.grid
    bundle = KernelBundle(grid, spec.levels, spec.support_factor)
    seeds = np.random.SeedSequence(spec.seed).generate_state(2 * spec.n_images)
    biased = range(spec.n_images) if spec.bias_images is None else spec.bias_images
    factor = bias_factor(grid, spec.bias_amplitude, spec.bias_width, spec.bias_center)
    out = Cohort(template, labels)
    for i in range(spec.n_images):
        params = draw_deformation(bundle, spec.deformation_lambdas, int(seeds[2 * i]))
        disp = exp_forward(params, None, spec.euler_steps)
        clean = warp(template, disp)
        lab = warp_labels(labels, disp)
        f = factor if i in biased else np.ones(grid.dims)
        bias = Volume3(grid, clean.data * (f - 1.0))
        obs = add_noise(Volume3(grid, clean.data * f), spec.noise_sigma, int(seeds[2 * i + 1]))
        out.images.append(SimulatedImage(obs, clean, lab, bias, disp, params, int(seeds[2 * i + 1])))
    return out
