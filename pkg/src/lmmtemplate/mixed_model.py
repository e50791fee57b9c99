"""Linearised mixed-effects machinery on image patches.

For image ``i`` and patch ``j`` the linearised model reads

    r_ij = Z_ij w_i + x_ij + e_ij,   r_ij = I_ij - theta_j^{w0} + Z_ij w0

with ``w ~ N(0, sigma2 C)``, ``x ~ N(0, sigma2 S)``, ``e ~ N(0, sigma2 I)``,
``C = blockdiag(lambda_m^2 Gram_m)`` and ``S = beta K``. The marginal
covariance of a patch is ``sigma2 V`` with ``V = Z C Z^T + S + I``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize

from .deformation import KernelBundle, KernelBundleParams, velocity, warped_with_gradient
from .kernels import dense_kernel_matrix, patch_kernel
from .volume import Grid, PatchPartition, Volume3, patch_coordinates

log = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-12
# increase in L (-2 log likelihood) tolerated when setting an amplitude to zero:
# the 0.90 quantile of chi2(1), a 5% test under the 50:50 boundary mixture
ZERO_TOL = 2.71


class NumericalError(RuntimeError):
    """A covariance could not be factorised."""


@dataclass(frozen=True)
class VarianceParams:
    sigma2: float
    lambdas: tuple
    beta: float

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "beta", float(self.beta))
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if any(not (v >= 0 and math.isfinite(v)) for v in self.lambdas):
            raise ValueError(f"lambdas must be non-negative, got {self.lambdas}")
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be non-negative, got {self.beta}")

    def to_text(self) -> str:
        lines = [f"sigma2={self.sigma2!r}"]
        lines += [f"lambda_{m + 1}={v!r}" for m, v in enumerate(self.lambdas)]
        lines.append(f"beta={self.beta!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "VarianceParams":
        kv = dict(
            line.split("=", 1) for line in text.splitlines() if "=" in line
        )
        lams = []
        m = 1
        while f"lambda_{m}" in kv:
            lams.append(float(kv[f"lambda_{m}"]))
            m += 1
        return cls(float(kv["sigma2"]), lams, float(kv["beta"]))


@dataclass
class PatchSystem:
    """One image patch of the linearised model.

    ``zcz[m]`` holds ``Z_m Gram_m Z_m^T`` for unit amplitude. The design
    blocks ``z`` (with ``cols`` mapping their columns to level parameter
    indices) are only needed for :func:`blup_w`.
    """

    residual: np.ndarray
    kernel: np.ndarray
    zcz: tuple = ()
    z: tuple | None = None
    cols: tuple | None = None
    image: int = 0
    patch: int = 0

    def __post_init__(self):
        n = len(self.residual)
        if self.kernel.shape != (n, n):
            raise ValueError("bias kernel does not match the residual length")
        for m in self.zcz:
            if m.shape != (n, n):
                raise ValueError("Z C Z^T block does not match the residual length")
        if self.z is not None:
            for blk in self.z:
                if blk.shape[0] != n:
                    raise ValueError("Z block row count does not match the residual")

    @property
    def n(self) -> int:
        return len(self.residual)

    @classmethod
    def from_design(cls, residual, kernel, z, grams, cols=None, image=0, patch=0):
        """Build from explicit design blocks and per-level parameter Grams."""
        z = tuple(np.asarray(b, dtype=float) for b in z)
        zcz = []
        for m, blk in enumerate(z):
            g = np.asarray(grams[m], dtype=float)
            if cols is not None:
                g = g[np.ix_(cols[m], cols[m])]
            zcz.append(blk @ g @ blk.T)
        return cls(
            np.asarray(residual, dtype=float),
            np.asarray(kernel, dtype=float),
            tuple(zcz),
            z,
            None if cols is None else tuple(np.asarray(c) for c in cols),
            image,
            patch,
        )


def marginal_covariance(ps: PatchSystem, vp: VarianceParams) -> np.ndarray:
    """Unit-free marginal covariance ``V = sum_m lambda_m^2 Z_m Gram_m Z_m^T + beta K + I``."""
    v = vp.beta * ps.kernel
    for lam, m in zip(vp.lambdas, ps.zcz):
        if lam:
            v = v + lam * lam * m
    v = v + np.eye(ps.n)
    return v


def _cholesky(v, ps):
    try:
        return sla.cholesky(v, lower=True, check_finite=False)
    except sla.LinAlgError:
        pass
    jitter = 1e-10 * np.trace(v) / len(v)
    log.warning(
        "image %d patch %d: covariance not positive definite, adding jitter %.3g",
        ps.image, ps.patch, jitter,
    )
    try:
        return sla.cholesky(v + jitter * np.eye(len(v)), lower=True, check_finite=False)
    except sla.LinAlgError as exc:
        raise NumericalError(
            f"image {ps.image} patch {ps.patch}: covariance factorisation failed "
            f"(n={len(v)}, trace={np.trace(v):.4g}, min diag={np.diag(v).min():.4g})"
        ) from exc


def _terms(systems, lambdas, beta):
    """Voxel count, summed log-determinants and summed quadratic forms."""
    vp = _Shape(lambdas, beta)
    n = logdet = quad = 0.0
    for ps in systems:
        chol = _cholesky(marginal_covariance(ps, vp), ps)
        y = sla.solve_triangular(chol, ps.residual, lower=True, check_finite=False)
        n += ps.n
        logdet += 2.0 * np.log(np.diag(chol)).sum()
        quad += float(y @ y)
    return n, logdet, quad


@dataclass(frozen=True)
class _Shape:
    lambdas: tuple
    beta: float


def neg_log_likelihood(systems, vp: VarianceParams) -> float:
    """Patch-approximated double negative log-likelihood.

    ``N log sigma2 + sum log det V_ij + sum r_ij^T V_ij^{-1} r_ij / sigma2``.
    """
    n, logdet, quad = _terms(systems, vp.lambdas, vp.beta)
    return n * math.log(vp.sigma2) + logdet + quad / vp.sigma2


def profile_sigma2(systems, lambdas, beta, floor=SIGMA2_FLOOR) -> float:
    """Closed-form minimiser of the likelihood over ``sigma2`` for fixed shape."""
    n, _, quad = _terms(systems, tuple(lambdas), float(beta))
    return max(quad / n, floor)


def _profiled(systems, lambdas, beta, floor):
    n, logdet, quad = _terms(systems, lambdas, beta)
    s2 = max(quad / n, floor)
    return n * math.log(s2) + logdet + quad / s2, s2


@dataclass
class VarianceFit:
    params: VarianceParams
    nll: float
    history: list = field(default_factory=list)
    evaluations: int = 0


def fit_variances(systems, init: VarianceParams, max_evals=200, xatol=1e-3,
                  floor=SIGMA2_FLOOR, start_floor=1e-2, zero_tol=ZERO_TOL) -> VarianceFit:
    """Maximum-likelihood variance components.

    Nelder-Mead over ``(log lambda_1, ..., log lambda_R, log beta)`` with
    ``sigma2`` profiled out. Afterwards each amplitude is tried at exactly
    zero and set there unless that raises ``L`` by more than ``zero_tol``.
    The default is a likelihood-ratio test at the 5% level for a variance
    on its boundary; ``zero_tol=0`` keeps the plain maximum. The result is
    never worse than ``init``. ``history`` holds the best value seen after
    each evaluation, so it is non-increasing.
    """
    systems = list(systems)
    nlev = len(init.lambdas)
    history = []
    best = {"f": math.inf}

    def evaluate(lams, beta):
        f, s2 = _profiled(systems, tuple(lams), beta, floor)
        if f < best["f"]:
            best.update(f=f, lams=tuple(lams), beta=beta, s2=s2)
        history.append(best["f"])
        return f

    def objective(x):
        if len(history) >= max_evals:
            return best["f"] + 1.0
        e = np.exp(np.clip(x, -700, 700))
        return evaluate(e[:nlev], float(e[nlev]))

    f_init = evaluate(init.lambdas, init.beta)
    x0 = np.log(np.maximum(np.r_[init.lambdas, init.beta], start_floor))
    simplex = np.vstack([x0] + [x0 + np.eye(nlev + 1)[k] for k in range(nlev + 1)])
    minimize(
        objective,
        x0,
        method="Nelder-Mead",
        options={
            "initial_simplex": simplex,
            "xatol": xatol,
            "fatol": np.inf,
            "maxfev": max(max_evals - 1, 1),
        },
    )
    lams, beta = list(best["lams"]), best["beta"]
    for m in range(nlev + 1):
        trial_l, trial_b = list(lams), beta
        if m < nlev:
            if trial_l[m] == 0:
                continue
            trial_l[m] = 0.0
        else:
            if trial_b == 0:
                continue
            trial_b = 0.0
        f_before = best["f"]
        f, s2 = _profiled(systems, tuple(trial_l), trial_b, floor)
        history.append(min(f, history[-1]))
        if f <= f_before + zero_tol and f <= f_init:
            best.update(f=f, lams=tuple(trial_l), beta=trial_b, s2=s2)
            lams, beta = trial_l, trial_b
    params = VarianceParams(best["s2"], best["lams"], best["beta"])
    return VarianceFit(params, best["f"], history, len(history))


def estimate_variances(systems, init: VarianceParams, **kwargs) -> VarianceParams:
    """Maximum-likelihood ``(sigma2, lambda, beta)``; see :func:`fit_variances`."""
    return fit_variances(systems, init, **kwargs).params


def blup_w(systems, vp: VarianceParams, grams) -> np.ndarray:
    """Best linear unbiased predictor of the deformation parameters of one image.

    ``grams[m]`` is the level-``m`` Gram in parameter space (three entries
    per centre). Levels with zero amplitude are left out of the solve and
    predicted as zero. Computes
    ``(C^{-1} + Z^T (I+S)^{-1} Z)^{-1} Z^T (I+S)^{-1} r`` in the equivalent
    form ``(I + C M)^{-1} C b`` which avoids inverting ``C``.
    """
    systems = list(systems)
    sizes = [np.asarray(g).shape[0] for g in grams]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    active = [m for m, lam in enumerate(vp.lambdas) if lam > 0]
    out = np.zeros(offsets[-1])
    if not active:
        return out
    pos = {}
    start = 0
    for m in active:
        pos[m] = start
        start += sizes[m]
    nact = start
    mmat = np.zeros((nact, nact))
    bvec = np.zeros(nact)
    for ps in systems:
        if ps.z is None:
            raise ValueError("blup_w needs patch systems built with design blocks")
        w = _bias_solver(ps, vp.beta)
        idx, blocks = [], []
        for m in active:
            cols = ps.cols[m] if ps.cols is not None else np.arange(sizes[m])
            idx.append(pos[m] + np.asarray(cols))
            blocks.append(ps.z[m])
        zloc = np.hstack(blocks)
        gidx = np.concatenate(idx)
        wz = sla.cho_solve(w, zloc, check_finite=False)
        wr = sla.cho_solve(w, ps.residual, check_finite=False)
        mmat[np.ix_(gidx, gidx)] += zloc.T @ wz
        bvec[gidx] += zloc.T @ wr
    cmat = np.zeros((nact, nact))
    for m in active:
        s = slice(pos[m], pos[m] + sizes[m])
        cmat[s, s] = vp.lambdas[m] ** 2 * np.asarray(grams[m])
    try:
        sol = np.linalg.solve(np.eye(nact) + cmat @ mmat, cmat @ bvec)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("deformation BLUP system is singular") from exc
    for m in active:
        out[offsets[m] : offsets[m + 1]] = sol[pos[m] : pos[m] + sizes[m]]
    return out


def _bias_solver(ps, beta):
    a = beta * ps.kernel + np.eye(ps.n)
    try:
        return sla.cho_factor(a, lower=True, check_finite=False)
    except sla.LinAlgError as exc:
        raise NumericalError(
            f"image {ps.image} patch {ps.patch}: beta K + I factorisation failed"
        ) from exc


def blup_bias(ps: PatchSystem, vp: VarianceParams) -> np.ndarray:
    """Conditional mean of the bias on one patch: ``S (S + I)^{-1} r``."""
    if vp.beta == 0:
        return np.zeros(ps.n)
    y = sla.cho_solve(_bias_solver(ps, vp.beta), ps.residual, check_finite=False)
    return vp.beta * (ps.kernel @ y)


# -- whole-image patch operations ----------------------------------------


class PatchOperator:
    """Block-diagonal ``beta K + I`` over a partition, via shared eigenbases.

    Every patch shape gets one eigendecomposition of its bias kernel, so
    solves and quadratic forms for any ``beta`` cost two matrix products.
    """

    def __init__(self, grid: Grid, partition: PatchPartition, support: float):
        self.grid = grid
        self.partition = partition
        self.support = float(support)
        self._groups = []
        for ext, members in partition.groups().items():
            _, evals, evecs = patch_kernel(ext, grid.spacing, self.support)
            self._groups.append((ext, members, evals, evecs))

    def _gather(self, arr, members):
        return np.stack([self.partition.extract(arr, j) for j in members])

    def _scatter(self, out, members, rows):
        for j, row in zip(members, rows):
            self.partition.assign(out, j, row)

    def solve(self, arr, beta):
        """``(beta K + I)^{-1} arr`` patchwise, plus ``arr^T (beta K + I)^{-1} arr``."""
        out = np.empty(self.grid.dims)
        quad = 0.0
        for _, members, evals, evecs in self._groups:
            r = self._gather(arr, members)
            proj = r @ evecs
            scaled = proj / (beta * evals + 1.0)
            quad += float((proj * scaled).sum())
            self._scatter(out, members, scaled @ evecs.T)
        return out, quad

    def shrink(self, arr, beta):
        """``beta K (beta K + I)^{-1} arr`` patchwise."""
        out = np.zeros(self.grid.dims)
        if beta == 0:
            return out
        for _, members, evals, evecs in self._groups:
            r = self._gather(arr, members)
            factor = beta * evals / (beta * evals + 1.0)
            self._scatter(out, members, ((r @ evecs) * factor) @ evecs.T)
        return out


def bias_field(residual: Volume3, partition: PatchPartition, support: float,
               beta: float) -> Volume3:
    """Predicted bias over the whole image from a residual volume."""
    op = PatchOperator(residual.grid, partition, support)
    return Volume3(residual.grid, op.shrink(residual.data, beta))


def select_patches(partition: PatchPartition, count: int, seed=0, score=None):
    """Fixed pseudo-random subset of patch indices; all of them when ``count <= 0``.

    A strided pick would line up with the z-major ordering and sample a
    single column of patches, so a seeded draw is used instead. With a
    per-patch ``score`` the draw is restricted to patches scoring at least
    a tenth of the maximum, which keeps flat background out of the subset.
    """
    total = partition.count
    if count <= 0 or count >= total:
        return list(range(total))
    pool = np.arange(total)
    if score is not None:
        score = np.asarray(score, dtype=float)
        if score.shape != (total,):
            raise ValueError(f"score needs one value per patch ({total})")
        if score.max() > 0:
            pool = pool[score >= 0.1 * score.max()]
    if count >= len(pool):
        return [int(j) for j in pool]
    rng = np.random.default_rng(seed)
    return sorted(int(j) for j in rng.choice(pool, size=count, replace=False))


def patch_contrast(volume: np.ndarray, partition: PatchPartition) -> np.ndarray:
    """Per-patch mean absolute deviation from the volume median plus patch SD."""
    base = float(np.median(volume))
    out = np.empty(partition.count)
    for j in range(partition.count):
        v = volume[partition.slices(j)]
        out[j] = np.abs(v - base).mean() + v.std()
    return out


def _local_centers(level, lo, hi):
    cg = level.control
    radius = level.kernel.support
    idx = []
    for a in range(3):
        first = math.ceil((lo[a] - radius - cg.start[a]) / cg.spacing)
        last = math.floor((hi[a] + radius - cg.start[a]) / cg.spacing)
        idx.append(np.arange(max(first, 0), min(last, cg.counts[a] - 1) + 1))
    mesh = np.meshgrid(*idx, indexing="ij")
    ijk = np.stack([m.ravel(order="F") for m in mesh], axis=1)
    flat = ijk[:, 0] + cg.counts[0] * (ijk[:, 1] + cg.counts[1] * ijk[:, 2])
    pts = np.asarray(cg.start) + cg.spacing * ijk
    return flat, pts


def velocity_covariance(level, pts):
    """``K_b Gram K_b^T`` over patch points for unit amplitude.

    Depends only on the patch geometry relative to the lattice, so results
    are cached on the level and shared across images and iterations.
    """
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    flat, cpts = _local_centers(level, lo, hi)
    key = (len(pts), tuple(np.round(hi - lo, 6)),
           tuple(np.round(cpts[0] - lo, 6)) if len(cpts) else (), len(cpts),
           tuple(np.round(cpts[-1] - lo, 6)) if len(cpts) else ())
    hit = level.patch_cache.get(key)
    if hit is None:
        kb = dense_kernel_matrix(level.kernel, pts, cpts)
        gl = dense_kernel_matrix(level.kernel, cpts, cpts)
        hit = (kb @ gl) @ kb.T
        hit.setflags(write=False)
        level.patch_cache[key] = hit
    return hit


def linearized_systems(image: Volume3, template: Volume3, w0: KernelBundleParams,
                       partition: PatchPartition, bias_support: float, patches=None,
                       steps=16, image_index=0, with_design=False):
    """Patch systems of one image linearised around ``w0``.

    ``zcz`` blocks are formed as ``Q * (g g^T)`` where ``Q`` is the velocity
    covariance over the patch and ``g`` the warped template gradient. With
    ``with_design`` the explicit design blocks are kept for :func:`blup_w`.
    """
    bundle: KernelBundle = w0.bundle
    grid = image.grid
    if not (grid.matches(template.grid) and grid.matches(bundle.image_grid)):
        raise ValueError("image, template and bundle grids must match")
    warped, g, _ = warped_with_gradient(template, w0, steps)
    zw = (g * velocity(w0).data).sum(axis=-1)
    resid = image.data - warped + zw
    if patches is None:
        patches = range(partition.count)
    out = []
    for j in patches:
        start, ext = partition.patches[j]
        pts = patch_coordinates(grid, start, ext)
        gp = np.stack([partition.extract(g[..., a], j) for a in range(3)], axis=1)
        ggt = gp @ gp.T
        kern, _, _ = patch_kernel(ext, grid.spacing, bias_support)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        zcz, zs, cols = [], [], []
        for lv in bundle.levels:
            zcz.append(velocity_covariance(lv, pts) * ggt)
            if with_design:
                flat, cpts = _local_centers(lv, lo, hi)
                kb = dense_kernel_matrix(lv.kernel, pts, cpts)
                zs.append((kb[:, :, None] * gp[:, None, :]).reshape(len(pts), -1))
                cols.append((3 * flat[:, None] + np.arange(3)).ravel())
        out.append(
            PatchSystem(
                partition.extract(resid, j),
                kern,
                tuple(zcz),
                tuple(zs) if with_design else None,
                tuple(cols) if with_design else None,
                image_index,
                j,
            )
        )
    return out
