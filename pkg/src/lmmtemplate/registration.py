"""Maximum a posteriori deformation parameters for one image.

The objective is

    P(w) = sum_j (I_j - theta_j^w)^T (S_j + I)^{-1} (I_j - theta_j^w) + w^T C^{-1} w

with the full non-linear warp in the data term and ``C = blockdiag(lambda_m^2 Gram_m)``.
The gradient replaces the Jacobian of the exponential by the kernel basis,
as in the linearised model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import _loops
from .deformation import (
    DEFAULT_STEPS,
    KernelBundle,
    KernelBundleParams,
    exp_euler,
)
from .mixed_model import PatchOperator, VarianceParams
from .volume import PatchPartition, VelocityField, Volume3, gradient_central, warp_array

log = logging.getLogger(__name__)


@dataclass
class OptimizerSettings:
    max_iter: int = 100
    grad_tol: float = 1e-5
    step_tol: float = 1e-8
    armijo_c: float = 1e-4
    max_halvings: int = 40


@dataclass
class PredictResult:
    params: KernelBundleParams
    value: float
    iterations: int
    converged: bool
    line_search_failed: bool = False
    trace: list = field(default_factory=list)


_LU_CACHE: dict = {}


def _gram_lu(level):
    key = id(level)
    hit = _LU_CACHE.get(key)
    if hit is None or hit[0] is not level:
        hit = (level, splu(sp.csc_matrix(level.gram)))
        _LU_CACHE[key] = hit
    return hit[1]


class PosteriorProblem:
    """Negative log posterior of one image's deformation parameters.

    Levels outside ``active_levels`` are frozen at the values in ``fixed``
    (zero by default). Active levels with zero amplitude are pinned at zero.
    """

    def __init__(self, template: Volume3, image: Volume3, variances: VarianceParams,
                 bundle: KernelBundle, partition: PatchPartition, bias_support=40.0,
                 active_levels=None, fixed: KernelBundleParams | None = None,
                 steps=DEFAULT_STEPS, settings: OptimizerSettings | None = None,
                 operator: PatchOperator | None = None, template_grad=None,
                 symmetric: bool = True):
        grid = bundle.image_grid
        if not (template.grid.matches(grid) and image.grid.matches(grid)):
            raise ValueError("template, image and bundle grids must match")
        if tuple(partition.dims) != grid.dims:
            raise ValueError("patch partition does not match the image grid")
        if len(variances.lambdas) != len(bundle):
            raise ValueError("one amplitude per bundle level is required")
        self.template = template
        self.image = image
        self.variances = variances
        self.bundle = bundle
        self.partition = partition
        self.steps = int(steps)
        self.symmetric = bool(symmetric)
        self.settings = settings or OptimizerSettings()
        self.active = bundle.resolve(active_levels)
        self.free = tuple(m for m in self.active if variances.lambdas[m] > 0)
        self.fixed = fixed if fixed is not None else KernelBundleParams.zeros(bundle)
        self.operator = operator or PatchOperator(grid, partition, bias_support)
        grad = gradient_central(template) if template_grad is None else template_grad
        self._stack = np.ascontiguousarray(
            np.concatenate([template.data[..., None], grad], axis=-1)
        )
        base = np.zeros(grid.dims + (3,))
        for m in range(len(bundle)):
            if m not in self.active and np.any(self.fixed.coeffs[m]):
                base += bundle.levels[m].synthesize(self.fixed.coeffs[m])
        self._base = base

    # -- helpers ---------------------------------------------------------

    def full_params(self, w) -> KernelBundleParams:
        """Accept a full parameter set or a per-active-level list of arrays."""
        if isinstance(w, KernelBundleParams):
            return w
        coeffs = list(self.fixed.coeffs)
        for m, c in zip(self.active, w):
            coeffs[m] = c
        return KernelBundleParams(self.bundle, coeffs)

    def _velocity(self, params):
        v = self._base.copy()
        for m in self.active:
            c = params.coeffs[m]
            if np.any(c):
                v += self.bundle.levels[m].synthesize(c)
        return VelocityField(self.bundle.image_grid, v)

    def _prior_terms(self, params):
        """``(w^T C^{-1} w, C^{-1} w per active level)``."""
        total = 0.0
        cinv = {}
        for m in self.active:
            w = params.coeffs[m]
            lam = self.variances.lambdas[m]
            if lam == 0:
                if np.any(w):
                    return math.inf, None
                cinv[m] = np.zeros_like(w)
                continue
            u = _gram_lu(self.bundle.levels[m]).solve(np.asarray(w)) / lam ** 2
            total += float((w * u).sum())
            cinv[m] = u
        return total, cinv

    def _data(self, params, need_grad):
        return self._data_v(self._velocity(params), need_grad)

    def _data_v(self, v, need_grad):
        disp = exp_euler(v, self.steps)
        if np.any(disp.data):
            both = warp_array(self._stack, self.bundle.image_grid, disp)
        else:
            both = self._stack
        warped, g = both[..., 0], both[..., 1:]
        r = self.image.data - warped
        wr, quad = self.operator.solve(r, self.variances.beta)
        if not need_grad:
            return quad, None
        field_ = g * wr[..., None]
        if self.symmetric and np.any(disp.data):
            # average of the two first-order sensitivities of Exp: the velocity
            # perturbation taken at the end point, and at the start point carried
            # by the Jacobian of the flow
            pushed = _loops.splat_grid(np.ascontiguousarray(field_),
                                       np.ascontiguousarray(disp.index_units()))
            spacing = self.bundle.image_grid.spacing
            carried = np.stack(np.gradient(warped, *spacing, edge_order=1), axis=-1) * wr[..., None]
            field_ = 0.5 * (pushed + carried)
        gd = {m: -2.0 * self.bundle.levels[m].adjoint(field_) for m in self.active}
        return quad, gd

    # -- public ------------------------------------------------------------

    def value(self, w) -> float:
        params = self.full_params(w)
        prior, _ = self._prior_terms(params)
        if math.isinf(prior):
            return math.inf
        return self._data(params, False)[0] + prior

    def data_gradient(self, w):
        """Data-term value and its approximate gradient per active level."""
        return self._data(self.full_params(w), True)

    def gradient(self, w):
        """Approximate gradient as one flat vector over the active levels."""
        params = self.full_params(w)
        _, gd = self._data(params, True)
        _, cinv = self._prior_terms(params)
        parts = []
        for m in self.active:
            gm = gd[m] + 2.0 * cinv[m] if cinv is not None else gd[m]
            parts.append(gm.ravel())
        return np.concatenate(parts)


def posterior_value(problem: PosteriorProblem, w) -> float:
    return problem.value(w)


def posterior_gradient(problem: PosteriorProblem, w) -> np.ndarray:
    return problem.gradient(w)


def _gram_apply(level, x):
    return np.asarray(level.gram @ x)


def predict_w(problem: PosteriorProblem, w_init: KernelBundleParams | None = None,
              trace: bool = False) -> PredictResult:
    """Descent on the active levels with backtracking line search.

    Directions are preconditioned by the prior covariance: in coordinates
    ``u = C^{-1} w`` the step is ``-(g_data + 2 u)``, i.e. ``-C grad P`` in
    ``w``. The first trial step of each iteration follows the Barzilai-Borwein
    rule in that metric; Armijo halving (``c = 1e-4``) then guarantees
    descent. Returns the best point found; ``P(out) <= P(w_init)``.
    """
    st = problem.settings
    bundle = problem.bundle
    params = problem.fixed if w_init is None else w_init
    params = KernelBundleParams(
        bundle,
        [
            np.zeros_like(c) if (m in problem.active and m not in problem.free) else c
            for m, c in enumerate(params.coeffs)
        ],
    )
    free = problem.free
    if not free:
        return PredictResult(params, problem.value(params), 0, True)
    w = {m: np.array(params.coeffs[m]) for m in free}
    _, cinv = problem._prior_terms(params)
    u = {m: cinv[m] for m in free}
    lam2 = {m: problem.variances.lambdas[m] ** 2 for m in free}
    h = min(bundle.image_grid.spacing)

    def assemble(wd):
        coeffs = list(params.coeffs)
        for m in free:
            coeffs[m] = wd[m]
        return KernelBundleParams(bundle, coeffs)

    grid = bundle.image_grid

    def evaluate(vel, wd, ud, grad):
        quad, gd = problem._data_v(VelocityField(grid, vel), grad)
        prior = sum(float((wd[m] * ud[m]).sum()) for m in free)
        return quad + prior, gd

    # the velocity is linear in w, so trial points reuse v(w) + alpha v(d)
    vel = problem._velocity(params).data
    val, gd = evaluate(vel, w, u, True)
    val0 = val
    records = []
    converged = False
    failed = False
    alpha = None
    prev = None
    it = 0
    for it in range(1, st.max_iter + 1):
        g = {m: gd[m] + 2.0 * u[m] for m in free}
        gnorm = max(float(np.abs(g[m]).max()) for m in free)
        if gnorm < st.grad_tol * (1.0 + abs(val)):
            converged = True
            it -= 1
            break
        du = {m: -g[m] for m in free}
        dw = {m: lam2[m] * _gram_apply(bundle.levels[m], du[m]) for m in free}
        slope = sum(float((g[m] * dw[m]).sum()) for m in free)
        if not slope < 0:
            converged = True
            it -= 1
            break
        if prev is not None:
            s_w, s_u, s_g = prev
            num = sum(float((s_w[m] * s_u[m]).sum()) for m in free)
            den = sum(float((s_w[m] * (g[m] - s_g[m])).sum()) for m in free)
            if num > 0 and den > 0:
                alpha = num / den
        if alpha is None or not np.isfinite(alpha) or alpha <= 0:
            dmax = max(float(np.abs(dw[m]).max()) for m in free)
            alpha = 0.5 * h / dmax
        if -alpha * slope <= 1e-13 * (1.0 + abs(val)):
            # predicted decrease below rounding of P
            converged = True
            it -= 1
            break
        vd = sum(bundle.levels[m].synthesize(dw[m]) for m in free)
        alpha0 = alpha
        accepted = False
        for _ in range(st.max_halvings + 1):
            w_new = {m: w[m] + alpha * dw[m] for m in free}
            u_new = {m: u[m] + alpha * du[m] for m in free}
            vel_new = vel + alpha * vd
            v_new, _ = evaluate(vel_new, w_new, u_new, False)
            if v_new <= val + st.armijo_c * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            failed = True
            log.info("line search failed after %d halvings (levels %s, iteration %d, "
                        "first trial %.3g, slope %.3g, P %.8g)", st.max_halvings,
                        [m + 1 for m in free], it, alpha0, slope, val)
            break
        step = alpha * max(float(np.abs(dw[m]).max()) for m in free)
        prev = ({m: w_new[m] - w[m] for m in free}, {m: u_new[m] - u[m] for m in free}, g)
        w, u, vel = w_new, u_new, vel_new
        val, gd = evaluate(vel, w, u, True)
        if trace:
            records.append((it, val, gnorm, step))
        if step < st.step_tol:
            converged = True
            break
    out = assemble(w)
    if val > val0:  # cannot happen with accepted Armijo steps; kept as a guard
        out, val = params, val0
    return PredictResult(out, val, it, converged, failed, records)


def multiscale_schedule(problem: PosteriorProblem, levels=None,
                        w_init: KernelBundleParams | None = None,
                        trace: bool = False) -> PredictResult:
    """Optimise levels one at a time, coarse to fine.

    Level ``m`` is optimised with all coarser levels held at their optimised
    values and finer levels at their initial values (zero unless warm
    started). Levels with a zero amplitude are pinned at zero. The problem's
    own active set is ignored.
    """
    bundle = problem.bundle
    levels = bundle.resolve(levels)
    current = w_init if w_init is not None else KernelBundleParams.zeros(bundle)
    current = KernelBundleParams(
        bundle, [c if m in levels else np.zeros_like(c) for m, c in enumerate(current.coeffs)]
    )
    records = []
    result = None
    iters = 0
    ok = True
    failed = False
    for m in levels:
        if problem.variances.lambdas[m] == 0:
            # pinned at zero by the prior
            coeffs = list(current.coeffs)
            coeffs[m] = np.zeros_like(coeffs[m])
            current = KernelBundleParams(bundle, coeffs)
            continue
        sub = PosteriorProblem(
            problem.template, problem.image, problem.variances, bundle, problem.partition,
            active_levels=[m], fixed=current, steps=problem.steps,
            settings=problem.settings, operator=problem.operator,
            template_grad=problem._stack[..., 1:], symmetric=problem.symmetric,
        )
        result = predict_w(sub, current, trace=trace)
        current = result.params
        iters += result.iterations
        ok = ok and result.converged
        failed = failed or result.line_search_failed
        records += [(m,) + r for r in result.trace]
    value = result.value if result is not None else problem.value(current)
    return PredictResult(current, value, iters, ok, failed, records)
