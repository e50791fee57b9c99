"""Alternating estimation of template, deformations, bias fields and variances."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .deformation import (
    DEFAULT_SPACINGS,
    DEFAULT_STEPS,
    DEFAULT_SUPPORT_FACTOR,
    KernelBundle,
    KernelBundleParams,
    exp_forward,
    exp_inverse,
    velocity,
)
from .mixed_model import (
    NumericalError,
    PatchOperator,
    VarianceParams,
    fit_variances,
    linearized_systems,
    patch_contrast,
    select_patches,
)
from .registration import OptimizerSettings, PosteriorProblem, multiscale_schedule
from .volume import (
    Volume3,
    gradient_central,
    make_partition,
    normalize_intensities,
    warp,
    warp_array,
)

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    spacings: tuple = DEFAULT_SPACINGS
    support_factor: float = DEFAULT_SUPPORT_FACTOR
    bias_support: float = 40.0
    patch_edge: int = 8
    euler_steps: int = DEFAULT_STEPS
    max_outer: int = 10
    tol: float = 1e-4
    variance_patches: int = 64
    variance_evals: int = 200
    variance_xatol: float = 1e-3
    max_iter: int = 100
    grad_tol: float = 1e-5
    step_tol: float = 1e-8
    init_sigma2: float = 0.01
    init_lambda: float = 1.0
    init_beta: float = 0.01
    bias_corrected_template: bool = False
    center_deformations: bool = True
    normalize: bool = True
    trace: bool = False

    def validate(self):
        s = tuple(float(v) for v in self.spacings)
        if not s or any(b >= a for a, b in zip(s, s[1:])) or min(s) <= 0:
            raise ValueError(f"level spacings must be positive and strictly decreasing, got {s}")
        for name in ("support_factor", "bias_support", "tol", "variance_xatol",
                     "grad_tol", "step_tol", "init_sigma2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("patch_edge", "euler_steps", "max_outer", "variance_evals", "max_iter"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.init_lambda < 0 or self.init_beta < 0:
            raise ValueError("initial amplitudes must be non-negative")


@dataclass
class IterationRecord:
    iteration: int
    variances: VarianceParams
    nll: float
    seconds: float = 0.0


@dataclass
class EstimationState:
    """Result of :func:`run_pipeline`, in the intensity units of the inputs.

    ``variances`` and ``history`` refer to the internally rescaled
    intensities (``original = scaled * scale + offset``). ``traces`` holds
    optimizer rows ``(outer, image, level, iteration, P, grad_norm, step)``
    when tracing is enabled.
    """

    template: Volume3
    w0: list
    variances: VarianceParams
    bias: list
    iteration: int = 0
    history: list = field(default_factory=list)
    records: list = field(default_factory=list)
    converged: bool = False
    scale: float = 1.0
    offset: float = 0.0
    violations: int = 0
    traces: list = field(default_factory=list)

    def displacements(self, steps=DEFAULT_STEPS):
        """Per image ``Exp(v(w0))`` (image to template) as displacement fields."""
        return [exp_forward(w, None, steps) for w in self.w0]

    def inverse_displacements(self, steps=DEFAULT_STEPS):
        return [exp_inverse(w, None, steps) for w in self.w0]


def update_template(images, w0s, steps=DEFAULT_STEPS, biases=None) -> Volume3:
    """Voxelwise mean of the images back-warped by ``Exp(-v(w0_i))``.

    With ``biases`` the predicted bias is subtracted before back-warping.
    """
    images = list(images)
    if not images:
        raise ValueError("at least one image is required")
    grid = images[0].grid
    acc = np.zeros(grid.dims)
    for i, img in enumerate(images):
        data = img.data if biases is None else img.data - biases[i].data
        disp = exp_inverse(w0s[i], None, steps)
        acc += warp_array(data, grid, disp) if np.any(disp.data) else data
    return Volume3(grid, acc / len(images))


def center(w0s):
    """Subtract the across-image mean coefficients level by level.

    The template is only determined up to a common deformation of all
    images; removing the mean velocity keeps it in the average frame.
    """
    if len(w0s) < 2:
        return list(w0s)
    bundle = w0s[0].bundle
    mean = [np.mean([w.coeffs[m] for w in w0s], axis=0) for m in range(len(bundle))]
    return [KernelBundleParams(bundle, [c - mu for c, mu in zip(w.coeffs, mean)]) for w in w0s]


def predict_biases(images, theta, w0s, operator, beta, steps=DEFAULT_STEPS):
    """Per image ``S (S + I)^-1 (I_i - theta(Exp(v(w0_i))))`` patch by patch."""
    out = []
    for img, w in zip(images, w0s):
        disp = exp_forward(w, None, steps)
        warped = warp(theta, disp).data if np.any(disp.data) else theta.data
        out.append(Volume3(img.grid, operator.shrink(img.data - warped, beta)))
    return out


def check_inputs(images):
    images = list(images)
    if len(images) < 2:
        raise ValueError("need at least 2 images")
    g = images[0].grid
    for k, img in enumerate(images[1:], start=1):
        if not img.grid.matches(g):
            raise ValueError(f"image {k} grid {img.grid} differs from image 0 grid {g}")
    return images


def run_pipeline(images, config: PipelineConfig | None = None, callback=None,
                 init: VarianceParams | None = None) -> EstimationState:
    """Estimate template, deformations, bias fields and variance components.

    Each outer iteration updates the template, fits the variances on the
    patch likelihood at the current linearisation points, re-predicts each
    image's deformation coarse to fine (warm started), removes the mean
    deformation across images (``center_deformations``) and predicts the bias
    fields. Stops when the patch likelihood changes by less than ``tol``
    relative, or after ``max_outer`` iterations; the returned template is
    then refreshed with the final deformations. ``callback(state, record)``
    is called after every iteration.
    """
    import time

    cfg = config or PipelineConfig()
    cfg.validate()
    images = check_inputs(images)
    grid = images[0].grid
    if cfg.normalize:
        work, scale, offset = normalize_intensities(images)
    else:
        work, scale, offset = images, 1.0, 0.0
    bundle = KernelBundle(grid, cfg.spacings, cfg.support_factor)
    partition = make_partition(grid.dims, cfg.patch_edge)
    operator = PatchOperator(grid, partition, cfg.bias_support)
    mean0 = np.mean([v.data for v in work], axis=0)
    chosen = select_patches(partition, cfg.variance_patches,
                            score=patch_contrast(mean0, partition))
    settings = OptimizerSettings(max_iter=cfg.max_iter, grad_tol=cfg.grad_tol,
                                 step_tol=cfg.step_tol)
    nlev = len(bundle)
    vp = init or VarianceParams(cfg.init_sigma2, [cfg.init_lambda] * nlev, cfg.init_beta)
    if len(vp.lambdas) != nlev:
        raise ValueError("initial variances need one amplitude per level")
    w0 = [KernelBundleParams.zeros(bundle) for _ in work]
    bias = [Volume3(grid, np.zeros(grid.dims)) for _ in work]
    state = EstimationState(work[0], w0, vp, bias, scale=scale, offset=offset)
    prev = None
    for it in range(1, cfg.max_outer + 1):
        t0 = time.perf_counter()
        theta = update_template(work, w0, cfg.euler_steps,
                                bias if cfg.bias_corrected_template else None)
        systems = []
        for i, img in enumerate(work):
            systems += linearized_systems(img, theta, w0[i], partition, cfg.bias_support,
                                          chosen, cfg.euler_steps, image_index=i)
        try:
            fit = fit_variances(systems, vp, max_evals=cfg.variance_evals,
                                xatol=cfg.variance_xatol)
        except NumericalError as exc:
            raise NumericalError(f"outer iteration {it}, variance estimation: {exc}") from exc
        vp, nll = fit.params, fit.nll
        log.debug("outer iteration %d: variances fitted in %d evaluations (%.1fs)",
                  it, fit.evaluations, time.perf_counter() - t0)
        grad = gradient_central(theta)
        new_w0 = []
        for i, img in enumerate(work):
            prob = PosteriorProblem(theta, img, vp, bundle, partition, cfg.bias_support,
                                    steps=cfg.euler_steps, settings=settings,
                                    operator=operator, template_grad=grad)
            res = multiscale_schedule(prob, w_init=w0[i], trace=cfg.trace)
            state.traces += [(it, i) + tuple(r) for r in res.trace]
            if res.line_search_failed:
                log.info("outer iteration %d image %d: line search stopped without "
                         "descent; keeping the best point", it, i)
            new_w0.append(res.params)
            log.debug("outer iteration %d image %d: %d descent steps, P=%.6g (%.1fs)",
                      it, i, res.iterations, res.value, time.perf_counter() - t0)
        w0 = center(new_w0) if cfg.center_deformations else new_w0
        bias = predict_biases(work, theta, w0, operator, vp.beta, cfg.euler_steps)
        record = IterationRecord(it, vp, nll, time.perf_counter() - t0)
        state.template, state.w0, state.variances, state.bias = theta, w0, vp, bias
        state.iteration = it
        if state.history and nll > state.history[-1] + 1e-6 * abs(state.history[-1]):
            state.violations += 1
            log.info("outer iteration %d: likelihood rose from %.6g to %.6g",
                     it, state.history[-1], nll)
        state.history.append(nll)
        state.records.append(record)
        log.info("outer iteration %d: L=%.6g sigma2=%.4g lambdas=%s beta=%.4g",
                 it, nll, vp.sigma2, vp.lambdas, vp.beta)
        if callback is not None:
            callback(state, record)
        if prev is not None and abs(nll - prev) <= cfg.tol * max(abs(prev), 1e-300):
            state.converged = True
            break
        prev = nll
    # refresh the template (and the biases against it) with the final deformations
    theta = update_template(work, state.w0, cfg.euler_steps,
                            state.bias if cfg.bias_corrected_template else None)
    state.bias = predict_biases(work, theta, state.w0, operator, state.variances.beta,
                                cfg.euler_steps)
    state.template = theta
    # back to input units
    state.template = Volume3(grid, state.template.data * scale + offset)
    state.bias = [Volume3(grid, b.data * scale) for b in state.bias]
    return state


def velocity_of(state: EstimationState, i):
    return velocity(state.w0[i])
