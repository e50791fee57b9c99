import logging

import numpy as np
import pytest
import scipy.linalg as sla
from _oracles import (
    dense_bias,
    dense_blockdiag_nll,
    dense_gls_blup,
    dense_gls_blup_marginal,
    random_instance,
)

from lmmtemplate.deformation import KernelBundle, KernelBundleParams, z_matrix
from lmmtemplate.kernels import WendlandKernel, dense_kernel_matrix, patch_kernel
from lmmtemplate.mixed_model import (
    NumericalError,
    PatchOperator,
    PatchSystem,
    VarianceParams,
    blup_bias,
    blup_w,
    estimate_variances,
    fit_variances,
    linearized_systems,
    marginal_covariance,
    neg_log_likelihood,
    patch_contrast,
    profile_sigma2,
    select_patches,
)
from lmmtemplate.volume import Grid, Volume3, make_partition, patch_coordinates


def plain_system(r, kernel=None, zcz=()):
    r = np.asarray(r, dtype=float)
    k = np.eye(len(r)) if kernel is None else kernel
    return PatchSystem(r, k, tuple(zcz))


class TestVarianceParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            VarianceParams(0.0, [1.0], 0.0)
        with pytest.raises(ValueError):
            VarianceParams(1.0, [-1.0], 0.0)
        with pytest.raises(ValueError):
            VarianceParams(1.0, [1.0], -0.1)

    def test_text_roundtrip(self):
        vp = VarianceParams(0.0123, [0.5, 0.0, 1e-7], 3.25)
        text = vp.to_text()
        assert text.splitlines()[0] == "sigma2=0.0123"
        assert "lambda_3=1e-07" in text
        assert VarianceParams.from_text(text) == vp


class TestMarginalCovariance:
    def test_identity(self):
        ps = plain_system(np.ones(4), dense_kernel_matrix(WendlandKernel(5), np.eye(4, 3), np.eye(4, 3)))
        np.testing.assert_array_equal(marginal_covariance(ps, VarianceParams(1, [0.0], 0.0)), np.eye(4))

    def test_two_far_voxels(self):
        pts = np.array([[0.0, 0, 0], [50.0, 0, 0]])
        k = dense_kernel_matrix(WendlandKernel(40.0), pts, pts)
        v = marginal_covariance(plain_system([1.0, 2.0], k), VarianceParams(1, [], 1.0))
        np.testing.assert_array_equal(v, 2 * np.eye(2))

    def test_random_matches_assembly(self):
        rng = np.random.default_rng(0)
        systems, grams, _, kernels = random_instance(rng, n_patches=1, nlev=2)
        ps = systems[0]
        vp = VarianceParams(0.5, [0.7, 1.3], 0.4)
        ref = np.eye(ps.n) + 0.4 * kernels[0]
        for lam, z, g in zip(vp.lambdas, ps.z, grams):
            ref += lam ** 2 * z @ g @ z.T
        np.testing.assert_allclose(marginal_covariance(ps, vp), ref, rtol=1e-12, atol=1e-12)


class TestLikelihood:
    def test_identity_reduction(self):
        rng = np.random.default_rng(1)
        systems = [plain_system(rng.standard_normal(n)) for n in (5, 7)]
        vp = VarianceParams(0.3, [], 0.0)
        rss = sum(float(ps.residual @ ps.residual) for ps in systems)
        assert neg_log_likelihood(systems, vp) == pytest.approx(12 * np.log(0.3) + rss / 0.3)

    @pytest.mark.parametrize("seed", range(5))
    def test_two_patch_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        systems, grams, _, _ = random_instance(rng, n_patches=2)
        vp = VarianceParams(float(rng.uniform(0.1, 2)), rng.uniform(0, 2, 2), float(rng.uniform(0, 3)))
        ref = dense_blockdiag_nll(systems, grams, vp)
        assert neg_log_likelihood(systems, vp) == pytest.approx(ref, rel=1e-8)

    def test_single_patch_equals_full_image(self):
        grid = Grid((6, 5, 4), (2.0, 2.0, 2.0))
        bundle = KernelBundle(grid, (8.0,), 4.0)
        x = grid.coordinates()
        theta = Volume3(grid, np.exp(-((x - 5.0) ** 2).sum(-1) / 50.0))
        img = Volume3(grid, theta.data + 0.05 * np.random.default_rng(2).standard_normal(grid.dims))
        w0 = KernelBundleParams.zeros(bundle)
        part = make_partition(grid.dims, max(grid.dims))
        systems = linearized_systems(img, theta, w0, part, 40.0)
        vp = VarianceParams(0.01, [0.8], 0.5)
        z = z_matrix(theta, w0).toarray()
        g = np.kron(bundle.levels[0].gram.toarray(), np.eye(3))
        pts = patch_coordinates(grid, (0, 0, 0), grid.dims)
        k = dense_kernel_matrix(WendlandKernel(40.0), pts, pts)
        v = 0.64 * z @ g @ z.T + 0.5 * k + np.eye(grid.size)
        r = (img.data - theta.data).ravel(order="F")
        ref = grid.size * np.log(0.01) + np.linalg.slogdet(v)[1] + r @ np.linalg.solve(v, r) / 0.01
        assert neg_log_likelihood(systems, vp) == pytest.approx(ref, rel=1e-10)

    def test_jitter_logged(self, caplog):
        k = np.diag([-(1 + 1e-13), 5.0])
        ps = plain_system([1.0, 1.0], k)
        with caplog.at_level(logging.WARNING, logger="lmmtemplate.mixed_model"):
            val = neg_log_likelihood([ps], VarianceParams(1.0, [], 1.0))
        assert np.isfinite(val)
        assert "jitter" in caplog.text

    def test_factorisation_failure_names_patch(self):
        ps = PatchSystem(np.ones(2), -5 * np.eye(2), (), image=3, patch=7)
        with pytest.raises(NumericalError, match="image 3 patch 7"):
            neg_log_likelihood([ps], VarianceParams(1.0, [], 1.0))


class TestProfile:
    def test_rss_over_n(self):
        rng = np.random.default_rng(3)
        systems = [plain_system(rng.standard_normal(n)) for n in (4, 9)]
        rss = sum(float(ps.residual @ ps.residual) for ps in systems)
        assert profile_sigma2(systems, [], 0.0) == pytest.approx(rss / 13)

    def test_zero_residual_floor(self):
        assert profile_sigma2([plain_system(np.zeros(5))], [], 0.0) == 1e-12

    def test_scan(self):
        rng = np.random.default_rng(4)
        systems, _, _, _ = random_instance(rng, n_patches=3)
        lam, beta = [0.3, 0.9], 0.7
        s_hat = profile_sigma2(systems, lam, beta)
        best = neg_log_likelihood(systems, VarianceParams(s_hat, lam, beta))
        for s in rng.uniform(0.1, 10, 10) * s_hat:
            assert best <= neg_log_likelihood(systems, VarianceParams(s, lam, beta)) + 1e-9


def simulate_systems(rng, sigma2, lambdas, beta, n_patches=20, n=64, n_w=12):
    """Patch systems drawn from the linear mixed model itself."""
    pts_w = rng.uniform(0, 10, size=(n_w, 3))
    gram = dense_kernel_matrix(WendlandKernel(8.0), pts_w, pts_w)
    side = round(n ** (1 / 3))
    ext = (side, side, n // side ** 2)
    kern, _, _ = patch_kernel(ext, (2.0, 2.0, 2.0), 40.0)
    n = int(np.prod(ext))
    c = lambdas[0] ** 2 * gram
    w = np.linalg.cholesky(c + 1e-12 * np.eye(n_w)) @ rng.standard_normal(n_w) * np.sqrt(sigma2)
    lk = np.linalg.cholesky(kern + 1e-10 * np.eye(n))
    systems = []
    for j in range(n_patches):
        z = rng.standard_normal((n, n_w)) * 0.3
        x = np.sqrt(sigma2 * beta) * (lk @ rng.standard_normal(n))
        e = np.sqrt(sigma2) * rng.standard_normal(n)
        systems.append(PatchSystem.from_design(z @ w + x + e, kern, [z], [gram], patch=j))
    return systems


class TestEstimation:
    def test_noise_only(self):
        rng = np.random.default_rng(5)
        systems = simulate_systems(rng, 0.01, [0.0], 0.0)
        vp = estimate_variances(systems, VarianceParams(0.05, [1.0], 1.0))
        assert vp.sigma2 == pytest.approx(0.01, rel=0.2)
        assert vp.lambdas[0] < 1e-2 and vp.beta < 1e-2

    @pytest.mark.parametrize("seed", range(5))
    def test_bias_amplitude(self, seed):
        rng = np.random.default_rng(10 + seed)
        systems = simulate_systems(rng, 0.01, [0.0], 4.0)
        vp = estimate_variances(systems, VarianceParams(0.05, [1.0], 1.0))
        assert 2.0 <= vp.beta <= 8.0

    def test_history_monotone_and_init_not_worse(self):
        rng = np.random.default_rng(6)
        systems = simulate_systems(rng, 0.02, [1.5], 2.0, n_patches=8)
        init = VarianceParams(0.02, [1.5], 2.0)
        fit = fit_variances(systems, init)
        assert all(b <= a for a, b in zip(fit.history, fit.history[1:]))
        assert fit.nll <= neg_log_likelihood(systems, init) + 1e-9
        assert fit.nll == pytest.approx(neg_log_likelihood(systems, fit.params), rel=1e-12)
        assert fit.evaluations <= 200 + 2

    def test_zeroing_tolerance(self):
        # the plain maximum is never above the parsimonious fit, and the
        # parsimonious fit costs at most the tolerance per zeroed amplitude
        rng = np.random.default_rng(8)
        systems = simulate_systems(rng, 0.01, [0.0], 0.0, n_patches=6)
        init = VarianceParams(0.05, [1.0], 1.0)
        plain = fit_variances(systems, init, zero_tol=0.0)
        lrt = fit_variances(systems, init)
        assert plain.nll <= lrt.nll <= plain.nll + 2 * 2.71
        assert lrt.params.lambdas[0] == 0.0 and lrt.params.beta == 0.0

    def test_deformation_amplitude_detected(self):
        rng = np.random.default_rng(7)
        systems = simulate_systems(rng, 0.01, [3.0], 0.0, n_patches=1)
        # a single shared w is barely identifiable; only check the fit improves on zero
        fit = fit_variances(systems, VarianceParams(0.01, [1.0], 0.5))
        assert fit.nll <= neg_log_likelihood(systems, VarianceParams(fit.params.sigma2, [0.0], 0.0))


class TestBlupW:
    def test_zero_residual(self):
        rng = np.random.default_rng(8)
        systems, grams, _, _ = random_instance(rng)
        for ps in systems:
            ps.residual[:] = 0.0
        out = blup_w(systems, VarianceParams(1, [1.0, 1.0], 0.5), grams)
        assert not np.any(out)

    def test_scalar(self):
        z, c, r = 1.7, 0.6, 0.9
        ps = PatchSystem.from_design([r], np.eye(1), [np.array([[z]])], [np.array([[1.0]])])
        out = blup_w([ps], VarianceParams(1.0, [np.sqrt(c)], 0.0), [np.array([[1.0]])])
        assert out[0] == pytest.approx(z * r / (1 / c + z * z), rel=1e-14)

    @pytest.mark.parametrize("seed", range(10))
    def test_dense_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        systems, grams, z_full, _ = random_instance(rng)
        vp = VarianceParams(1.0, rng.uniform(0.2, 2.0, 2), float(rng.uniform(0, 2)))
        got = blup_w(systems, vp, grams)
        np.testing.assert_allclose(got, dense_gls_blup(systems, grams, z_full, vp), rtol=0, atol=1e-8)
        np.testing.assert_allclose(got, dense_gls_blup_marginal(systems, grams, z_full, vp),
                                   rtol=0, atol=1e-8)

    def test_zero_level_excluded(self):
        rng = np.random.default_rng(9)
        systems, grams, z_full, _ = random_instance(rng, n_w=10)
        vp = VarianceParams(1.0, [0.0, 1.2], 0.3)
        out = blup_w(systems, vp, grams)
        k0 = grams[0].shape[0]
        assert not np.any(out[:k0])
        sub = [PatchSystem.from_design(ps.residual, ps.kernel, [ps.z[1]], [grams[1]]) for ps in systems]
        ref = dense_gls_blup(sub, [grams[1]], z_full[:, k0:], VarianceParams(1.0, [1.2], 0.3))
        np.testing.assert_allclose(out[k0:], ref, atol=1e-8)

    def test_needs_design(self):
        with pytest.raises(ValueError):
            blup_w([plain_system(np.ones(3))], VarianceParams(1, [1.0], 0), [np.eye(3)])


class TestBlupBias:
    def test_beta_zero(self):
        ps = plain_system(np.arange(4.0))
        assert not np.any(blup_bias(ps, VarianceParams(1, [], 0.0)))

    def test_single_voxel(self):
        ps = plain_system([2.0], np.eye(1))
        s = 3.0
        assert blup_bias(ps, VarianceParams(1, [], s))[0] == pytest.approx(s / (s + 1) * 2.0)

    def test_large_beta_recovers_smooth_residual(self):
        ext = (4, 4, 4)
        kern, _, _ = patch_kernel(ext, (2.0, 2.0, 2.0), 40.0)
        pts = patch_coordinates(Grid(ext, (2.0, 2.0, 2.0)), (0, 0, 0), ext)
        r = 1.0 + 0.01 * pts[:, 0]
        out = blup_bias(plain_system(r, kern), VarianceParams(1, [], 1e6))
        assert np.linalg.norm(out - r) / np.linalg.norm(r) < 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_dense_and_shrinkage(self, seed):
        rng = np.random.default_rng(seed)
        systems, _, _, _ = random_instance(rng)
        beta = float(rng.uniform(0.01, 10))
        for ps in systems:
            out = blup_bias(ps, VarianceParams(1, [], beta))
            np.testing.assert_allclose(out, dense_bias(ps, beta), rtol=0, atol=1e-10)
            assert np.linalg.norm(out) <= np.linalg.norm(ps.residual)


class TestPatchOperator:
    def test_matches_patchwise_bias(self):
        grid = Grid((7, 6, 5), (2.0, 2.0, 2.0))
        part = make_partition(grid.dims, 4)
        op = PatchOperator(grid, part, 40.0)
        arr = np.random.default_rng(0).standard_normal(grid.dims)
        beta = 0.8
        shrunk = op.shrink(arr, beta)
        solved, quad = op.solve(arr, beta)
        total = 0.0
        for j, (start, ext) in enumerate(part.patches):
            k, _, _ = patch_kernel(ext, grid.spacing, 40.0)
            r = part.extract(arr, j)
            ps = plain_system(r, k)
            np.testing.assert_allclose(part.extract(shrunk, j), blup_bias(ps, VarianceParams(1, [], beta)),
                                       atol=1e-10)
            a = beta * k + np.eye(len(r))
            np.testing.assert_allclose(part.extract(solved, j), np.linalg.solve(a, r), atol=1e-10)
            total += r @ np.linalg.solve(a, r)
        assert quad == pytest.approx(total, rel=1e-10)


class TestPatchSelection:
    def test_all_when_count_nonpositive(self):
        part = make_partition((8, 8, 8), 4)
        assert select_patches(part, 0) == list(range(8))

    def test_seeded_subset(self):
        part = make_partition((16, 16, 16), 4)
        a = select_patches(part, 10, seed=3)
        assert a == select_patches(part, 10, seed=3)
        assert len(set(a)) == 10 and a == sorted(a)

    def test_score_excludes_background(self):
        part = make_partition((16, 16, 16), 4)
        vol = np.zeros((16, 16, 16))
        vol[4:12, 4:12, 4:12] = 1.0
        score = patch_contrast(vol, part)
        chosen = select_patches(part, 5, score=score)
        assert all(score[j] >= 0.1 * score.max() for j in chosen)


class TestLinearizedSystems:
    def test_blocks_match_design(self):
        grid = Grid((8, 8, 8), (2.0, 2.0, 2.0))
        bundle = KernelBundle(grid, (10.0, 6.0), 4.0)
        x = grid.coordinates()
        theta = Volume3(grid, np.exp(-((x - 7.0) ** 2).sum(-1) / 40.0))
        rng = np.random.default_rng(1)
        w0 = KernelBundleParams(bundle, [0.05 * rng.standard_normal((lv.n_centers, 3)) for lv in bundle.levels])
        img = Volume3(grid, theta.data + 0.01 * rng.standard_normal(grid.dims))
        part = make_partition(grid.dims, 4)
        systems = linearized_systems(img, theta, w0, part, 40.0, patches=[0, 5], with_design=True)
        zfull = z_matrix(theta, w0).toarray()
        off = bundle.offsets()
        for ps in systems:
            rows = np.flatnonzero(np.isin(np.arange(grid.size), _patch_rows(part, ps.patch, grid)))
            rows = _patch_rows(part, ps.patch, grid)
            for m, lv in enumerate(bundle.levels):
                zm = zfull[np.ix_(rows, np.arange(off[m], off[m + 1]))]
                g3 = np.kron(lv.gram.toarray(), np.eye(3))
                np.testing.assert_allclose(ps.zcz[m], zm @ g3 @ zm.T, atol=1e-10)
                full_cols = np.zeros_like(zm)
                full_cols[:, ps.cols[m]] = ps.z[m]
                np.testing.assert_allclose(full_cols, zm, atol=1e-12)


def _patch_rows(part, j, grid):
    idx = np.arange(grid.size).reshape(grid.dims, order="F")
    return part.extract(idx, j)
