from math import factorial

import numpy as np
import pytest
from hypothesis import given, strategies as st

from heightfit import diffgeo as dg
from heightfit import oracle
from heightfit.fitting import (
    FitConfig,
    FitFailedError,
    assemble_vandermonde,
    build_local_frame,
    coeff_index,
    column_scale,
    compute_weights,
    fit_height,
    fit_heights,
    iterative_fit,
    iterative_fits,
    monomial_exponents,
    safeguarded_solve,
    to_global,
    to_local,
)
from heightfit.mesh import Mesh, n_coeffs, vertex_normals_averaged

from test_mesh import grid_mesh


def poly_values(c, u, v, degree):
    return sum(
        ci * u ** j * v ** k / (factorial(j) * factorial(k))
        for ci, (j, k) in zip(c, monomial_exponents(degree))
    )


class TestFrame:
    def test_canonical(self):
        f = build_local_frame([0, 0, 0], [0, 0, 1.0])
        np.testing.assert_array_equal(f.frame, np.eye(3))

    def test_x_normal(self):
        q = build_local_frame([0, 0, 0], [1.0, 0, 0]).frame
        np.testing.assert_array_equal(q[:, 2], [1, 0, 0])
        assert np.linalg.det(q) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(q.T @ q, np.eye(3), atol=1e-15)

    def test_random_normals(self, rng):
        n = rng.standard_normal((1000, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        for m in n:
            q = build_local_frame(np.zeros(3), m).frame
            assert np.abs(q.T @ q - np.eye(3)).max() <= 1e-13
            assert abs(np.linalg.det(q) - 1) <= 1e-12

    @pytest.mark.parametrize("bad", [[0, 0, 0], [0, 0, 2.0]])
    def test_bad_normal(self, bad):
        with pytest.raises(ValueError):
            build_local_frame(np.zeros(3), bad)

    def test_to_local(self, rng):
        f = build_local_frame(np.zeros(3), [0, 0, 1.0])
        np.testing.assert_array_equal(to_local(f, [[1.0, 2.0, 3.0]]), [[1, 2, 3]])
        g = build_local_frame(rng.standard_normal(3), [0.6, 0.0, 0.8])
        np.testing.assert_allclose(to_local(g, g.origin[None]), [[0, 0, 0]], atol=0)
        pts = rng.standard_normal((50, 3))
        np.testing.assert_allclose(to_local(g, to_global(g, pts)), pts, atol=1e-14)


class TestVandermonde:
    def test_cubic_row(self):
        v, _ = assemble_vandermonde([[1.0, 2.0]], 3)
        np.testing.assert_allclose(v[0], [1, 1, 2, 0.5, 2, 2, 1 / 6, 1, 2, 4 / 3], rtol=1e-15)

    def test_linear_origin(self):
        v, f = assemble_vandermonde([[0.0, 0.0, 5.0]], 1)
        np.testing.assert_array_equal(v[0], [1, 0, 0])
        assert f[0] == 5.0

    def test_column_counts(self):
        assert [assemble_vandermonde(np.zeros((1, 2)), d)[0].shape[1] for d in range(1, 7)] == [3, 6, 10, 15, 21, 28]
        assert [n_coeffs(d) for d in range(1, 7)] == [3, 6, 10, 15, 21, 28]

    def test_ordering(self):
        assert monomial_exponents(2) == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
        for j, k in monomial_exponents(6):
            assert monomial_exponents(6)[coeff_index(j, k)] == (j, k)


class TestWeights:
    def test_single_point(self):
        w = compute_weights([[1.0, 0.0]], [[0.0, 0.0, 1.0]], 2)
        assert w[0] == pytest.approx(1.01 ** -0.5, rel=1e-15)
        assert w[0] == pytest.approx(0.995037, abs=1e-6)

    def test_back_facing(self):
        w = compute_weights([[1.0, 0.0], [0.5, 0.5]], [[0, 0, 1.0], [0.0, 0.98, -0.2]], 2)
        assert w[1] == 0.0

    def test_center_finite(self):
        pts = [[0, 0], [1, 0], [0, 1], [-1, 0]]
        w = compute_weights(pts, np.tile([0, 0, 1.0], (4, 1)), 2)
        assert np.all(np.isfinite(w)) and w[0] > w[1]

    def test_mask_ignores_padding(self):
        pts = np.array([[0, 0], [1, 0], [0, 1], [9, 9]], float)
        nrm = np.tile([0, 0, 1.0], (4, 1))
        a = compute_weights(pts[:3], nrm[:3], 3)
        b = compute_weights(pts, nrm, 3, mask=np.array([1, 1, 1, 0], bool))
        np.testing.assert_array_equal(b[:3], a)
        assert b[3] == 0.0


class TestColumnScale:
    def test_diag(self):
        s, zero = column_scale([[2.0, 0.0], [0.0, 4.0]])
        np.testing.assert_array_equal(s, [0.5, 0.25])
        assert not zero.any()

    def test_unit(self):
        s, _ = column_scale(np.eye(3))
        np.testing.assert_array_equal(s, [1, 1, 1])

    def test_norms(self, rng):
        a = rng.standard_normal((12, 7)) * rng.uniform(1e-3, 1e3, 7)
        s, _ = column_scale(a)
        np.testing.assert_allclose(np.linalg.norm(a * s, axis=0), 1.0, atol=1e-14)

    def test_zero_column_flagged(self):
        s, zero = column_scale([[1.0, 0.0], [1.0, 0.0]])
        assert s[1] == 1.0 and zero[1] and not zero[0]


def spread_points(rng, m=60, r=1.0):
    return rng.uniform(-r, r, (m, 2))


class TestSafeguardedSolve:
    def test_quadratic_reproduction(self, rng):
        uv = spread_points(rng, 20)
        f = uv[:, 0] ** 2 + 3 * uv[:, 0] * uv[:, 1]
        v, _ = assemble_vandermonde(uv, 2)
        res = safeguarded_solve(v, f, np.ones(20))
        expect = np.zeros(6)
        expect[coeff_index(2, 0)] = 2.0
        expect[coeff_index(1, 1)] = 3.0
        np.testing.assert_allclose(res.coeffs, expect, atol=1e-8)
        assert res.achieved_degree == 2 and res.point_count == 20

    @pytest.mark.parametrize("degree", range(1, 7))
    def test_exact_reproduction(self, degree):
        rng = np.random.default_rng(100 + degree)
        c = rng.uniform(0.5, 2.0, n_coeffs(degree)) * rng.choice([-1, 1], n_coeffs(degree))
        uv = spread_points(rng, 3 * n_coeffs(degree))
        f = poly_values(c, uv[:, 0], uv[:, 1], degree)
        v, _ = assemble_vandermonde(uv, degree)
        res = safeguarded_solve(v, f, np.ones(len(f)))
        assert res.achieved_degree == degree
        np.testing.assert_allclose(res.coeffs, c, rtol=1e-8)

    def test_collinear_drops_to_linear(self, caplog):
        u = np.linspace(-1, 1, 9)
        uv = np.c_[u, 0.5 * u + 0.2]
        v, _ = assemble_vandermonde(uv, 2)
        res = safeguarded_solve(v, u ** 2, np.ones(9), FitConfig(cond_threshold=1e3))
        assert res.achieved_degree == 1
        # the linear block is itself singular, which is reported and logged
        assert res.cond_estimate >= 1e3
        assert "ill-conditioned" in caplog.text

    def test_circle_drops_quadratic_block(self):
        # u^2 + v^2 is constant on a circle, so only the linear fit is determined
        t = np.linspace(0, 2 * np.pi, 12, endpoint=False)
        u, w = np.cos(t), np.sin(t)
        v, _ = assemble_vandermonde(np.c_[u, w], 2)
        res = safeguarded_solve(v, 0.3 + 1.5 * u - 0.5 * w, np.ones(12))
        assert res.achieved_degree == 1
        np.testing.assert_allclose(res.coeffs, [0.3, 1.5, -0.5], atol=1e-12)

    def test_normal_equations_oracle(self, rng):
        uv = spread_points(rng, 40)
        f = np.sin(uv[:, 0]) + np.cos(2 * uv[:, 1])
        v, _ = assemble_vandermonde(uv, 3)
        res = safeguarded_solve(v, f, np.full(40, 0.7))
        oracle_c = np.linalg.solve(v.T @ v, v.T @ f)
        np.testing.assert_allclose(res.coeffs, oracle_c, atol=1e-8)

    def test_scaling_neutral(self, rng):
        uv = spread_points(rng, 40, r=0.5)
        f = np.exp(uv[:, 0]) * uv[:, 1]
        v, _ = assemble_vandermonde(uv, 3)
        res = safeguarded_solve(v, f, np.ones(40), FitConfig(degree=3, conditioning=False))
        unscaled = np.linalg.lstsq(v, f, rcond=None)[0]
        np.testing.assert_allclose(res.coeffs, unscaled, atol=1e-9)

    @given(st.integers(0, 10_000))
    def test_weighting_neutral(self, seed):
        rng = np.random.default_rng(seed)
        uv = spread_points(rng, 25)
        c = rng.standard_normal(10)
        f = poly_values(c, uv[:, 0], uv[:, 1], 3)
        v, _ = assemble_vandermonde(uv, 3)
        a = safeguarded_solve(v, f, np.ones(25))
        b = safeguarded_solve(v, f, rng.uniform(0.1, 10, 25))
        np.testing.assert_allclose(a.coeffs, b.coeffs, atol=1e-9 * max(1, np.abs(c).max()))

    @given(st.integers(0, 10_000), st.floats(1.5, 1e6), st.floats(1.5, 1e6))
    def test_degree_monotone_in_threshold(self, seed, t1, t2):
        rng = np.random.default_rng(seed)
        uv = rng.uniform(-1, 1, (22, 2)) * [1, rng.uniform(0.01, 1)]
        v, _ = assemble_vandermonde(uv, 4)
        f = np.cos(uv[:, 0] + uv[:, 1])
        lo, hi = sorted((t1, t2))
        d_lo = safeguarded_solve(v, f, np.ones(22), FitConfig(degree=4, cond_threshold=lo)).achieved_degree
        d_hi = safeguarded_solve(v, f, np.ones(22), FitConfig(degree=4, cond_threshold=hi)).achieved_degree
        assert d_lo <= d_hi

    def test_cond_below_threshold(self, rng):
        for _ in range(50):
            uv = rng.uniform(-1, 1, (30, 2)) * [1, rng.uniform(0.01, 1)]
            v, _ = assemble_vandermonde(uv, 5)
            res = safeguarded_solve(v, uv[:, 0] ** 3, np.ones(30), FitConfig(degree=5))
            if res.achieved_degree > 1:
                assert res.cond_estimate < 1e3

    def test_too_few_points(self):
        v, _ = assemble_vandermonde([[0, 0], [1, 0], [0, 1]], 1)
        with pytest.raises(FitFailedError):
            safeguarded_solve(v, [0, 0, 0], [1, 1, 0])

    def test_count_caps_degree(self):
        rng = np.random.default_rng(2)
        uv = spread_points(rng, 12)
        v, _ = assemble_vandermonde(uv, 4)
        res = safeguarded_solve(v, uv[:, 0], np.ones(12), FitConfig(degree=4, conditioning=False))
        assert res.achieved_degree == 3

    def test_zero_weights_removed(self, rng):
        uv = spread_points(rng, 30)
        f = np.sin(uv[:, 0])
        v, _ = assemble_vandermonde(uv, 2)
        w = np.ones(30)
        w[20:] = 0.0
        a = safeguarded_solve(v, f, w)
        b = safeguarded_solve(v[:20], f[:20], w[:20])
        np.testing.assert_allclose(a.coeffs, b.coeffs, atol=1e-14)
        assert a.point_count == 20


def sphere_normals(mesh):
    return mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)


class TestFitHeight:
    def test_planar(self):
        m = grid_mesh(8)
        rot = np.array([[0.6, 0.0, 0.8], [0.0, 1.0, 0.0], [-0.8, 0.0, 0.6]])
        tilted = Mesh(m.vertices @ rot.T * 0.1, m.faces)
        nrm = vertex_normals_averaged(tilted)
        for v in (0, 40, 80):
            res, _ = fit_height(tilted, v, nrm, FitConfig(degree=2))
            np.testing.assert_allclose(res.gradient, 0, atol=1e-10)
            np.testing.assert_allclose(res.hessian, 0, atol=1e-10)

    def test_table_stencil(self):
        m = grid_mesh(12)
        nrm = vertex_normals_averaged(m)
        res, _ = fit_height(m, 6 * 13 + 6, nrm, FitConfig(degree=2))
        assert res.ring_used == 1.5 and res.point_count == 13

    def test_icosphere_curvature(self):
        m = oracle.gen_sphere_mesh(3)
        res, frame = fit_height(m, 5, vertex_normals_averaged(m), FitConfig(degree=2))
        kh, kg = dg.mean_gaussian(res.gradient, res.hessian)
        assert kh == pytest.approx(-1.0, abs=0.02)
        assert kg == pytest.approx(1.0, abs=0.04)
        assert frame.normal @ m.vertices[5] > 0.99

    def test_batched_matches_single(self):
        m = oracle.gen_graph_mesh("f1", "irregular", 1, seed=4)
        nrm = vertex_normals_averaged(m)
        for d in (1, 2, 3, 5):
            cfg = FitConfig(degree=d)
            fits = fit_heights(m, nrm, cfg)
            for v in range(0, m.n_vertices, 23):
                res, frame = fit_height(m, v, nrm, cfg)
                np.testing.assert_allclose(frame.frame, fits.frames[v], atol=0)
                assert res.achieved_degree == fits.achieved[v]
                assert res.ring_used == fits.rings[v]
                k = n_coeffs(res.achieved_degree)
                np.testing.assert_allclose(fits.coeffs[v, :k], res.coeffs, rtol=1e-9, atol=1e-11)

    def test_convergence_order(self):
        # Taylor coefficient errors at a base vertex kept through subdivision
        surf = oracle.F1
        for d in (2, 3, 4):
            errs = []
            for lv in range(2, 6):
                m = oracle.gen_graph_mesh(surf, "irregular", lv, seed=0)
                v = 40
                ex = surf.exact(m.vertices[v])
                nrm = vertex_normals_averaged(m)
                nrm[v] = ex.normal[0]
                res, frame = fit_height(m, v, nrm, FitConfig(degree=d))
                g, h = surf.grad_hess(m.vertices[v, 0], m.vertices[v, 1])
                loc = dg.transfer_frame(g, h, np.eye(3), frame.frame)
                errs.append((np.abs(res.gradient - loc.grad).max(), np.abs(res.hessian - loc.hess).max()))
            errs = np.array(errs)
            rates = np.log2(errs[0] / errs[-1]) / 3
            assert rates[0] >= d - 0.5, (d, rates)
            assert rates[1] >= d - 1.5, (d, rates)


class TestIterativeFit:
    def test_plane(self):
        m = grid_mesh(6)
        nrm = vertex_normals_averaged(m)
        _, frame = fit_height(m, 24, nrm, FitConfig(degree=3))
        gh = iterative_fit(m, 24, frame, nrm, FitConfig(degree=3))
        np.testing.assert_allclose(gh.hess, 0, atol=1e-10)
        assert gh.hess[0, 1] == gh.hess[1, 0]

    def test_sphere_exact_normals_beat_plain(self):
        m = oracle.gen_sphere_mesh(3)
        exact = sphere_normals(m)
        cfg = FitConfig(degree=3)
        worse = 0
        for v in range(0, m.n_vertices, 7):
            res, frame = fit_height(m, v, exact, cfg)
            truth = dg.transfer_frame([0, 0], -np.eye(2), frame.frame, frame.frame).hess
            gh = iterative_fit(m, v, frame, exact, cfg, grad=res.gradient)
            worse += np.abs(gh.hess - truth).max() >= np.abs(res.hessian - truth).max()
        assert worse == 0

    def test_batched_matches_single(self):
        m = oracle.gen_torus_mesh(0, jitter=True, seed=1)
        nrm = vertex_normals_averaged(m)
        cfg = FitConfig(degree=3, iterative=True)
        fits = fit_heights(m, nrm, cfg)
        _, fitted = dg.normal_from_gradient(fits.grad, fits.frames)
        hess, failed = iterative_fits(fits, fitted, cfg)
        assert not failed.any()
        for v in range(0, m.n_vertices, 31):
            res, frame = fit_height(m, v, nrm, cfg)
            gh = iterative_fit(m, v, frame, fitted, cfg, approx_normals=nrm, grad=res.gradient)
            np.testing.assert_allclose(hess[v], gh.hess, rtol=1e-9, atol=1e-11)

    def test_back_facing_normals_ignored(self):
        m = grid_mesh(6)
        nrm = vertex_normals_averaged(m)
        fitted = nrm.copy()
        fitted[[17, 25, 31]] = [0, 0, -1.0]
        _, frame = fit_height(m, 24, nrm, FitConfig(degree=2))
        gh = iterative_fit(m, 24, frame, fitted, FitConfig(degree=2), approx_normals=nrm)
        np.testing.assert_allclose(gh.hess, 0, atol=1e-10)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(degree=0), dict(degree=7), dict(cond_threshold=1.0), dict(ring_cap=4.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            FitConfig(**kw)
