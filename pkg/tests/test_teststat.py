import math

import numpy as np
import pytest
from conftest import make_sample
from scipy import integrate

from clusterhte.data import ClusteredSample
from clusterhte.errors import DataError, NumericalError
from clusterhte.estimator import grid_estimates
from clusterhte.kernel import conv_ratio
from clusterhte.teststat import (
    Grid,
    StatisticDecomposition,
    _lag_matrix,
    _w2_matrix,
    bias_a1,
    bias_a2,
    build_grid,
    gaussian_abs_cov,
    lag_rule,
    s1_statistic,
    s2_statistic,
    sigma1_hat,
    sigma2_hat,
    t1_stat,
    t2_stat,
)


def one_point_grid(x0, span):
    return Grid(points=np.array([[x0]]), weights=np.array([span]),
                bounds=np.array([[x0 - span / 2, x0 + span / 2]]), span=span)


def test_grid_uniform_covariate():
    x = (np.arange(100_001) + 0.5) / 100_001
    g = build_grid(x, 9)
    assert np.allclose(g.points[:, 0], np.linspace(0.1, 0.9, 9), atol=1e-4)
    assert g.span == pytest.approx(0.8, abs=1e-4)
    assert g.weights[0] == pytest.approx(g.weights[1] / 2)
    assert g.weights.sum() == pytest.approx(g.span)
    assert np.all(np.diff(g.points[:, 0]) > 0)


def test_grid_two_points():
    g = build_grid(np.linspace(0, 1, 11), 2)
    assert g.size == 2
    assert np.allclose(g.weights, g.span / 2)


def test_grid_monte_carlo_box():
    u = (np.arange(100_001) + 0.5) / 100_001
    x = np.column_stack([u, u[::-1]])
    g = build_grid(x, 1000)
    assert g.method == "monte_carlo" and g.d == 2
    assert g.span == pytest.approx(0.64, abs=1e-3)
    assert g.weights.sum() == pytest.approx(g.span)
    assert np.all((g.points >= g.bounds[:, 0]) & (g.points <= g.bounds[:, 1]))


def test_grid_errors():
    with pytest.raises(ValueError):
        build_grid(np.arange(10.0), 1)
    with pytest.raises(DataError):
        build_grid(np.ones(10), 5)


def test_trapezoid_cubic():
    f = lambda x: 2 * x**3 - x**2 + 0.5 * x + 1
    x = np.linspace(-1.0, 3.0, 100_001)
    g = build_grid(x, 200)
    lo, hi = g.bounds[0]
    exact = (0.5 * hi**4 - hi**3 / 3 + 0.25 * hi**2 + hi) - (0.5 * lo**4 - lo**3 / 3 + 0.25 * lo**2 + lo)
    approx = float(g.weights @ f(g.points[:, 0]))
    assert abs(approx - exact) / abs(exact) < 1e-3


def test_gaussian_abs_cov_values():
    assert gaussian_abs_cov(0.0) == 0.0
    assert gaussian_abs_cov(1.0) == pytest.approx(1 - 2 / math.pi)
    assert gaussian_abs_cov(0.5) == pytest.approx(0.08137, abs=1e-5)
    assert gaussian_abs_cov(1.0 + 1e-14) == pytest.approx(1 - 2 / math.pi)
    with pytest.raises(ValueError):
        gaussian_abs_cov(1.01)
    with pytest.raises(ValueError):
        gaussian_abs_cov(np.nan)


def test_gaussian_abs_cov_shape():
    r = np.linspace(-1, 1, 201)
    g = gaussian_abs_cov(r)
    assert np.all(g >= 0)
    assert g[100] == 0.0
    assert np.allclose(g, g[::-1])
    assert np.all(np.diff(g[100:]) > 0)


def test_gaussian_abs_cov_small_mc():
    rng = np.random.default_rng(3)
    z1, z2 = rng.standard_normal((2, 1_000_000))
    for r in (-0.7, 0.3, 0.9):
        w = math.sqrt(1 - r * r) * z1 + r * z2
        mc = np.mean(np.abs(w) * np.abs(z2)) - np.mean(np.abs(w)) * np.mean(np.abs(z2))
        assert gaussian_abs_cov(r) == pytest.approx(mc, abs=2e-3)


def test_bias_examples():
    assert bias_a1(1.0, 1.0, 2) == pytest.approx(math.sqrt(2 / math.pi))
    assert bias_a1(0.8, 0.04, 4) == pytest.approx(19.149, abs=1e-3)
    assert bias_a1(0.8, 0.04, 1) == 0.0
    assert bias_a2(1.0, 1.0, 2) == pytest.approx(math.sqrt(2 / math.pi))
    assert bias_a2(0.8, 0.04, 4) == pytest.approx(5.106, abs=1e-3)
    assert bias_a2(0.0, 0.04, 4) == 0.0


def test_bias_with_grid_and_vector_bandwidth():
    g = Grid(points=np.zeros((3, 2)), weights=np.full(3, 0.5 / 3), bounds=np.zeros((2, 2)), span=0.5)
    assert bias_a1(g, [0.25, 0.16], 2) == pytest.approx((0.25 * 0.16) ** -0.5 * math.sqrt(2 / math.pi) * 0.5)


def duplicated_levels(seed=0):
    """Two exposure levels carrying identical data."""
    base = make_sample(C=20, n=6, levels=(0.0,), seed=seed)
    n = base.N
    return ClusteredSample(
        cluster=np.concatenate([base.cluster, base.cluster + base.C]),
        y=np.tile(base.y, 2), t=np.tile(base.t, 2), x=np.vstack([base.x, base.x]),
        pi=np.repeat([0.2, 0.8], n),
    )


def test_t1_zero_for_identical_levels():
    s = duplicated_levels()
    g = build_grid(s, 20)
    dec = t1_stat(s, g, 0.4)
    assert dec.raw == 0.0
    assert dec.bias > 0


def test_t1_single_point_oracle():
    s = make_sample(C=30, seed=4, tau=lambda x, pi: pi)
    g = one_point_grid(0.5, 0.8)
    h = 0.4
    est = grid_estimates(s, g.points, h)
    want = 0.8 * math.sqrt(s.N) * abs(est.tau[0, 0] - est.tau[1, 0]) / math.sqrt(est.rho2[0, 0] + est.rho2[1, 0])
    dec = t1_stat(s, g, h)
    assert dec.raw == pytest.approx(want, rel=1e-12)
    assert dec.bias == pytest.approx(bias_a1(0.8, h, 2))
    assert set(dec.contributions) == {"0-0.5"}


def test_t1_level_order_invariant():
    s = make_sample(C=30, levels=(0.1, 0.5, 0.9), seed=6, tau=lambda x, pi: pi * x[:, 0])
    g = build_grid(s, 15)
    a = t1_stat(s, g, 0.4).raw
    relabel = s.with_exposures(1.0 - s.pi)
    assert t1_stat(relabel, g, 0.4).raw == pytest.approx(a, rel=1e-12)


def test_t1_all_points_dropped():
    s = make_sample(C=30, seed=4)
    g = one_point_grid(5.0, 0.8)
    with pytest.raises(NumericalError, match="pair"):
        t1_stat(s, g, 0.4)


def test_t2_zero_for_flat_cate():
    s = make_sample(C=30, seed=2, tau=lambda x, pi: 1.0 + pi, noise=0.0)
    g = build_grid(s, 12)
    assert t2_stat(s, g, 0.4).raw == pytest.approx(0.0, abs=1e-9)


def test_t2_two_point_oracle():
    s = make_sample(C=40, seed=5, tau=lambda x, pi: x[:, 0])
    pts = np.array([[0.3], [0.6]])
    g = Grid(points=pts, weights=np.array([0.2, 0.3]), bounds=np.array([[0.3, 0.6]]), span=0.3)
    h = 0.5
    est = grid_estimates(s, pts, h)
    r = conv_ratio(0.3 / h)
    raw = 0.0
    for k in range(2):
        a, b = est.rho2[k]
        w2 = 1 / math.sqrt(a + b - 2 * math.sqrt(a * b) * r)
        ordered = 2 * (0.2 * 0.3) * math.sqrt(s.N) * abs(est.tau[k, 0] - est.tau[k, 1]) * w2 / 2
        raw += ordered
    dec = t2_stat(s, g, h)
    assert dec.raw == pytest.approx(raw, rel=1e-12)
    # bias uses the off-diagonal measure 2 * w1 * w2 per level
    assert dec.bias == pytest.approx(h**-0.5 * math.sqrt(2 / math.pi) * 0.5 * 2 * (2 * 0.06))


def test_t2_point_order_invariant():
    s = make_sample(C=30, seed=7, tau=lambda x, pi: x[:, 0] ** 2)
    g = build_grid(s, 10)
    perm = np.random.default_rng(0).permutation(10)
    g2 = Grid(points=g.points[perm], weights=g.weights[perm], bounds=g.bounds, span=g.span)
    assert t2_stat(s, g2, 0.3).raw == pytest.approx(t2_stat(s, g, 0.3).raw, rel=1e-12)


def test_w2_matrix_far_points():
    rho = np.array([0.5, 1.5, 2.0])
    ratio = np.zeros((3, 3))
    for mode in ("none", "linear", "absolute", "symmetric"):
        rad, bad = _w2_matrix(rho, ratio, mode)
        off = ~np.eye(3, dtype=bool)
        assert np.allclose(rad[off], (rho[:, None] + rho[None, :])[off])
        assert not bad.any()


def test_w2_linear_can_fail():
    rho = np.array([0.1, 2.0])
    ratio = np.array([[1.0, 0.9], [0.9, 1.0]])
    _, bad = _w2_matrix(rho, ratio, "linear")
    assert bad.any()
    _, bad = _w2_matrix(rho, ratio, "symmetric")
    assert not bad.any()


def test_sigma1_identical_pair_quadrature():
    # K = 2: the only tuple is (0, 1, 0, 1) with coefficient one
    s = make_sample(C=30, seed=1)
    g = build_grid(s, 10)
    h = 0.4
    est = grid_estimates(s, g.points, h, min_mass=0)
    g_int, _ = integrate.quad(lambda t: gaussian_abs_cov(conv_ratio(t)), -1, 1, points=[0.0])
    want = math.sqrt(g.span * g_int)
    got = sigma1_hat(s, g, h, estimates=est)
    assert got == pytest.approx(want, rel=1e-3)
    assert sigma1_hat(s, g, h, estimates=est, convention="all") == pytest.approx(2 * got)


def test_lag_integrand_vanishes_at_edges():
    nodes, w, r = lag_rule(1, 21)
    assert r[0] == 0.0 and r[-1] == 0.0
    assert w.sum() == pytest.approx(2.0)
    nodes2, w2, _ = lag_rule(2, 5)
    assert nodes2.shape == (25, 2) and w2.sum() == pytest.approx(4.0)


def test_lag_resolution_stable():
    s = make_sample(C=40, levels=(0.0, 0.5, 1.0), seed=12)
    g = build_grid(s, 15)
    a = sigma1_hat(s, g, 0.4, lag_points=21)
    b = sigma1_hat(s, g, 0.4, lag_points=41)
    assert abs(a - b) / b < 1e-3
    a = sigma2_hat(s, g, 0.4, form="exact", lag_points=21)
    b = sigma2_hat(s, g, 0.4, form="exact", lag_points=41)
    assert abs(a - b) / b < 1e-3


def brute_gaussian_sigma2(est, grid, ratio, k):
    """Variance of the T2 grid sum for one level from the explicit covariance."""
    idx = np.flatnonzero(est.valid[k])
    rho = est.rho2[k, idx]
    cov = np.sqrt(np.outer(rho, rho)) * ratio[np.ix_(idx, idx)]
    w = grid.weights[idx]
    pairs = [(a, b) for a in range(len(idx)) for b in range(a + 1, len(idx))]
    total = 0.0
    for a, b in pairs:
        for c, e in pairs:
            va = cov[a, a] + cov[b, b] - 2 * cov[a, b]
            vc = cov[c, c] + cov[e, e] - 2 * cov[c, e]
            cr = (cov[a, c] - cov[a, e] - cov[b, c] + cov[b, e]) / math.sqrt(va * vc)
            total += w[a] * w[b] * w[c] * w[e] * gaussian_abs_cov(np.clip(cr, -1, 1))
    return total


def test_sigma2_gaussian_brute_force():
    s = make_sample(C=40, seed=13, tau=lambda x, pi: x[:, 0])
    g = build_grid(s, 7)
    h = 0.35
    est = grid_estimates(s, g.points, h)
    ratio = _lag_matrix(est.points, h, 1)
    want = sum(brute_gaussian_sigma2(est, g, ratio, k) for k in range(2)) / h
    got = sigma2_hat(s, g, h, estimates=est)
    assert got == pytest.approx(math.sqrt(want), rel=1e-10)


def test_sigma2_forms_positive():
    s = make_sample(C=40, seed=14)
    g = build_grid(s, 12)
    for form in ("gaussian", "exact", "factorized"):
        assert sigma2_hat(s, g, 0.4, form=form) > 0
    with pytest.raises(ValueError):
        sigma2_hat(s, g, 0.4, form="plain")


def test_sigma2_factorized_far_grid():
    # with h far below the grid spacing, w2 is the plain inverse root sum
    s = make_sample(C=400, seed=15)
    g = build_grid(s, 4)
    h = 0.05
    est = grid_estimates(s, g.points, h, min_mass=0)
    _, tw, r = lag_rule(1)
    g_int = float(gaussian_abs_cov(r) @ tw)
    want = 0.0
    for k in range(2):
        rho = est.rho2[k]
        w2 = 1 / np.sqrt(rho[:, None] + rho[None, :])
        np.fill_diagonal(w2, 0.0)
        inner = w2 @ g.weights
        want += float(np.sum(g.weights * rho * inner**2)) * g_int
    got = sigma2_hat(s, g, h, estimates=est, form="factorized")
    assert got == pytest.approx(math.sqrt(want), rel=1e-12)


def test_decomposition():
    d = StatisticDecomposition(name="T1", raw=5.0, bias=3.0, scale=2.0)
    assert d.centered == 2.0 and d.studentized == 1.0
    assert d.to_dict()["studentized"] == 1.0
    assert math.isnan(StatisticDecomposition("T2", 1.0, 0.0).studentized)


def test_statistics_nonnegative_scales():
    s = make_sample(C=40, levels=(0.0, 0.5, 1.0), seed=16)
    g = build_grid(s, 15)
    d1 = s1_statistic(s, g, 0.4)
    d2 = s2_statistic(s, g, 0.4)
    assert d1.raw >= 0 and d2.raw >= 0
    assert d1.scale > 0 and d2.scale > 0
    assert math.isfinite(d1.studentized) and math.isfinite(d2.studentized)


def test_scale_invariance_of_integrand():
    s = make_sample(C=40, seed=17, tau=lambda x, pi: x[:, 0] + pi)
    g = build_grid(s, 12)
    lam = 7.5
    scaled = s.with_outcomes(lam * s.y)
    e1 = grid_estimates(s, g.points, 0.4)
    e2 = grid_estimates(scaled, g.points, 0.4)
    assert np.allclose(e2.tau, lam * e1.tau, rtol=1e-12, atol=1e-12)
    assert np.allclose(e2.rho2, lam**2 * e1.rho2, rtol=1e-10)
    assert t1_stat(scaled, g, 0.4).raw == pytest.approx(t1_stat(s, g, 0.4).raw, rel=1e-10)
    assert t2_stat(scaled, g, 0.4).raw == pytest.approx(t2_stat(s, g, 0.4).raw, rel=1e-10)
