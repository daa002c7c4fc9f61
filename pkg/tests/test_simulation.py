import math

import numpy as np
import pytest

from clusterhte import simulation
from clusterhte.data import ClusteredSample
from clusterhte.errors import DataError, NumericalError
from clusterhte.inference import TestConfig
from clusterhte.simulation import (
    DgpConfig,
    cate_function,
    cluster_robust_cov,
    gen_dgp,
    mc_seed,
    ols_cluster_comparison,
    power_table,
    rejection_probabilities,
)
from clusterhte.teststat import build_grid, t1_stat, t2_stat

FAST = TestConfig(grid_points=15, min_mass=2)


def test_linear_cate():
    cfg = DgpConfig(beta0=1.0, beta1=0.0)
    assert cate_function(np.array([0.5]), np.array([0.3]), cfg)[0] == 0.5
    cfg = DgpConfig(beta0=2.0, beta1=-1.0, cate_form="linear_multiX", d=2)
    assert cate_function(np.array([[0.25, 0.5]]), np.array([0.4]), cfg)[0] == pytest.approx(1.1)


def test_cosine_cate_uses_literal_constant():
    cfg = DgpConfig(cate_form="cosine_nonlinear")
    val = cate_function(np.array([0.25]), np.array([0.5]), cfg)[0]
    assert val == pytest.approx(30 * math.cos(2 * 3.142 * 0.25) * (0.25 - 0.5), rel=1e-12)
    assert val == pytest.approx(0.00153, abs=1e-5)


def test_config_validation():
    with pytest.raises(DataError):
        DgpConfig(levels=(0.25, 0.5))
    with pytest.raises(DataError):
        DgpConfig(cate_form="quadratic")
    with pytest.raises(DataError):
        DgpConfig(rho_x=1.0)
    with pytest.raises(DataError):
        DgpConfig(levels=(0.5,))


def test_treatment_vectors_match_levels():
    s = gen_dgp(DgpConfig(C=80), 1)
    for c in s.clusters:
        assert c.t.sum() == pytest.approx(c.pi[0] * 10)
        assert np.all(c.pi == c.t.mean())
    assert set(s.exposure_levels) <= {0.3, 0.4, 0.5, 0.6}


def test_error_variance():
    s = gen_dgp(DgpConfig(C=150), 2)
    se = 0.01 * math.sqrt(2 / s.N)
    assert abs(np.var(s.y, ddof=1) - 0.01) < 3 * se
    wide = gen_dgp(DgpConfig(C=150, error_sd=math.sqrt(0.1)), 2)
    assert abs(np.var(wide.y, ddof=1) - 0.1) < 3 * 10 * se


def test_within_cluster_correlation():
    s = gen_dgp(DgpConfig(C=150, rho_x=0.2), 3)
    x = s.x[:, 0].reshape(150, 10)
    xc = x - x.mean()
    num = np.sum(xc.sum(axis=1) ** 2 - np.sum(xc**2, axis=1)) / (150 * 90)
    corr = num / np.var(x)
    assert abs(corr - 0.2) < 0.05
    assert abs(np.mean(x) - 0.5) < 0.03


def test_noiseless_null_statistics_zero():
    s = gen_dgp(DgpConfig(C=60, error_sd=0.0), 4)
    g = build_grid(s, 15)
    assert t1_stat(s, g, 0.3).raw == 0.0
    assert t2_stat(s, g, 0.3).raw == 0.0


def test_determinism():
    a = gen_dgp(DgpConfig(C=30), mc_seed(5, 2))
    b = gen_dgp(DgpConfig(C=30), mc_seed(5, 2))
    assert np.array_equal(a.y, b.y) and np.array_equal(a.x, b.x)
    r1 = rejection_probabilities(DgpConfig(C=60), "S1", reps=4, seed=1, test_config=FAST)["S1"]
    r2 = rejection_probabilities(DgpConfig(C=60), "S1", reps=4, seed=1, test_config=FAST)["S1"]
    assert np.array_equal(r1.p_values, r2.p_values)


def test_single_rep_probability():
    r = rejection_probabilities(DgpConfig(C=60), ("S1", "S2"), reps=1, test_config=FAST)
    for res in r.values():
        assert all(p in (0.0, 1.0) for p in res.rates)
        assert res.reps == 1 and res.as_row()["reps"] == 1


def test_rejection_arguments():
    with pytest.raises(DataError):
        rejection_probabilities(DgpConfig(), reps=0)
    with pytest.raises(ValueError):
        rejection_probabilities(DgpConfig(), "S3", reps=1)
    with pytest.raises(ValueError):
        rejection_probabilities(DgpConfig(), reps=1, method="permutation")


def test_drops_counted_and_limited(monkeypatch):
    real = simulation.gen_dgp

    def flaky(config, seed):
        s = real(config, seed)
        if s.y[0] > 0.0:
            raise DataError("injected failure")
        return s

    monkeypatch.setattr(simulation, "gen_dgp", flaky)
    with pytest.raises(NumericalError):
        rejection_probabilities(DgpConfig(C=60), "S1", reps=20, test_config=FAST)


def test_drop_below_limit(monkeypatch):
    real = simulation.gen_dgp
    calls = {"n": 0}

    def once(config, seed):
        calls["n"] += 1
        if calls["n"] == 3:
            raise DataError("injected failure")
        return real(config, seed)

    monkeypatch.setattr(simulation, "gen_dgp", once)
    r = rejection_probabilities(DgpConfig(C=60), "S1", reps=50, test_config=FAST)["S1"]
    assert r.dropped == 1 and r.reps == 49
    assert np.isnan(r.p_values[2])


def test_power_table_layout():
    tab = power_table(DgpConfig(C=40, beta0=1.0), "beta1", [-0.5, 0.5], "S1", reps=2,
                      test_config=FAST)
    rows = tab.to_csv().strip().splitlines()
    assert rows[0].split(",")[0] == "beta1"
    assert rows[0].split(",")[1:] == ["0.01", "0.05", "0.1"]
    assert rows[1].startswith("-0.50,") and len(rows) == 3
    long_rows = tab.to_long_csv().strip().splitlines()
    assert len(long_rows) == 1 + 2 * 3


def test_ols_exact_fit():
    rng = np.random.default_rng(0)
    C, n = 20, 6
    t = np.tile([0.0, 1.0], C * n // 2)
    pi = np.repeat(rng.choice([0.3, 0.5, 0.7], C), n)
    s = ClusteredSample(cluster=np.repeat(np.arange(C), n), y=2 + 3 * t, t=t,
                        x=rng.random(C * n), pi=pi)
    res = ols_cluster_comparison(s)
    assert np.allclose(res.coef, [2, 3, 0, 0, 0, 0], atol=1e-10)


def sandwich_oracle(X, e, cluster):
    n, p = X.shape
    bread = np.linalg.inv(X.T @ X)
    meat = np.zeros((p, p))
    G = 0
    for c in np.unique(cluster):
        rows = cluster == c
        u = X[rows].T @ e[rows]
        meat += np.outer(u, u)
        G += 1
    meat *= G / (G - 1) * (n - 1) / (n - p)
    return bread @ meat @ bread


def test_sandwich_against_oracle():
    s = gen_dgp(DgpConfig(C=50, beta0=1.0, beta1=0.5), 7)
    res = ols_cluster_comparison(s)
    X = np.column_stack([np.ones(s.N), s.t, s.x[:, 0], s.pi, s.t * s.x[:, 0], s.t * s.pi])
    e = s.y - X @ res.coef
    oracle = sandwich_oracle(X, e, s.cluster)
    assert np.max(np.abs(res.cov - oracle)) < 1e-10
    plain = cluster_robust_cov(X, e, s.cluster, small_sample=False)
    factor = 50 / 49 * (s.N - 1) / (s.N - 6)
    assert np.allclose(res.cov, plain * factor, rtol=1e-12)


def test_ols_tests_and_table():
    s = gen_dgp(DgpConfig(C=60, beta0=0.0, beta1=3.0), 8)
    res = ols_cluster_comparison(s)
    assert res.df == 59
    f, p = res.joint_test(("T*X", "T*Pi"))
    assert f > 0 and 0 <= p <= 1
    assert res.pvalues[res.names.index("T*Pi")] < 0.05
    assert "T*Pi" in res.table()
    assert res.to_dict()["n_clusters"] == 60


def test_ols_errors():
    s = gen_dgp(DgpConfig(C=20, d=2, cate_form="linear_multiX"), 9)
    with pytest.raises(DataError):
        ols_cluster_comparison(s)
    flat = ClusteredSample(cluster=np.repeat(np.arange(4), 2), y=np.arange(8.0),
                           t=np.tile([0.0, 1.0], 4), x=np.zeros(8), pi=np.repeat([0.5, 1.0, 0.5, 1.0], 2))
    with pytest.raises(NumericalError):
        ols_cluster_comparison(flat)
