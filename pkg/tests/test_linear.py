import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netmig.exceptions import CollinearityError, ValidationError
from netmig.linear import (LinearRegression, TwoStageLeastSquares, demean, did_event_study, dummies,
                           fe_regress, ols, sandwich, tsls, wald_f)


def with_const(x):
    return np.column_stack([np.ones(len(x)), x])


def hc1_oracle(y, X):
    """Heteroskedasticity-robust covariance with the n/(n-k) factor, by hand."""
    n, k = X.shape
    b = np.linalg.lstsq(X, y, rcond=None)[0]
    e = y - X @ b
    A = np.linalg.inv(X.T @ X)
    return A @ (X.T * e ** 2) @ X @ A * n / (n - k)


class TestOls:
    def test_exact_line(self):
        x = np.arange(10.0)
        r = ols(2 * x, x[:, None])
        assert r.coef[0] == pytest.approx(2.0, abs=1e-14)
        assert np.allclose(r.resid, 0.0, atol=1e-12)

    def test_three_points(self):
        # normal equations: slope 3/2, intercept 7/3 - 3/2 = 5/6
        r = ols(np.array([1.0, 2.0, 4.0]), with_const([0.0, 1.0, 2.0]), names=("a", "b"))
        assert r["b"] == pytest.approx(1.5, abs=1e-14)
        assert r["a"] == pytest.approx(5 / 6, abs=1e-14)

    @settings(max_examples=40)
    @given(st.integers(0, 10_000), st.integers(5, 60), st.integers(1, 5))
    def test_matches_qr_oracle(self, seed, n, k):
        rng = np.random.default_rng(seed)
        if n <= k + 1:
            return
        X = with_const(rng.standard_normal((n, k)))
        y = rng.standard_normal(n)
        Q, R = np.linalg.qr(X)
        expect = np.linalg.solve(R, Q.T @ y)
        r = ols(y, X)
        assert np.allclose(r.coef, expect, atol=1e-10)
        scale = np.abs(X).max() * np.abs(r.resid).max() * n + 1e-300
        assert np.all(np.abs(X.T @ r.resid) / scale < 1e-8)

    def test_singleton_clusters_are_hc1(self):
        rng = np.random.default_rng(4)
        X = with_const(rng.standard_normal((80, 2)))
        y = X @ [1.0, 0.5, -0.2] + rng.standard_normal(80) * (1 + np.abs(X[:, 1]))
        a = ols(y, X)
        b = ols(y, X, clusters=np.arange(80))
        n, k = X.shape
        # G = n singleton clusters: factor n/(n-1) * (n-1)/(n-k) = n/(n-k)
        assert np.allclose(a.vcov, hc1_oracle(y, X), rtol=1e-10, atol=0)
        assert np.allclose(a.vcov, b.vcov, rtol=1e-12, atol=0)

    def test_cluster_factor(self):
        rng = np.random.default_rng(5)
        X = with_const(rng.standard_normal(60))
        y = rng.standard_normal(60)
        g = np.repeat(np.arange(12), 5)
        r = ols(y, X, clusters=g)
        e = r.resid
        A = np.linalg.inv(X.T @ X)
        S = np.zeros((12, 2))
        np.add.at(S, g, X * e[:, None])
        V = A @ S.T @ S @ A * (12 / 11) * (59 / 58)
        assert np.allclose(r.vcov, V, rtol=1e-10, atol=0)
        assert r.n_clusters == 12

    @given(st.integers(0, 10_000), st.floats(-5, 5).filter(lambda a: abs(a) > 0.1), st.floats(-5, 5))
    def test_affine_reparametrization(self, seed, a, c):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(40)
        y = 1 + 2 * x + rng.standard_normal(40)
        r1 = ols(y, with_const(x))
        r2 = ols(y, with_const(a * x + c))
        assert np.allclose(y - r1.resid, y - r2.resid, atol=1e-9)
        assert r1.r2 == pytest.approx(r2.r2, abs=1e-10)

    def test_rank_deficiency_named(self):
        x = np.arange(6.0)
        with pytest.raises(CollinearityError) as e:
            ols(x, np.column_stack([np.ones(6), x, 2 * x]), names=("c", "x", "x2"))
        assert len(e.value.columns) == 1 and e.value.columns[0] in ("x", "x2")

    def test_weights_equal_row_replication(self):
        rng = np.random.default_rng(6)
        X = with_const(rng.standard_normal(20))
        y = rng.standard_normal(20)
        w = rng.integers(1, 4, 20)
        a = ols(y, X, weights=w.astype(float))
        b = ols(np.repeat(y, w), np.repeat(X, w, axis=0))
        assert np.allclose(a.coef, b.coef, atol=1e-12)

    def test_bad_inputs(self):
        with pytest.raises(ValidationError):
            ols(np.ones(3), np.ones((4, 1)))
        with pytest.raises(ValidationError):
            ols(np.arange(4.0), with_const(np.arange(4.0)), weights=[1, -1, 1, 1])
        with pytest.raises(ValidationError):
            sandwich(np.eye(2), np.ones((2, 2)))


class TestTsls:
    def test_instrument_equal_to_regressor_is_ols(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(50)
        y = 1 + 0.5 * x + rng.standard_normal(50)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            iv = tsls(y, x, np.ones(50), x)
        o = ols(y, np.column_stack([x, np.ones(50)]))
        assert np.allclose(iv.coef, o.coef, atol=1e-12)
        assert np.allclose(iv.se, o.se, atol=1e-12)

    def test_monte_carlo_consistency(self):
        rng = np.random.default_rng(1)
        iv_ok = ols_ok = 0
        for _ in range(200):
            n = 500
            z = rng.standard_normal(n)
            u = rng.standard_normal(n)
            x = 0.8 * z + u + 0.3 * rng.standard_normal(n)
            y = 1.0 + 2.0 * x + 1.5 * u + rng.standard_normal(n)
            iv = tsls(y, x, np.ones(n), z)
            o = ols(y, with_const(x))
            iv_ok += abs(iv.coef[0] - 2.0) < 3 * iv.se[0]
            ols_ok += abs(o.coef[1] - 2.0) < 3 * o.se[1]
        assert iv_ok >= 180
        assert ols_ok < 20

    def test_weak_instrument_warning(self):
        rng = np.random.default_rng(2)
        n = 400
        x = rng.standard_normal(n)
        z = rng.standard_normal(n)
        with pytest.warns(RuntimeWarning, match="weak instruments"):
            r = tsls(x + rng.standard_normal(n), x, np.ones(n), z, endog_names=["x"])
        assert r.first_stage_f["x"] < 10

    def test_first_stage_f_is_wald(self):
        rng = np.random.default_rng(3)
        n = 300
        Z = rng.standard_normal((n, 2))
        x = Z @ [0.5, 0.3] + rng.standard_normal(n)
        y = x + rng.standard_normal(n)
        r = tsls(y, x, np.ones(n), Z, endog_names=["x"], instrument_names=["z1", "z2"])
        fs = ols(x, np.column_stack([Z, np.ones(n)]), names=("z1", "z2", "c"))
        assert r.first_stage_f["x"] == pytest.approx(wald_f(fs, ["z1", "z2"]), rel=1e-12)

    def test_underidentified(self):
        with pytest.raises(ValidationError):
            tsls(np.ones(5), np.ones((5, 2)), np.ones(5), np.ones(5))


def fe_panel(rng, n_groups=15, per=8, two=False):
    g1 = np.repeat(np.arange(n_groups), per)
    g2 = np.tile(np.arange(per), n_groups)
    X = rng.standard_normal((len(g1), 2))
    y = X @ [1.0, -0.5] + rng.standard_normal(n_groups)[g1] + rng.standard_normal(len(g1))
    if two:
        y = y + rng.standard_normal(per)[g2]
    return y, X, g1, g2


class TestFixedEffects:
    def test_one_family_matches_dummies(self):
        rng = np.random.default_rng(0)
        y, X, g1, _ = fe_panel(rng)
        a = fe_regress(y, X, [g1], clusters=g1)
        D, _ = dummies(g1)
        b = ols(y, np.column_stack([X, np.ones(len(y)), D]), clusters=g1)
        assert np.allclose(a.coef, b.coef[:2], atol=1e-8)
        assert np.allclose(a.se, b.se[:2], atol=1e-8)

    def test_two_balanced_families_match_dummies(self):
        rng = np.random.default_rng(1)
        y, X, g1, g2 = fe_panel(rng, two=True)
        a = fe_regress(y, X, [g1, g2])
        D1, _ = dummies(g1)
        D2, _ = dummies(g2)
        b = ols(y, np.column_stack([X, np.ones(len(y)), D1, D2]))
        assert np.allclose(a.coef, b.coef[:2], atol=1e-8)
        assert np.allclose(a.se, b.se[:2], atol=1e-8)

    @settings(max_examples=25)
    @given(st.integers(0, 10_000))
    def test_unbalanced_families_match_dummies(self, seed):
        rng = np.random.default_rng(seed)
        n = 120
        g1 = rng.integers(0, 10, n)
        g2 = rng.integers(0, 6, n)
        X = rng.standard_normal((n, 2))
        y = X @ [0.3, 0.7] + rng.standard_normal(10)[g1] + rng.standard_normal(6)[g2] + rng.standard_normal(n)
        a = fe_regress(y, X, [g1, g2])
        D1, _ = dummies(g1)
        D2, _ = dummies(g2)
        b = ols(y, np.column_stack([X, np.ones(n), D1, D2]))
        assert np.allclose(a.coef, b.coef[:2], atol=1e-8)

    def test_constant_within_group(self):
        rng = np.random.default_rng(2)
        y, X, g1, _ = fe_panel(rng)
        X = np.column_stack([X, rng.standard_normal(15)[g1]])
        with pytest.raises(CollinearityError) as e:
            fe_regress(y, X, [g1], names=("a", "b", "c"))
        assert e.value.columns == ("c",)

    def test_demean_removes_group_means(self):
        rng = np.random.default_rng(3)
        y, X, g1, g2 = fe_panel(rng, two=True)
        M, sweeps = demean(np.column_stack([y, X]), [g1, g2])
        for g in (g1, g2):
            means = np.array([M[g == k].mean(axis=0) for k in np.unique(g)])
            assert np.abs(means).max() < 1e-9
        assert sweeps >= 1

    def test_estimator_wrappers(self):
        rng = np.random.default_rng(4)
        y, X, g1, _ = fe_panel(rng)
        m = LinearRegression().fit(X, y)
        assert np.allclose(m.coef_, ols(y, with_const(X)).coef[1:])
        assert m.score(X, y) == pytest.approx(ols(y, with_const(X)).r2)
        f = LinearRegression().fit(X, y, groups=[g1])
        assert np.allclose(f.coef_, fe_regress(y, X, [g1]).coef)
        z = X[:, 0] + rng.standard_normal(len(y))
        iv = TwoStageLeastSquares().fit(X[:, :1], y, z[:, None])
        assert iv.coef_.shape == (1,) and iv.predict(X[:, :1]).shape == y.shape


def event_panel(rng, n_agents=300, effect=None):
    """Agents born 1985-1994 observed 2000-2024 at ages 15-30."""
    birth = rng.integers(1985, 1995, n_agents)
    treated = (rng.random(n_agents) < 0.5).astype(float)
    agent, age, year = [], [], []
    for i, b in enumerate(birth):
        for a in range(15, 31):
            agent.append(i)
            age.append(a)
            year.append(b + a)
    agent, age, year = map(np.array, (agent, age, year))
    y = (rng.standard_normal(n_agents)[agent] + 0.05 * (age - 15) + 0.1 * np.sin(year)
         + rng.standard_normal(len(agent)) * 0.5)
    if effect is not None:
        y = y + treated[agent] * effect(age)
    return y, agent, age, year, treated[agent]


class TestEventStudy:
    def test_reference_age_zero_and_window(self):
        rng = np.random.default_rng(0)
        y, agent, age, year, tr = event_panel(rng, 100)
        r = did_event_study(y, agent, age, year, tr)
        assert list(r.ages) == list(range(15, 31))
        k = list(r.ages).index(17)
        assert r.coef[k] == 0 and r.se[k] == 0
        assert np.all(r.ci_low <= r.coef) and np.all(r.coef <= r.ci_high)
        assert r.regression.n_clusters == 100

    def test_matches_dummy_oracle(self):
        rng = np.random.default_rng(1)
        y, agent, age, year, tr = event_panel(rng, 120, lambda a: 0.2 * (a >= 18))
        r = did_event_study(y, agent, age, year, tr)
        est = [a for a in range(15, 31) if a != 17]
        T = np.column_stack([tr * (age == a) for a in est])
        Da, _ = dummies(agent)
        Dg, _ = dummies(age)
        Dy, _ = dummies(year)
        # year = birth + age: one more year column is redundant given agent and age effects
        X = np.column_stack([T, np.ones(len(y)), Da, Dg, Dy[:, 1:]])
        b = ols(y, X, clusters=agent)
        assert np.allclose(r.regression.coef, b.coef[:15], atol=1e-8)

    def test_step_recovered_in_large_sample(self):
        rng = np.random.default_rng(2)
        step = lambda a: 0.2 * (a >= 18)
        y, agent, age, year, tr = event_panel(rng, 3000, step)
        r = did_event_study(y, agent, age, year, tr)
        assert np.abs(r.coef - step(r.ages)).max() < 0.1
        assert np.mean(np.abs(r.coef - step(r.ages)) <= 2 * np.maximum(r.se, 1e-12)) >= 0.8

    def test_reference_outside_window(self):
        rng = np.random.default_rng(2)
        y, agent, age, year, tr = event_panel(rng, 20)
        with pytest.raises(ValidationError):
            did_event_study(y, agent, age, year, tr, reference_age=40)
