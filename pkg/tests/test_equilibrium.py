import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from netmig.equilibrium import (EULER_GAMMA, Economy, EquilibriumParams, Scenario, apply_counterfactual,
                                calibrate_scales, draw_shocks, make_economy, outcomes_report,
                                reallocate_equally, residuals, run_scenarios, solve_equilibrium,
                                top_wage_cities, welfare_terms)
from netmig.exceptions import EquilibriumError, ValidationError
from netmig.geo import City, World
from netmig.simulate import DgpConfig, simulate
from netmig.utility import ParameterSet


@pytest.fixture(scope="module")
def economy():
    d = simulate(DgpConfig(n_cities=12, n_states=3, n_agents=800, n_years=3, seed=3), n_survey=0)
    last = d.agents.years[-1]
    return make_economy(d.world, d.params, d.agents.residence_at(last), d.networks.dense(last), seed=3)


@pytest.fixture(scope="module")
def baseline(economy):
    return solve_equilibrium(economy)


class TestCalibration:
    def test_unit_labor(self):
        Y = np.array([100.0, 250.0, 80.0])
        A, a = calibrate_scales(Y, np.ones(3), np.array([0.5, -1.0, 2.0]), EquilibriumParams())
        assert np.array_equal(A, Y)
        assert np.allclose(a, np.exp([0.5, -1.0, 2.0]), rtol=1e-15)

    @given(st.integers(0, 10_000))
    def test_reproduces_observed(self, seed):
        rng = np.random.default_rng(seed)
        Y = rng.uniform(100, 20_000, 8)
        L = rng.integers(0, 500, 8).astype(float)
        xi = rng.normal(0, 2, 8)
        eqp = EquilibriumParams()
        A, a = calibrate_scales(Y, L, xi, eqp)
        Lf = np.maximum(L, 1)
        assert np.allclose(A * Lf ** eqp.wage_elasticity, Y, rtol=1e-12, atol=0)
        assert np.allclose(np.log(a) - eqp.amenity_congestion * np.log(Lf), xi, rtol=0, atol=1e-12)
        A2, _ = calibrate_scales(2 * Y, L, xi, eqp)
        assert np.allclose(A2, 2 * A, rtol=1e-15)

    def test_stability_checks(self):
        with pytest.raises(ValidationError, match="unstable"):
            EquilibriumParams(agglomeration=1.2, price_congestion=0.1)
        with pytest.raises(ValidationError):
            EquilibriumParams(amenity_congestion=-0.1)


class TestShocks:
    def test_gumbel_moments(self):
        e = draw_shocks(np.arange(1, 100_001), 10, seed=0)
        assert e.size == 1_000_000
        assert abs(e.mean() - EULER_GAMMA) < 0.01
        assert abs(e.var() - np.pi ** 2 / 6) < 0.02

    def test_deterministic(self):
        assert np.array_equal(draw_shocks(np.arange(1, 50), 7, 4), draw_shocks(np.arange(1, 50), 7, 4))


def symmetric_economy(m=25, J=4):
    coords = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)][:J]
    world = World([City(k + 1, la, lo, 1, 1, 500.0, 10.0, 0.0) for k, (la, lo) in enumerate(coords)])
    params = ParameterSet(agglomeration=0.05, price_congestion=0.05, amenity_congestion=0.0,
                          network_coef=0.0, stay_bonus=0.0, log_distance_coef=0.0, out_of_state_coef=0.0,
                          stay_network_coef=0.0, distance_network_coef=0.0,
                          out_of_state_network_coef=0.0).with_amenity(np.zeros(J))
    n = m * J
    shocks = np.zeros((n, J))
    shocks[np.arange(n), np.arange(n) % J] = 5.0
    eco = Economy(world=world, params=params, origin=np.arange(n) % J, friends=np.full((n, J), 3),
                  shocks=shocks, wage=world.wage.copy(), amenity=np.zeros(J))
    A, a = calibrate_scales(eco.wage, np.full(J, float(m)), eco.amenity, EquilibriumParams(0.05, 0.05, 0.0))
    return dataclasses.replace(eco, A=A, a=a)


class TestSolve:
    def test_symmetric_uniform_fixed_point(self):
        eco = symmetric_economy()
        s = solve_equilibrium(eco)
        assert np.array_equal(s.labor, np.full(4, 25.0))
        assert np.allclose(s.wage, 500.0, rtol=1e-12)

    def test_baseline_reproduces_observed(self, economy, baseline):
        assert np.allclose(baseline.wage, economy.wage, rtol=1e-10, atol=0)
        assert np.allclose(baseline.amenity, economy.amenity, rtol=0, atol=1e-10)
        assert baseline.wage_residual < 1e-10 and baseline.amenity_residual < 1e-10

    def test_labor_conserved_every_iteration(self, economy, baseline):
        assert all(t == economy.n_agents for t in baseline.labor_totals)
        assert baseline.labor.sum() == economy.n_agents

    @pytest.mark.parametrize("seed", range(4))
    def test_residuals_after_perturbation(self, economy, seed):
        rng = np.random.default_rng(seed)
        eco = dataclasses.replace(economy, A=economy.A * np.exp(rng.normal(0, 0.3, len(economy.A))),
                                  a=economy.a * np.exp(rng.normal(0, 0.3, len(economy.a))))
        s = solve_equilibrium(eco)
        rw, ra, L = residuals(eco, s)
        assert rw < 1e-8 and ra < 1e-8
        assert np.array_equal(L, s.labor)
        assert all(t == eco.n_agents for t in s.labor_totals)

    def test_monotone_in_productivity(self, economy, baseline):
        rng = np.random.default_rng(7)
        for j in rng.choice(len(economy.A), 5, replace=False):
            A = economy.A.copy()
            A[j] *= 1.5
            s = solve_equilibrium(dataclasses.replace(economy, A=A), start=baseline)
            assert s.labor[j] >= baseline.labor[j]

    def test_non_convergence_carries_trace(self, economy):
        eco = dataclasses.replace(economy, A=economy.A * 3)
        with pytest.raises(EquilibriumError) as e:
            solve_equilibrium(eco, max_iter=3)
        assert len(e.value.trace) == 3

    def test_requires_calibration(self, economy):
        with pytest.raises(ValidationError):
            solve_equilibrium(dataclasses.replace(economy, A=None))
        with pytest.raises(ValidationError):
            solve_equilibrium(economy, damping=0.0)

    def test_deterministic(self, economy, baseline):
        s = solve_equilibrium(economy)
        assert np.array_equal(s.choice, baseline.choice) and np.array_equal(s.wage, baseline.wage)


class TestScenarios:
    def test_equal_networks(self):
        eco = symmetric_economy(m=1, J=4)
        F = np.zeros((4, 4), dtype=np.int64)
        F[0] = [40, 1, 0, 2]
        eco = dataclasses.replace(eco, friends=F)
        out = apply_counterfactual(Scenario("equal_networks"), eco)
        assert np.all(out.friends[0] == 40)
        assert out.friends[0].sum() == 160

    def test_equal_networks_twelve_cities(self, economy):
        F = economy.friends.copy()
        F[0, economy.origin[0]] = 40
        out = apply_counterfactual(Scenario("equal_networks"), dataclasses.replace(economy, friends=F))
        assert np.all(out.friends[0] == 40) and out.friends[0].sum() == 480

    def test_reallocation_conserves_totals(self, economy):
        out = apply_counterfactual(Scenario("network_reallocation"), economy)
        assert np.array_equal(out.friends.sum(axis=1), economy.friends.sum(axis=1))
        top = top_wage_cities(economy.wage, 0.1)
        others = np.setdiff1d(np.arange(12), top)
        assert np.all(out.friends[:, others] == 0)

    @given(st.lists(st.integers(0, 1000), min_size=1, max_size=30), st.integers(1, 6))
    def test_largest_remainder(self, totals, k):
        targets = np.arange(k) * 2
        out = reallocate_equally(totals, targets, 2 * k)
        assert np.array_equal(out.sum(axis=1), totals)
        assert np.all(out[:, targets].max(axis=1) - out[:, targets].min(axis=1) <= 1)
        assert np.all(np.diff(out[:, targets], axis=1) <= 0)

    def test_zero_variable_distance(self, economy):
        s = Scenario("zero_variable_distance")
        once = apply_counterfactual(s, economy)
        twice = apply_counterfactual(s, once)
        p, q = economy.params, once.params
        assert q.log_distance_coef == 0 and q.distance_network_coef == 0
        for name in ("stay_bonus", "out_of_state_coef", "stay_network_coef", "out_of_state_network_coef",
                     "network_coef", "wage_coef"):
            assert getattr(q, name) == getattr(p, name)
        assert twice.params == once.params

    def test_double_wages_and_networks(self, economy):
        top = top_wage_cities(economy.wage, 0.1)
        e = apply_counterfactual(Scenario("double_top_wages"), economy)
        f = apply_counterfactual(Scenario("double_top_wages_and_networks"), economy)
        assert np.allclose(e.A[top], 2 * economy.A[top])
        mask = np.ones(12, dtype=bool)
        mask[top] = False
        assert np.array_equal(e.A[mask], economy.A[mask])
        assert np.array_equal(f.friends[:, top], 2 * economy.friends[:, top])
        assert np.array_equal(f.friends[:, mask], economy.friends[:, mask])

    def test_pure(self, economy):
        F, A = economy.friends.copy(), economy.A.copy()
        p = economy.params
        for tag in ("zero_variable_distance", "equal_networks", "network_reallocation",
                    "double_top_wages", "double_top_wages_and_networks"):
            apply_counterfactual(Scenario(tag), economy)
        assert np.array_equal(economy.friends, F) and np.array_equal(economy.A, A)
        assert economy.params == p

    def test_top_decile(self):
        assert list(top_wage_cities(np.array([5.0, 9.0, 9.0, 1.0]), 0.25)) == [1]
        assert list(top_wage_cities(np.arange(40.0), 0.1)) == [36, 37, 38, 39]
        assert len(top_wage_cities(np.arange(3.0), 0.1)) == 1
        with pytest.raises(ValidationError):
            Scenario("double_everything")

    def test_identical_scenario_multiples_are_one(self, economy, baseline):
        r = outcomes_report(economy, baseline, economy, baseline)
        assert all(x == 1.0 for *_, x in r.rows)
        assert {"all", "bottom_quartile", "top_quartile"} <= {g for g, *_ in r.rows}

    def test_welfare_two_ways(self, economy, baseline):
        lse, sim = welfare_terms(economy, baseline)
        diff = sim - lse
        se = diff.std(ddof=1) / np.sqrt(len(diff))
        assert abs(diff.mean()) < 2 * se
        r = outcomes_report(economy, baseline, economy, baseline)
        assert r.level("all", "welfare", "baseline") == pytest.approx(100 * lse.mean())

    def test_run_scenarios(self, economy):
        out = run_scenarios(economy, scenarios=("baseline", "zero_variable_distance", "equal_networks"))
        assert set(out) == {"baseline", "zero_variable_distance", "equal_networks"}
        for eco, s, rep in out.values():
            rw, ra, _ = residuals(eco, s)
            assert rw < 1e-8 and ra < 1e-8
        assert out["equal_networks"][2].multiple("all", "migration_rate") > 1
