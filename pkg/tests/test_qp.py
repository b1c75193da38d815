import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _cases import arbitrage_toy, single_bus, storage, two_bus_congested
from edrelax import qp as Q
from edrelax.casekit.scenarios import ScenarioSpec, build_counterexample_case, generate_random
from edrelax.model import Generator, Horizon, Line, LoadProfile, Network, NetworkCase, PriceModel
from edrelax.oracle import enumerate_patterns


def _random_case(seed, target="unconstrained"):
    return generate_random(ScenarioSpec(seed=seed, target=target))


def test_assembly_counts_one_storage_one_generator():
    T = 2
    net = Network(2, [Line(0, 1, 0.1, -50.0, 50.0)])
    gen = Generator(0, 0.0, 100.0, ramp_up=10.0, ramp_down=-10.0, c2=0.01, c1=20.0)
    demand = np.array([[0.0, 0.0], [30.0, 35.0]])
    case = NetworkCase(Horizon(T, 1.0), net, [gen], [storage(T, bus=1)], PriceModel.uniform(1, scenario=2),
                       LoadProfile(demand))
    qp = Q.assemble_relaxed(case)
    assert qp.n_vars == 6
    assert qp.row_counts() == {Q.BOX_CH: 4, Q.BOX_DC: 4, Q.GENBOX: 4, Q.ENERGY: 4, Q.NETCHARGE: 1, Q.RAMP: 2,
                               Q.BALANCE: 2, Q.FLOW: 4}


def test_scenario_two_objective_has_no_storage_terms():
    # [PAPER] scenario 2: storage operational cost neglected
    case = arbitrage_toy()
    qp = Q.assemble_relaxed(case)
    n_st = 2 * case.n_storages * case.T
    assert np.all(qp.q[:n_st] == 0.0)
    assert qp.P[:n_st, :].nnz == 0


def test_charging_fee_enters_with_minus_sign():
    prices = PriceModel.uniform(1, f_slope=7.0, g2=0.5, g1=3.0, scenario=3)
    case = single_bus([10.0], [Generator(0, 0.0, 50.0, c1=10.0)], [storage(1)], prices)
    qp = Q.assemble_relaxed(case)
    x = np.array([2.0, 4.0, 10.0])  # p_ch, p_dc, p_g
    assert qp.objective(x) == pytest.approx(-7.0 * 2 + (0.5 * 16 + 3.0 * 4) + 10.0 * 10)


def test_storage_free_case_is_plain_dc_opf():
    case = two_bus_congested()
    sol = Q.solve_case(case)
    assert sol.optimal
    # [DERIVED] hand KKT: the line caps imports at 40 MW, the expensive unit covers the rest
    np.testing.assert_allclose(sol.p_g[:, 0], [40.0, 60.0], atol=1e-6)
    assert sol.p_ch.shape == (0, 1)


def test_single_generator_lambda_is_marginal_cost():
    # [PAPER] reference unit 2 cost 0.01x^2 + 20x, so lambda = 0.02*50 + 20 = 21
    case = single_bus([50.0, 50.0], [Generator(0, 0.0, 200.0, c2=0.01, c1=20.0)])
    sol = Q.solve_case(case)
    assert sol.optimal
    np.testing.assert_allclose(sol.p_g[0], [50.0, 50.0], atol=1e-7)
    np.testing.assert_allclose(sol.duals.lam, [21.0, 21.0], atol=1e-6)


def test_demand_above_capacity_is_infeasible_with_diagnosis():
    case = single_bus([150.0], [Generator(0, 0.0, 100.0, c1=10.0)])
    sol = Q.solve_case(case)
    assert sol.status == Q.INFEASIBLE
    assert "worst-violated block" in sol.message
    dense = Q.solve_case(case, Q.SolverSettings(backend="ipm"))
    assert dense.status == Q.INFEASIBLE


def test_arbitrage_toy_charges_then_discharges():
    case = arbitrage_toy()
    sol = Q.solve_case(case)
    assert sol.optimal
    assert sol.p_ch[0, 0] > 1.0 and sol.p_dc[0, 0] < 1e-6
    assert sol.p_dc[0, 1] > 1.0 and sol.p_ch[0, 1] < 1e-6
    # [DERIVED] enumeration oracle on the same instance
    assert sol.objective == pytest.approx(enumerate_patterns(case).best_objective, rel=1e-7)


def test_backends_agree():
    case = build_counterexample_case()
    a = Q.solve_case(case)
    b = Q.solve_case(case, Q.SolverSettings(backend="ipm"))
    assert a.optimal and b.optimal
    assert a.objective == pytest.approx(b.objective, rel=1e-8)
    # the storage split is not unique here, so compare KKT quality rather than multipliers
    assert Q.kkt_residuals(b, case).normalized <= 1e-6
    strict = two_bus_congested()
    a, b = Q.solve_case(strict), Q.solve_case(strict, Q.SolverSettings(backend="ipm"))
    np.testing.assert_allclose(a.duals.lam, b.duals.lam, atol=1e-6)
    np.testing.assert_allclose(a.p_g, b.p_g, atol=1e-6)


def test_unknown_backend():
    with pytest.raises(ValueError):
        Q.solve(Q.assemble_relaxed(arbitrage_toy()), Q.SolverSettings(backend="admm"))


def test_lifted_form_matches_substituted_rows():
    # a feasible point of the substituted QP maps to a feasible point of the lifted one
    case = _random_case(3)
    qp = Q.assemble_relaxed(case)
    sol = Q.solve(qp)
    lifted = Q.lift(qp)
    x = np.concatenate([sol.p_ch.ravel(), sol.p_dc.ravel(), sol.p_g.ravel()])
    energy = sol.energy.ravel()
    buses = sorted({s.bus for s in case.storages} | {g.bus for g in case.generators})
    inj = np.zeros((len(buses), case.T))
    for i, s in enumerate(case.storages):
        inj[buses.index(s.bus)] += sol.p_dc[i] - sol.p_ch[i]
    for k, g in enumerate(case.generators):
        inj[buses.index(g.bus)] += sol.p_g[k]
    full = np.concatenate([x, energy, inj.ravel()])
    np.testing.assert_allclose(lifted.A_eq @ full, lifted.b_eq, atol=1e-7)
    np.testing.assert_allclose(lifted.G @ full - lifted.h, qp.G @ x - qp.h, atol=1e-7)


def test_gamma_examples():
    assert np.all(Q.gamma_series(np.zeros((1, 4)), np.zeros((1, 4)), [0.0], 0.9) == 0.0)
    np.testing.assert_allclose(Q.gamma_series(np.ones((1, 3)), np.zeros((1, 3)), [0.0], 1.0), [[3.0, 2.0, 1.0]])
    g = Q.gamma_series(np.zeros((1, 3)), np.zeros((1, 3)), [2.0], 0.5)
    np.testing.assert_allclose(g, [[0.5, 1.0, 2.0]])


@given(st.integers(1, 12), st.floats(0.5, 1.0), st.integers(0, 2 ** 31 - 1))
def test_gamma_recursion_equals_direct_sum(T, xi, seed):
    rng = np.random.default_rng(seed)
    b1, b2, phi = rng.random((2, T)), rng.random((2, T)), rng.random(2)
    got = Q.gamma_series(b1, b2, phi, xi)
    # [DERIVED] direct summation of the definition
    want = np.zeros((2, T))
    for t in range(T):
        for tau in range(t, T):
            want[:, t] += xi ** (tau - t) * (b1[:, tau] - b2[:, tau])
        want[:, t] += xi ** (T - 1 - t) * phi
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)


def test_kkt_single_variable_upper_bound():
    # [DERIVED] one-variable KKT: at the charge cap alpha2 absorbs f' - LMP exactly
    r = Q.stationarity_pch(f_prime=24.0, alpha1=0.0, alpha2=24.0 - 11.0, eta_ch=0.9, gamma=0.0, dt=1.0, lmp=11.0)
    assert r == 0.0


def test_kkt_residuals_report_zeroed_duals():
    case = build_counterexample_case()
    sol = Q.solve_case(case)
    zero = Q.DualSolution.zeros(case.n_storages, case.T, case.network.n_lines, case.n_generators)
    sol.duals = zero
    res = Q.kkt_residuals(sol, case)
    np.testing.assert_allclose(res.r_pch, -24.0)
    assert res.max_abs > 0


def test_kkt_residuals_small_on_counterexample():
    case = build_counterexample_case()
    sol = Q.solve_case(case)
    assert Q.kkt_residuals(sol, case).normalized <= 1e-6


@settings(max_examples=15)
@given(st.integers(0, 10 ** 6))
def test_solver_contract_on_random_instances(seed):
    case = _random_case(seed)
    qp = Q.assemble_relaxed(case)
    sol = Q.solve(qp)
    assert sol.optimal
    assert sol.residuals["primal_feas"] <= 1e-6
    assert sol.residuals["dual_feas"] <= 1e-6
    assert sol.residuals["complementarity"] <= 1e-6
    assert sol.duals.min_inequality() >= -1e-6
    assert Q.kkt_residuals(sol, case).normalized <= 1e-6
    # weak duality at the returned multipliers
    assert Q.lagrangian_value(qp, sol) <= sol.objective + 1e-6 * (1 + abs(sol.objective))


@settings(max_examples=25)
@given(st.integers(0, 10 ** 6), st.floats(0.0, 1.0), st.integers(0, 2 ** 31 - 1))
def test_objective_convex(seed, theta, draw):
    qp = Q.assemble_relaxed(_random_case(seed % 20))
    rng = np.random.default_rng(draw)
    x, y = rng.uniform(0, 50, qp.n_vars), rng.uniform(0, 50, qp.n_vars)
    mix = qp.objective(theta * x + (1 - theta) * y)
    assert mix <= theta * qp.objective(x) + (1 - theta) * qp.objective(y) + 1e-9 * (1 + abs(mix))


@settings(max_examples=10)
@given(st.integers(0, 10 ** 6), st.sampled_from([0.5, 2.0, 3.0]))
def test_linear_cost_scaling(seed, k):
    case = _random_case(seed)
    gens = [Generator(g.bus, g.p_min, g.p_max, g.ramp_up, g.ramp_down, 0.0, g.c1, g.p_max_t, g.kind)
            for g in case.generators]
    prices = PriceModel(case.prices.f_slope, np.zeros(case.n_storages), case.prices.g1, case.prices.scenario)
    base = case.replace(generators=gens, prices=prices)

    def scaled(c, k):
        from edrelax.model import StorageDevice

        net = Network(c.network.n_buses, [Line(l.from_bus, l.to_bus, l.reactance, k * l.flow_min, k * l.flow_max)
                                          for l in c.network.lines], c.network.slack_bus)
        g = [Generator(x.bus, k * x.p_min, k * x.p_max, None if x.ramp_up is None else k * x.ramp_up,
                       None if x.ramp_down is None else k * x.ramp_down, 0.0, x.c1,
                       None if x.p_max_t is None else k * x.p_max_t, x.kind) for x in c.generators]
        s = [StorageDevice(x.bus, k * x.ch_max, k * x.dc_max, x.eta_ch, x.eta_dc, x.self_discharge, k * x.e0,
                           k * x.e_min, k * x.e_max, k * x.e_req if x.e_req > -1e4 else x.e_req)
             for x in c.storages]
        return c.replace(network=net, generators=g, storages=s, loads=LoadProfile(k * c.loads.demand))

    a = Q.solve_case(base)
    b = Q.solve_case(scaled(base, k))
    assert a.optimal and b.optimal
    # linear costs: optimal value is homogeneous of degree one
    assert b.objective == pytest.approx(k * a.objective, rel=1e-6, abs=1e-6)
    qp_b = Q.assemble_relaxed(scaled(base, k))
    x_a = np.concatenate([a.p_ch.ravel(), a.p_dc.ravel(), a.p_g.ravel()])
    assert qp_b.objective(k * x_a) == pytest.approx(b.objective, rel=1e-6, abs=1e-6)


def test_solve_deterministic():
    case = _random_case(11)
    a, b = Q.solve_case(case), Q.solve_case(case)
    assert a.objective == pytest.approx(b.objective, rel=1e-9)
    np.testing.assert_array_equal(a.p_g, b.p_g)


def test_congested_lmp_split():
    case = two_bus_congested()
    sol = Q.solve_case(case)
    lmp = Q.bus_lmp(sol.duals, case.network.gsf)
    np.testing.assert_allclose(lmp[:, 0], [10.0, 30.0], atol=1e-6)
