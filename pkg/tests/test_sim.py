from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cran_delay.model import ClusterConfig, rates_from_squares
from cran_delay.queueing import Trace, average_delay, discounted_delay, queue_step
from cran_delay.sim import (
    MIN_DRIFT_T,
    BatchResult,
    ExperimentConfig,
    Multipliers,
    ToyMDP,
    TrialStreams,
    _evaluate,
    apply_sweep,
    build_policy,
    capacity_sweep,
    detect_instability,
    discounted_value,
    dominated_points,
    horizon_equivalence_check,
    mean_ci,
    simulate,
    tune_multipliers,
    unstable_flags,
)

CFG = ClusterConfig(lam=5e5, sigma2=0.01, p0=0.1, p_max=0.2)
FIXED = Multipliers(1e-4, 0.0, 0.15)
JOINT = Multipliers(1e-4, 3e-4)


@pytest.fixture(scope="module")
def fixed_policy():
    return build_policy(CFG, "fixed_power", [FIXED])


@pytest.fixture(scope="module")
def joint_policy():
    return build_policy(CFG, "joint", [JOINT], Q_ref=500.0)


# --- the slot loop --------------------------------------------------------------------------

def test_same_seeds_same_results(joint_policy):
    a = simulate(CFG, joint_policy, [3, 4], 300)
    b = simulate(CFG, joint_policy, [3, 4], 300)
    np.testing.assert_array_equal(a.mean_Q, b.mean_Q)
    np.testing.assert_array_equal(a.mean_C, b.mean_C)


def test_thread_split_does_not_change_results(fixed_policy):
    a = simulate(CFG, fixed_policy, [0, 1, 2, 3], 300)
    b = simulate(CFG, fixed_policy, [0, 1, 2, 3], 300, threads=3)
    np.testing.assert_array_equal(a.mean_Q, b.mean_Q)
    np.testing.assert_array_equal(a.slope, b.slope)


def test_different_seeds_differ(fixed_policy):
    res = simulate(CFG, fixed_policy, [0, 1], 300)
    assert not np.array_equal(res.mean_Q[0, 0], res.mean_Q[0, 1])


def test_no_arrivals_no_backlog():
    cfg = CFG.replace(lam=np.array([0.0, 0.0]))
    pol = build_policy(cfg, "fixed_power", [FIXED])
    res = simulate(cfg, pol, [0], 200)
    np.testing.assert_array_equal(res.mean_Q, 0.0)


def test_three_slots_by_hand(joint_policy):
    res = simulate(CFG, joint_policy, [7], 3, record=True)
    tr = res.traces[0][0]
    H, S, A = TrialStreams(CFG, 7).chunk()
    H2, S2 = np.abs(H) ** 2, np.abs(S) ** 2
    g = np.diagonal(H2, axis1=-2, axis2=-1)
    Q = np.zeros(2)
    for t in range(3):
        C, p_d = joint_policy.allocate(Q[None, None, :], g[t][None, :], CFG)
        C, p_d = C[0, 0], p_d[0, 0]
        R = rates_from_squares(H2[t], S2[t], C, CFG.p0 + p_d, CFG.sigma2, CFG.W)
        np.testing.assert_array_equal(tr.Q[t], Q)
        np.testing.assert_allclose(tr.C[t], C, rtol=1e-15)
        np.testing.assert_allclose(tr.R[t], R, rtol=1e-12)
        Q = np.maximum(Q - R * CFG.tau, 0.0) + A[t]
    np.testing.assert_allclose(res.mean_Q[0, 0], tr.Q.mean(axis=0))


def test_identical_candidates_see_identical_randomness():
    pol = build_policy(CFG, "fixed_power", [FIXED, FIXED])
    res = simulate(CFG, pol, [0, 1, 2], 400)
    np.testing.assert_array_equal(res.mean_Q[0], res.mean_Q[1])


def test_mean_backlog_is_the_trace_average(fixed_policy):
    res = simulate(CFG, fixed_policy, [2], 500, record=True)
    tr = res.traces[0][0]
    np.testing.assert_allclose(res.delay(CFG.lam)[0, 0], average_delay(tr, CFG.lam),
                               rtol=1e-12)


def test_burn_in_skips_leading_slots(fixed_policy):
    res = simulate(CFG, fixed_policy, [2], 500, record=True, burn_in=100)
    tr = res.traces[0][0]
    np.testing.assert_allclose(res.mean_Q[0, 0], tr.Q[100:].mean(axis=0), rtol=1e-12)


def test_discounted_sums_match_trace(fixed_policy):
    mu = 0.97
    res = simulate(CFG, fixed_policy, [5], 400, mu_disc=mu, record=True)
    tr = res.traces[0][0]
    np.testing.assert_allclose(res.disc_Q[0, 0] / CFG.lam, discounted_delay(tr, CFG.lam, mu),
                               rtol=1e-12)


def test_geometric_horizon_totals(fixed_policy):
    res = simulate(CFG, fixed_policy, [0, 1, 2], 0, mu_disc=0.99, geometric=True,
                   record=True)
    for j, tr in enumerate(res.traces[0]):
        T = res.horizon[j]
        assert T >= 1
        np.testing.assert_allclose(res.total_Q[0, j], tr.Q[:T].sum(axis=0), rtol=1e-12)


def test_geometric_needs_valid_mu(fixed_policy):
    with pytest.raises(ValueError):
        simulate(CFG, fixed_policy, [0], 0, mu_disc=1.0, geometric=True)


# --- stability ---------------------------------------------------------------------------------

def _trace(total):
    total = np.asarray(total, float)
    Q = np.column_stack([total / 2, total / 2])
    z = np.zeros_like(Q)
    return Trace(Q, z, z, z, np.full_like(Q, 250.0), 1e-3)


def test_queue_step_drains_then_adds():
    np.testing.assert_array_equal(queue_step([5.0, 1.0], [3e3, 2e3], [1.0, 0.0], 1e-3),
                                  [3.0, 0.0])


def test_drift_detection_separates_ramp_from_noise():
    rng = np.random.default_rng(0)
    flat = 1000 + rng.normal(0, 50, 4000)
    ramp = 1000 + 100.0 * np.arange(4000)
    assert detect_instability(_trace(flat), lam=[2.5e5, 2.5e5])[0] is False
    flag, slope = detect_instability(_trace(ramp), lam=[2.5e5, 2.5e5])
    assert flag and slope == pytest.approx(100.0)
    # arrival rate estimated from the trace itself
    assert detect_instability(_trace(ramp))[0]


def test_short_runs_are_never_flagged():
    slope = np.full((1, 2), 1e9)
    res = BatchResult(*(np.zeros((1, 2, 2)),) * 3, None, None, None, slope,
                      np.array([MIN_DRIFT_T - 1, MIN_DRIFT_T]))
    np.testing.assert_array_equal(unstable_flags(res, CFG), [[False, True]])


# --- tuning ----------------------------------------------------------------------------------

SMALL = dict(pilot_T=1500, pilot_trials=2, tune_K=6, T=2000, trials=2)


def test_usage_decreases_with_fronthaul_price():
    exp = ExperimentConfig(cluster=CFG, **SMALL)
    ms = [Multipliers(g, 0.0, 0.15) for g in (1e-6, 1e-4, 1e-2)]
    usage, *_ = _evaluate(CFG, "fixed_power", ms, exp, None)
    assert np.all(np.diff(usage) < 0)


def test_tuner_meets_the_budget():
    exp = ExperimentConfig(cluster=CFG, C_tot=8.0, **SMALL)
    t = tune_multipliers(CFG, exp, "fixed_power", p_fixed=0.15)
    assert t.feasible and t.converged
    assert t.usage == pytest.approx(8.0, rel=exp.tune_tol * 1.5)


def test_tuner_power_corrections_come_from_the_experiment():
    exp = ExperimentConfig(cluster=CFG, C_tot=8.0, tune_corrections=0, **SMALL)
    a = tune_multipliers(CFG, exp, "joint")
    b = tune_multipliers(CFG, replace(exp, tune_corrections=5), "joint", corrections=0)
    assert a.mults.gamma == b.mults.gamma
    np.testing.assert_array_equal(a.mults.mu_power, b.mults.mu_power)


def test_tuner_zero_budget_is_infeasible():
    exp = ExperimentConfig(cluster=CFG, C_tot=0.0, **SMALL)
    t = tune_multipliers(CFG, exp, "fixed_power", p_fixed=0.15)
    assert not t.feasible and t.evaluations == 0


# --- sweep helpers -----------------------------------------------------------------------------

def test_capacity_sweep_fractions():
    assert capacity_sweep(1e6) == (1e5, 3.2e5, 5.4e5, 7.6e5, 9.8e5, 1.2e6)


def test_apply_sweep_names():
    assert apply_sweep(CFG, None, 3) is CFG
    assert apply_sweep(CFG, "lam1", 7e5).lam.tolist() == [7e5, 5e5]
    assert apply_sweep(CFG, "beta1", 0.5).beta.tolist() == [0.5, 1.0]
    assert apply_sweep(CFG, "C_tot", 12.0).C_tot == 12.0


def test_mean_ci_known_values():
    m, lo, hi = mean_ci([1.0, 2.0, 3.0])
    half = 4.302652729911275 * 1.0 / np.sqrt(3)
    assert m == 2.0
    assert (lo, hi) == pytest.approx((2.0 - half, 2.0 + half))
    assert mean_ci([5.0]) == (5.0, 5.0, 5.0)


def _pt(lo, hi):
    return (None, None, np.array([lo, hi]), None)


def test_dominated_points():
    pts = [_pt([1, 1], [2, 2]), _pt([3, 3], [4, 4]), _pt([0, 5], [1, 6])]
    assert dominated_points(pts) == [1]
    assert dominated_points([_pt([1, 3], [2, 4]), _pt([3, 1], [4, 2])]) == []


# --- geometric horizon vs discounting --------------------------------------------------------------

def test_zero_continue_probability_is_one_step():
    toy = ToyMDP.random(np.random.default_rng(1))
    rep = horizon_equivalence_check(toy, 0.0, trials=200)
    assert rep.exact == toy.r_pi[0]
    assert rep.mc_mean == pytest.approx(rep.exact, rel=1e-14)


@given(st.floats(0.0, 0.95), st.floats(0.1, 5.0))
def test_single_state_value(mu, r):
    toy = ToyMDP(np.ones((1, 1, 1)), np.array([[r]]), np.array([0]))
    assert discounted_value(toy, mu)[0] == pytest.approx(r / (1 - mu))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.3, 0.5, 0.9]))
def test_discounted_value_solves_bellman(seed, mu):
    toy = ToyMDP.random(np.random.default_rng(seed), n_states=4, n_actions=3)
    v = discounted_value(toy, mu)
    np.testing.assert_allclose(v, toy.r_pi + mu * toy.P_pi @ v, rtol=1e-12)


def test_geometric_horizon_matches_discounting():
    toy = ToyMDP.random(np.random.default_rng(4))
    rep = horizon_equivalence_check(toy, 0.8, trials=20_000, seed=3)
    assert rep.z <= 3.0


def test_toy_rejects_bad_rows():
    with pytest.raises(ValueError):
        ToyMDP(np.full((1, 2, 2), 0.6), np.zeros((2, 1)), np.zeros(2))
