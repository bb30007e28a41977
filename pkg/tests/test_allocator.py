import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cran_delay.allocator import (
    SlotContext,
    allocate_fixed_power,
    allocate_joint,
    allocate_numeric,
    fixed_power_rule,
    foc_residual,
    hessian_ok,
    joint_rule,
    slot_cost,
    slot_objective,
)
from cran_delay.model import Allocation, ClusterConfig, make_channel
from cran_delay.validation import random_slots


def diag_context(gains, alpha, gamma=1e-2, rho=3.0, **cfg_kw):
    """Slot with a diagonal channel |H_ii|^2 = gains and gradients set by alpha."""
    gains = np.asarray(gains, float)
    n = gains.shape[-1]
    kw = dict(n=n, L=np.eye(n), sigma2=0.1, p0=0.1, p_max=10.0, lam=1e6)
    kw.update(cfg_kw)
    cfg = ClusterConfig(**kw)
    h = np.zeros(gains.shape + (n,), complex)
    idx = np.arange(n)
    h[..., idx, idx] = np.sqrt(gains)
    ch = make_channel(cfg, h)
    grad = 2.0 * gamma * np.broadcast_to(np.asarray(alpha, float), gains.shape) / cfg.W
    return SlotContext(ch.H, ch.S, np.zeros(gains.shape), cfg, gamma,
                       np.full(n, rho * gamma), grad=grad)


# --- fixed power ----------------------------------------------------------------------

def test_fixed_power_rule_examples():
    assert fixed_power_rule(1.0, 3.0, 1.0, 1.0) == pytest.approx(1.0)
    assert fixed_power_rule(1.0, 1.5, 1.0, 1.0) == 0.0
    assert fixed_power_rule(2.0, 5.0, 0.5, 0.25) == pytest.approx(np.log2(16.0))


@pytest.mark.parametrize("alpha", [0.2, 1.0])
def test_fixed_power_off_below_unit_alpha(alpha):
    assert fixed_power_rule(50.0, alpha, 1.0, 0.1) == 0.0


@given(st.floats(0.01, 50), st.floats(1.0, 1e3), st.floats(1.0, 1e3))
def test_fixed_power_monotone_in_alpha(g, a1, a2):
    lo, hi = sorted((a1, a2))
    assert fixed_power_rule(g, lo, 0.2, 0.1) <= fixed_power_rule(g, hi, 0.2, 0.1)


def test_allocate_fixed_power_reports_dynamic_part():
    ctx = diag_context([[2.0, 0.5]], 50.0)
    ctx.p_fixed = np.array([0.3, 0.1])
    alloc = allocate_fixed_power(ctx)
    np.testing.assert_allclose(alloc.p_d, [[0.2, 0.0]])
    np.testing.assert_allclose(alloc.C, fixed_power_rule(ctx.gain, 50.0, ctx.p_fixed, 0.1))


# --- joint rule -------------------------------------------------------------------------

@pytest.mark.parametrize("alpha", [0.5, 1.0])
def test_joint_zero_allocation_when_alpha_at_most_one(alpha):
    ctx = diag_context([[3.0, 0.7]], alpha)
    alloc = allocate_joint(ctx)
    np.testing.assert_array_equal(alloc.C, 0.0)
    np.testing.assert_array_equal(alloc.p_d, 0.0)


def test_joint_zero_allocation_in_deep_fade():
    # (alpha - 1) p0 g / sigma^2 < 1 and no power is worth buying
    ctx = diag_context([[1e-4, 1e-4]], 20.0)
    alloc = allocate_joint(ctx)
    np.testing.assert_array_equal(alloc.C, 0.0)
    np.testing.assert_array_equal(alloc.p_d, 0.0)


def test_joint_respects_peak_power():
    gains = np.random.default_rng(3).exponential(size=(500, 2))
    ctx = diag_context(gains, 400.0, gamma=1.0, rho=0.1, p_peak=0.15)
    alloc = allocate_joint(ctx)
    assert np.all(ctx.config.p0 + alloc.p_d <= 0.15 + 1e-15)
    assert np.any(alloc.p_d > 0.04)


def test_joint_rule_stationary_point_conditions():
    rng = np.random.default_rng(11)
    g = rng.exponential(size=4000)
    alpha = 10 ** rng.uniform(1, 2.7, 4000)
    v = joint_rule(g, alpha, 1e-2, 3e-2, 1.0, 0.1, 0.1, np.inf)
    interior = v.x > 0
    assert interior.mean() > 0.2
    assert np.max(foc_residual(v)[interior]) <= 1e-6
    assert np.all(hessian_ok(v)[interior])


def test_joint_matches_numeric_oracle():
    cfg, H, S, grad, gamma, mu = random_slots(150, seed=5)
    ctx = SlotContext(H, S, np.zeros((150, 2)), cfg, gamma, mu, grad=grad)
    ours = slot_objective(ctx, *_fields(allocate_joint(ctx)))
    best = allocate_numeric(ctx).objective
    assert np.max((ours - best) / np.abs(best)) <= 0.01


def _fields(alloc: Allocation):
    return alloc.C, alloc.p_d


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1e-3, 30.0), min_size=2, max_size=2),
       st.floats(1.0, 1e3), st.floats(-4, 0), st.floats(-1, 2))
def test_joint_never_worse_than_idle(gains, alpha, log_gamma, log_rho):
    ctx = diag_context([gains], alpha, gamma=10 ** log_gamma, rho=10 ** log_rho)
    alloc = allocate_joint(ctx)
    ours = slot_objective(ctx, alloc.C, alloc.p_d)
    idle = slot_objective(ctx, np.zeros((1, 2)), np.zeros((1, 2)))
    assert ours[0] <= idle[0] + 1e-9 * abs(idle[0])


# --- numeric oracle and cost --------------------------------------------------------------

def test_numeric_with_zero_gradient_allocates_nothing():
    ctx = diag_context([[2.0, 1.0]], 0.0)
    res = allocate_numeric(ctx)
    np.testing.assert_allclose(res.allocation.C, 0.0, atol=1e-9)
    np.testing.assert_allclose(res.allocation.p_d, 0.0, atol=1e-9)
    assert res.converged.all()


def test_slot_cost_example():
    alloc = Allocation(np.array([2.0, 1.0]), np.array([0.1, 0.0]))
    cost = slot_cost([1000.0, 0.0], alloc, 0.5, [2.0, 2.0], 1.0, [1e6, 1e6])
    assert cost == pytest.approx(1e-3 + 0.5 * 3.0 + 0.2)


def test_slot_cost_batched_gamma():
    alloc = Allocation(np.ones((3, 2)), np.zeros((3, 2)))
    cost = slot_cost(np.zeros((3, 2)), alloc, np.array([1.0, 2.0, 3.0]), 0.0, 1.0, 1e6)
    np.testing.assert_allclose(cost, [2.0, 4.0, 6.0])


def test_context_needs_gradient_source():
    cfg = ClusterConfig()
    with pytest.raises(ValueError):
        SlotContext(np.eye(2), np.eye(2), np.zeros(2), cfg, 1.0, 1.0)
