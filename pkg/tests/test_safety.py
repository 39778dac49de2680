import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stlswarm.env import EnvConfig, pairwise_min_distance, sample_initial_states, step
from stlswarm.safety import (
    CbfConfig,
    ControllerConfig,
    Gains,
    barrier_constraints,
    brake,
    cbf_filter,
    cbf_filter_agent,
    constraint_residuals,
    nominal_control,
    rollout,
    rollout_fixed_rate,
)
from stlswarm.stl import REGIONS, builtin_spec, custom_spec

SINGLE = EnvConfig()
DOUBLE = EnvConfig("double_integrator")
DUBINS = EnvConfig("dubins")
R = SINGLE.agent_radius


# -- nominal control -----------------------------------------------------------------


@pytest.mark.parametrize("cfg, s", [(SINGLE, [1.0, 2.0]), (DOUBLE, [1.0, 2.0, 0, 0]), (DUBINS, [1.0, 2.0, 0.7, 0])],
                         ids=lambda x: getattr(x, "env_kind", ""))
def test_nominal_at_goal_is_zero(cfg, s):
    np.testing.assert_array_equal(nominal_control(np.array(s), np.array([1.0, 2.0]), cfg), [0.0, 0.0])


def test_nominal_single_proportional():
    np.testing.assert_array_equal(nominal_control(np.zeros(2), np.array([1.0, 0.0]), SINGLE), [1.0, 0.0])


def test_nominal_dubins_on_bearing():
    u = nominal_control(np.array([0.0, 0.0, np.pi / 4, 0.5]), np.array([1.0, 1.0]), DUBINS)
    assert u[0] == pytest.approx(0.0, abs=1e-15)


def test_nominal_double_damps_velocity():
    u = nominal_control(np.array([0.0, 0.0, 0.2, 0.0]), np.array([0.1, 0.0]), DOUBLE, Gains(k_p=1, k_d=2))
    np.testing.assert_allclose(u, [0.1 - 0.4, 0.0])


def test_brake_actions():
    np.testing.assert_array_equal(brake(np.array([[0.0, 0.0, 0.3, 0.5]]), DUBINS), [[0.0, -1.0]])
    np.testing.assert_allclose(brake(np.array([[0.0, 0.0, 0.01, -0.01]]), DOUBLE), [[-1 / 3, 1 / 3]])


# -- filter --------------------------------------------------------------------------


def test_no_neighbors_passthrough():
    s = np.array([[0.0, 0.0], [2.0, 2.0]])
    u = np.array([[0.7, -0.2], [0.1, 0.3]])
    res = cbf_filter(s, u, SINGLE)
    np.testing.assert_array_equal(res.u, u)
    assert not res.constraints.valid.any()


def test_head_on_constraint_by_substitution():
    alpha = 1.0
    s = np.array([[0.0, 0.0], [4 * R, 0.0]])
    vj = np.array([-1.0, 0.0])
    u, fb = cbf_filter_agent(s[0], s[1:], np.array([1.0, 0.0]), SINGLE, CbfConfig(alpha, 0.0), neighbor_vel=vj)
    assert not fb
    p_ij = s[0] - s[1]
    h = p_ij @ p_ij - (2 * R) ** 2
    assert 2 * p_ij @ (u - vj) + alpha * h >= -1e-9


def test_separating_agents_untouched():
    s = np.array([[0.0, 0.0], [0.15, 0.0]])
    u = np.array([[-1.0, 0.0], [1.0, 0.0]])
    np.testing.assert_array_equal(cbf_filter(s, u, SINGLE).u, u)


def test_filter_minimality_and_feasibility():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = rng.uniform(0, 0.8, (6, 2))
        if pairwise_min_distance(s) < 2.5 * R:
            continue
        u_nom = rng.uniform(-1, 1, (6, 2))
        res = cbf_filter(s, u_nom, SINGLE)
        r = constraint_residuals(res.constraints, res.u)
        ok = ~res.fallback
        assert np.all(r[ok] >= -1e-9)
        assert np.all(np.abs(res.u) <= 1.0)
        # unconstrained agents are left exactly alone
        r0 = constraint_residuals(res.constraints, u_nom)
        free = np.all(r0 >= 0, axis=1)
        np.testing.assert_array_equal(res.u[free], u_nom[free])


def _dykstra(A, b, z_nom, iters=20000):
    """Projection of z_nom onto {A z >= b} by Dykstra's alternating projections."""
    A = np.concatenate([A, [[1.0, 0], [0, 1.0], [-1.0, 0], [0, -1.0]]])
    b = np.concatenate([b, [-1.0] * 4])
    z = z_nom.copy()
    inc = np.zeros((len(A), 2))
    for _ in range(iters):
        for k in range(len(A)):
            y = z + inc[k]
            viol = b[k] - A[k] @ y
            z_new = y + max(viol, 0.0) / (A[k] @ A[k]) * A[k]
            inc[k] = y - z_new
            z = z_new
    return z


def test_qp_optimal_against_projection():
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(40):
        s = rng.uniform(0, 0.4, (4, 2))
        if pairwise_min_distance(s) < 2.5 * R:
            continue
        u_nom = rng.uniform(-1, 1, (4, 2))
        res = cbf_filter(s, u_nom, SINGLE)
        c = res.constraints
        for i in np.nonzero(~res.fallback)[0]:
            A, b = c.A[i][c.valid[i]], c.b[i][c.valid[i]]
            if not len(A) or np.all(A @ u_nom[i] >= b):
                continue
            want = _dykstra(A, b, u_nom[i], iters=3000)
            np.testing.assert_allclose(res.u[i], want, atol=1e-6)
            checked += 1
    assert checked > 10


def test_groups_isolate_scenarios():
    s = np.array([[0.0, 0.0], [0.12, 0.0]])
    u = np.array([[1.0, 0.0], [-1.0, 0.0]])
    together = cbf_filter(s, u, SINGLE)
    apart = cbf_filter(s, u, SINGLE, groups=np.array([0, 1]))
    assert not np.array_equal(together.u, u)
    np.testing.assert_array_equal(apart.u, u)


def test_constraint_count_capped():
    a = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    s = np.concatenate([[[0.0, 0.0]], 0.2 * np.stack([np.cos(a), np.sin(a)], 1)])
    c = barrier_constraints(s, SINGLE, CbfConfig(max_constraints=8))
    assert c.valid.shape[1] == 8 and c.valid[0].all()


def test_lidar_points_constrain():
    cfg = EnvConfig(n_rays=32, obstacles=((0.3, 0.0, 0.1),))
    res = cbf_filter(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]), cfg)
    assert res.constraints.valid[0].any()
    assert np.all(res.constraints.other[0][res.constraints.valid[0]] == -1)


@pytest.mark.parametrize("seed", range(100))
def test_two_agent_head_on_safety(seed):
    rng = np.random.default_rng(seed)
    sep = rng.uniform(4 * R, 1.0)
    ang = rng.uniform(0, 2 * np.pi)
    d = np.array([np.cos(ang), np.sin(ang)])
    c = rng.uniform(-0.5, 0.5, 2)
    s = np.stack([c - d * sep / 2, c + d * sep / 2]) + rng.normal(0, 1e-3, (2, 2)) * (seed % 2)
    goals = s[::-1].copy()
    for _ in range(200):
        u_nom = nominal_control(s, goals, SINGLE)
        res = cbf_filter(s, u_nom, SINGLE)
        assert not res.fallback.any()
        assert np.min(constraint_residuals(res.constraints, res.u)) >= -1e-9
        s = step(s, res.u, SINGLE)
        assert np.linalg.norm(s[0] - s[1]) >= 2 * R


def _first_fallback_and_collision(seed, kind, steps=100):
    cfg = EnvConfig(kind)
    rng = np.random.default_rng(seed)
    s = sample_initial_states(8, cfg, rng)
    goals = rng.uniform(-1, 3, (8, 2))
    first_fb = first_hit = None
    for t in range(steps):
        res = cbf_filter(s, nominal_control(s, goals, cfg), cfg)
        if first_fb is None and res.fallback.any():
            first_fb = t
        s = step(s, res.u, cfg)
        if first_hit is None and pairwise_min_distance(s) < 2 * cfg.agent_radius:
            first_hit = t
    return first_fb, first_hit


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["single_integrator", "double_integrator"]))
def test_swarm_collisions_only_after_reported_fallback(seed, kind):
    first_fb, first_hit = _first_fallback_and_collision(seed, kind)
    if first_hit is not None:
        assert first_fb is not None and first_fb <= first_hit


def test_double_integrator_braking_limit_is_reported():
    # fast agents with bounded acceleration can outrun the one-step filter;
    # the filter must flag this rather than fail silently
    first_fb, first_hit = _first_fallback_and_collision(106, "double_integrator")
    assert first_hit is not None
    assert first_fb is not None and first_fb < first_hit


# -- rollout timing --------------------------------------------------------------------

SPEC = custom_spec("F[0,4](A)", REGIONS, 4, 10)


def test_constant_plan_finishes_at_kT():
    s = np.array([[0.0, 0.0], [2.0, 2.0]])
    plans = np.repeat(s[:, None, :], 5, axis=1)
    r = rollout(plans, s, SINGLE, SPEC)
    assert r.completion.tolist() == [[40, 40]]
    assert r.end_step.tolist() == [40]
    assert r.arrivals[0, 0].tolist() == [0, 10, 20, 30, 40]
    assert r.advances[0, 0].tolist() == [0, 10, 20, 30, 40]


def test_start_inside_first_goal_waits_for_k():
    s = np.array([[0.0, 0.0]])
    plans = np.array([[[0.1, 0.0], [0.1, 0.0], [2.0, 0.0], [2.0, 0.0], [2.0, 0.0]]])
    r = rollout(plans, s, SINGLE, SPEC)
    assert r.arrivals[0, 0, 0] == 0
    assert r.advances[0, 0, 1] == 10  # not before t = k
    assert r.advances[0, 0, 2] >= 20


def test_straight_line_plan_reaches_end():
    s = np.array([[0.0, 0.0]])
    plans = np.linspace([0.0, 0.0], [2.0, 1.0], 5)[None]
    r = rollout(plans, s, SINGLE, SPEC)
    end = r.completion[0, 0]
    assert end >= 0
    assert np.linalg.norm(r.states[end, 0, 0, :2] - plans[0, -1]) <= 0.3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_arrival_timestamps_ordered(seed):
    rng = np.random.default_rng(seed)
    spec = builtin_spec("seq")
    s = sample_initial_states(3, SINGLE, rng)
    plans = s[:, None, :] + np.cumsum(rng.normal(0, 0.3, (3, spec.T + 1, 2)), axis=1)
    r = rollout(plans, s, SINGLE, spec)
    k = spec.k
    for arr in r.arrivals[0]:
        done = arr[arr >= 0]
        assert np.all(np.diff(done) > 0)
        assert np.all(done >= k * np.arange(done.size))
        # reached waypoints form a prefix
        assert np.all(arr[: done.size] >= 0)


def test_rollout_batch_matches_single():
    rng = np.random.default_rng(3)
    init = np.stack([sample_initial_states(3, SINGLE, rng) for _ in range(2)])
    plans = init[:, :, None, :] + rng.normal(0, 0.5, (2, 3, 5, 2))
    both = rollout(plans, init, SINGLE, SPEC)
    for b in range(2):
        one = rollout(plans[b], init[b], SINGLE, SPEC)
        np.testing.assert_array_equal(one.arrivals[0], both.arrivals[b])
        S = one.states.shape[0]
        np.testing.assert_array_equal(one.states[:, 0], both.states[:S, b])


def test_fixed_rate_rollout_shape_and_targets():
    s = np.array([[0.0, 0.0]])
    plans = np.repeat(np.array([[[0.3, 0.0]]]), 5, axis=1)
    samples = rollout_fixed_rate(plans, s, SINGLE, SPEC, ControllerConfig(use_cbf=False))
    assert samples.shape == (5, 1, 1, 2)
    x = [0.0]
    for _ in range(40):
        x.append(x[-1] + 0.03 * (0.3 - x[-1]))
    np.testing.assert_allclose(samples[:, 0, 0, 0], x[::10], atol=1e-14)


def test_plan_length_checked():
    with pytest.raises(ValueError, match="plan length"):
        rollout(np.zeros((1, 3, 2)), np.zeros((1, 2)), SINGLE, SPEC)
