"""Goal-tracking controllers, an analytic CBF safety filter, and closed-loop rollout."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .env import EnvConfig, NonFiniteError, Trajectory, clamp_action, lidar_hits, step, velocities, wrap_angle
from .stl.formula import SpecConfig

R_GOAL = 0.3


@dataclass(frozen=True)
class Gains:
    k_p: float = 1.0
    k_d: float = 2.0
    k_theta: float = 2.0
    k_v: float = 1.0


@dataclass(frozen=True)
class CbfConfig:
    alpha_gain: float = 1.0
    safety_margin: float = 0.05
    max_constraints: int = 8

    def __post_init__(self):
        if not self.alpha_gain > 0:
            raise ValueError("alpha_gain must be positive")
        if self.safety_margin < 0:
            raise ValueError("safety_margin must be non-negative")
        if self.max_constraints < 1:
            raise ValueError("max_constraints must be at least 1")


@dataclass(frozen=True)
class ControllerConfig:
    gains: Gains = field(default_factory=Gains)
    cbf: CbfConfig = field(default_factory=CbfConfig)
    use_cbf: bool = True
    r_goal: float = R_GOAL

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerConfig":
        d = dict(d)
        return cls(
            gains=Gains(**d.pop("gains", {})),
            cbf=CbfConfig(**d.pop("cbf", {})),
            **d,
        )


def nominal_control(states: np.ndarray, goals: np.ndarray, cfg: EnvConfig, gains: Gains = Gains()) -> np.ndarray:
    """PID-style goal tracking; vectorized over leading axes."""
    s = np.asarray(states, dtype=np.float64)
    g = np.asarray(goals, dtype=np.float64)
    err = g - s[..., :2]
    if cfg.env_kind == "single_integrator":
        return clamp_action(gains.k_p * err, cfg)
    if cfg.env_kind == "double_integrator":
        return clamp_action(gains.k_p * err - gains.k_d * s[..., 2:4], cfg)
    dist = np.linalg.norm(err, axis=-1)
    bearing = np.arctan2(err[..., 1], err[..., 0])
    heading_err = wrap_angle(bearing - s[..., 2])
    heading_err = np.where(dist > 1e-9, heading_err, 0.0)
    # slow down when facing away from the goal
    v_des = np.minimum(gains.k_p * dist * np.maximum(np.cos(heading_err), 0.0), cfg.v_max)
    omega = gains.k_theta * heading_err
    accel = gains.k_v * (v_des - s[..., 3])
    return clamp_action(np.stack([omega, accel], axis=-1), cfg)


def brake(states: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """Maximal braking action."""
    s = np.asarray(states, dtype=np.float64)
    if cfg.env_kind == "single_integrator":
        return np.zeros(s.shape[:-1] + (2,))
    if cfg.env_kind == "double_integrator":
        return clamp_action(-s[..., 2:4] / cfg.dt, cfg)
    out = np.zeros(s.shape[:-1] + (2,))
    out[..., 1] = -cfg.action_limit
    return out


def velocity_map(states: np.ndarray, cfg: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Next-step planar velocity as an affine map of the action: w' = w0 + G u.

    Single integrators move with the action itself. The double integrator and
    the Dubins car (linearized in (omega, a)) act on their one-step velocity.
    """
    s = np.asarray(states, dtype=np.float64)
    M = s.shape[0]
    if cfg.env_kind == "single_integrator":
        return np.zeros((M, 2)), np.broadcast_to(np.eye(2), (M, 2, 2)).copy()
    if cfg.env_kind == "double_integrator":
        return s[:, 2:4].copy(), np.broadcast_to(cfg.dt * np.eye(2), (M, 2, 2)).copy()
    th, v = s[:, 2], s[:, 3]
    c, sn = np.cos(th), np.sin(th)
    G = np.empty((M, 2, 2))
    G[:, 0, 0] = -v * sn
    G[:, 1, 0] = v * c
    G[:, 0, 1] = c
    G[:, 1, 1] = sn
    return np.stack([v * c, v * sn], axis=1), cfg.dt * G


@dataclass
class Constraints:
    """Per-agent halfspaces ``A z >= b`` over the action z."""

    A: np.ndarray  # (M, K, 2)
    b: np.ndarray  # (M, K)
    valid: np.ndarray  # (M, K) bool
    other: np.ndarray  # (M, K) neighbor agent id, or -1 for LiDAR points / padding


def barrier_constraints(
    states: np.ndarray,
    cfg: EnvConfig,
    cbf: CbfConfig,
    groups: np.ndarray | None = None,
    neighbor_vel: np.ndarray | None = None,
) -> Constraints:
    """Linear CBF constraints 2 p_ij.(w_i' - v_j) + alpha h_ij >= 0 per agent.

    Neighbors are agents of the same group within the sensing radius plus
    LiDAR hit points (static). Only the ``max_constraints`` nearest are kept,
    ties going to the lower index.
    """
    s = np.asarray(states, dtype=np.float64)
    M = s.shape[0]
    p = s[:, :2]
    groups = np.zeros(M, dtype=int) if groups is None else np.asarray(groups)
    vel = velocities(s, cfg) if neighbor_vel is None else np.asarray(neighbor_vel, dtype=np.float64)
    R = cfg.sensing_radius

    rel = p[:, None, :] - p[None, :, :]  # (M, M, 2): p_i - p_j
    dist = np.sqrt(np.sum(rel * rel, axis=-1))
    ok = (groups[:, None] == groups[None, :]) & ~np.eye(M, dtype=bool) & (dist <= R)
    vj = np.broadcast_to(vel[None, :, :], (M, M, 2))
    other = np.broadcast_to(np.arange(M)[None, :], (M, M))

    if cfg.obstacles and cfg.n_rays > 0:
        owner, pts = lidar_hits(s, cfg)
        n = cfg.n_rays
        orel = np.zeros((M, n, 2))
        odist = np.full((M, n), np.inf)
        ook = np.zeros((M, n), dtype=bool)
        slot = np.zeros(M, dtype=int)
        for o, q in zip(owner, pts):
            orel[o, slot[o]] = p[o] - q
            odist[o, slot[o]] = np.linalg.norm(p[o] - q)
            ook[o, slot[o]] = True
            slot[o] += 1
        rel = np.concatenate([rel, orel], axis=1)
        dist = np.concatenate([dist, odist], axis=1)
        ok = np.concatenate([ok, ook], axis=1)
        vj = np.concatenate([vj, np.zeros((M, n, 2))], axis=1)
        other = np.concatenate([other, np.full((M, n), -1)], axis=1)

    K = min(cbf.max_constraints, rel.shape[1])
    key = np.where(ok, dist, np.inf)
    order = np.argsort(key, axis=1, kind="stable")[:, :K]
    rows = np.arange(M)[:, None]
    rel_k = rel[rows, order]
    vj_k = vj[rows, order]
    valid = ok[rows, order]

    w0, G = velocity_map(s, cfg)
    d_safe = 2 * cfg.agent_radius + cbf.safety_margin
    h = np.sum(rel_k * rel_k, axis=-1) - d_safe**2
    A = 2 * np.einsum("mji,mkj->mki", G, rel_k)
    b = -cbf.alpha_gain * h - 2 * np.sum(rel_k * (w0[:, None, :] - vj_k), axis=-1)
    A = np.where(valid[..., None], A, 0.0)
    b = np.where(valid, b, 0.0)
    return Constraints(A, b, valid, np.where(valid, other[rows, order], -1))


def constraint_residuals(cons: Constraints, u: np.ndarray) -> np.ndarray:
    """A z - b per constraint; padded slots read +inf."""
    r = np.einsum("mki,mi->mk", cons.A, u) - cons.b
    return np.where(cons.valid, r, np.inf)


@dataclass
class FilterResult:
    u: np.ndarray
    fallback: np.ndarray  # (M,) bool
    constraints: Constraints


def _solve_small_qp(A, b, valid, z_nom, tol=1e-11):
    """min |z - z_nom|^2 s.t. A z >= b, enumerating active sets of size <= 2.

    In two dimensions every vertex of the optimal face is determined by at
    most two active halfspaces, so the enumeration is exact.
    """
    M, m, _ = A.shape
    cands = [z_nom[:, None, :]]
    ok = [np.ones((M, 1), dtype=bool)]

    an = np.sum(A * A, axis=-1)
    viol = b - np.einsum("mki,mi->mk", A, z_nom)
    good = valid & (an > 1e-18)
    z1 = z_nom[:, None, :] + (viol / np.where(good, an, 1.0))[..., None] * A
    cands.append(z1)
    ok.append(good)

    pairs = np.array(list(combinations(range(m), 2)))
    if len(pairs):
        Ai, Aj = A[:, pairs[:, 0]], A[:, pairs[:, 1]]
        bi, bj = b[:, pairs[:, 0]], b[:, pairs[:, 1]]
        det = Ai[..., 0] * Aj[..., 1] - Ai[..., 1] * Aj[..., 0]
        scale = np.sqrt(an[:, pairs[:, 0]] * an[:, pairs[:, 1]])
        nonsing = np.abs(det) > 1e-12 * np.maximum(scale, 1e-300)
        dsafe = np.where(nonsing, det, 1.0)
        zx = (bi * Aj[..., 1] - bj * Ai[..., 1]) / dsafe
        zy = (Ai[..., 0] * bj - Aj[..., 0] * bi) / dsafe
        cands.append(np.stack([zx, zy], axis=-1))
        ok.append(nonsing & valid[:, pairs[:, 0]] & valid[:, pairs[:, 1]])

    Z = np.concatenate(cands, axis=1)  # (M, C, 2)
    usable = np.concatenate(ok, axis=1)
    res = np.einsum("mki,mci->mck", A, Z) - b[:, None, :]
    feasible = usable & np.all((res >= -tol) | ~valid[:, None, :], axis=-1)
    cost = np.sum((Z - z_nom[:, None, :]) ** 2, axis=-1)
    cost = np.where(feasible, cost, np.inf)
    best = np.argmin(cost, axis=1)
    z = Z[np.arange(M), best]
    return z, np.isfinite(cost[np.arange(M), best])


def cbf_filter(
    states: np.ndarray,
    u_nom: np.ndarray,
    env_cfg: EnvConfig,
    cbf: CbfConfig = CbfConfig(),
    groups: np.ndarray | None = None,
    neighbor_vel: np.ndarray | None = None,
) -> FilterResult:
    """Minimum-norm correction of ``u_nom`` satisfying every barrier and box constraint.

    All agents are filtered at once but each uses only its own neighborhood,
    so the result is the same as running the filter per agent. Agents whose
    QP is infeasible get the braking action and are flagged.
    """
    s = np.asarray(states, dtype=np.float64)
    u0 = clamp_action(u_nom, env_cfg)
    cons = barrier_constraints(s, env_cfg, cbf, groups, neighbor_vel)
    M = s.shape[0]
    lim = env_cfg.action_limit
    box_A = np.broadcast_to(np.array([[1.0, 0], [0, 1.0], [-1.0, 0], [0, -1.0]]), (M, 4, 2))
    box_b = np.full((M, 4), -lim)
    A = np.concatenate([cons.A, box_A], axis=1)
    b = np.concatenate([cons.b, box_b], axis=1)
    valid = np.concatenate([cons.valid, np.ones((M, 4), dtype=bool)], axis=1)

    # agents whose nominal action already satisfies everything pass untouched
    res0 = np.einsum("mki,mi->mk", A, u0) - b
    free = np.all((res0 >= 0) | ~valid, axis=1)
    u = u0.copy()
    fallback = np.zeros(M, dtype=bool)
    busy = ~free
    if busy.any():
        z, feas = _solve_small_qp(A[busy], b[busy], valid[busy], u0[busy])
        z = np.where(feas[:, None], z, brake(s[busy], env_cfg))
        u[busy] = np.clip(z, -lim, lim)
        fallback[np.nonzero(busy)[0][~feas]] = True
    return FilterResult(u, fallback, cons)


def cbf_filter_agent(
    state_i: np.ndarray,
    neighbor_states: np.ndarray,
    u_nom_i: np.ndarray,
    env_cfg: EnvConfig,
    cbf: CbfConfig = CbfConfig(),
    neighbor_vel: np.ndarray | None = None,
) -> tuple[np.ndarray, bool]:
    """Single-agent view of :func:`cbf_filter`: filter agent i against its neighbors."""
    nb = np.asarray(neighbor_states, dtype=np.float64).reshape(-1, env_cfg.state_dim)
    s = np.concatenate([np.asarray(state_i, dtype=np.float64)[None, :], nb])
    u = np.zeros((s.shape[0], 2))
    u[0] = u_nom_i
    vel = None
    if neighbor_vel is not None:
        vel = np.concatenate([np.zeros((1, 2)), np.asarray(neighbor_vel, dtype=np.float64).reshape(-1, 2)])
    res = cbf_filter(s, u, env_cfg, cbf, neighbor_vel=vel)
    return res.u[0], bool(res.fallback[0])


# -- closed-loop rollout --------------------------------------------------------


@dataclass
class RolloutResult:
    """Batched closed-loop record.

    ``arrivals[b, i, w]`` is the step at which agent i first reached waypoint w
    (-1 if never), ``advances[b, i, w]`` the step it switched to tracking w.
    """

    states: np.ndarray  # (S+1, B, N, d)
    actions: np.ndarray  # (S, B, N, 2)
    arrivals: np.ndarray  # (B, N, T+1)
    advances: np.ndarray  # (B, N, T+1)
    completion: np.ndarray  # (B, N), -1 if unfinished
    end_step: np.ndarray  # (B,)
    fallbacks: np.ndarray  # (B,)
    dt: float

    @property
    def n_scenarios(self) -> int:
        return self.states.shape[1]

    def trajectory(self, b: int = 0) -> Trajectory:
        """Scenario ``b`` truncated at its own end step."""
        S = int(self.end_step[b])
        return Trajectory(self.states[: S + 1, b], self.actions[:S, b], self.dt)


def _batched(plans, init):
    plans = np.asarray(plans, dtype=np.float64)
    init = np.asarray(init, dtype=np.float64)
    if plans.ndim == 3:
        plans = plans[None]
    if init.ndim == 2:
        init = init[None]
    if plans.shape[:2] != init.shape[:2]:
        raise ValueError(f"plan batch {plans.shape[:2]} vs states {init.shape[:2]}")
    return plans, init


def _control(states, targets, env_cfg, ctrl, groups):
    u = nominal_control(states, targets, env_cfg, ctrl.gains)
    if not ctrl.use_cbf:
        return u, np.zeros(states.shape[0], dtype=bool)
    res = cbf_filter(states, u, env_cfg, ctrl.cbf, groups)
    return res.u, res.fallback


def rollout(
    plans: np.ndarray,
    init_states: np.ndarray,
    env_cfg: EnvConfig,
    spec: SpecConfig,
    ctrl: ControllerConfig = ControllerConfig(),
    max_steps: int | None = None,
) -> RolloutResult:
    """Track goal plans with the waypoint advancement rule.

    An agent tracks waypoint w until it is within ``r_goal`` of it at a step
    t >= k (w + 1); then it moves on to w + 1. The episode ends once every
    agent has reached its last waypoint or after ``5 k T`` steps.
    ``plans`` is (N, T+1, 2) or (B, N, T+1, 2).
    """
    plans, x = _batched(plans, init_states)
    B, N, T1, _ = plans.shape
    T, k = spec.plan_length, spec.sample_interval
    if T1 != T + 1:
        raise ValueError(f"plan length {T1} does not match T+1 = {T + 1}")
    horizon = spec.eval_horizon if max_steps is None else max_steps
    M = B * N
    groups = np.repeat(np.arange(B), N)
    flat_plan = plans.reshape(M, T1, 2)
    rows = np.arange(M)

    w = np.zeros(M, dtype=int)
    arr = np.full((M, T1), -1)
    adv = np.full((M, T1), -1)
    adv[:, 0] = 0
    fallbacks = np.zeros(B, dtype=int)
    done = np.zeros(M, dtype=bool)
    end_step = np.full(B, horizon)
    s = x.reshape(M, -1).copy()
    hist_s = [s.copy()]
    hist_u = []
    rg = ctrl.r_goal
    for t in range(horizon + 1):
        p = s[:, :2]
        within = np.linalg.norm(p - flat_plan[rows, w], axis=1) <= rg
        arr[rows, w] = np.where((arr[rows, w] < 0) & within, t, arr[rows, w])
        go = (arr[rows, w] >= 0) & within & (t >= k * (w + 1)) & (w < T)
        w = w + go
        adv[rows[go], w[go]] = t
        within2 = np.linalg.norm(p - flat_plan[rows, w], axis=1) <= rg
        late = go & within2 & (arr[rows, w - 1] < t)
        arr[rows[late], w[late]] = t
        done = arr[:, T] >= 0
        dgrp = done.reshape(B, N).all(axis=1)
        end_step = np.where(dgrp & (end_step == horizon) & (t < horizon), t, end_step)
        if done.all() or t == horizon:
            break
        u, fb = _control(s, flat_plan[rows, w], env_cfg, ctrl, groups)
        fallbacks += np.bincount(groups[fb], minlength=B)
        u = clamp_action(u, env_cfg)
        s = step(s, u, env_cfg)
        if not np.all(np.isfinite(s)):
            bad = np.nonzero(~np.all(np.isfinite(s), axis=1))[0]
            raise NonFiniteError(f"non-finite state at step {t + 1} for agents {bad.tolist()}")
        hist_s.append(s.copy())
        hist_u.append(u)
    # a scenario that finished at exactly the last step still counts as finished then
    end_step = np.minimum(end_step, len(hist_s) - 1)
    S = len(hist_s) - 1
    completion = arr[:, T].reshape(B, N)
    return RolloutResult(
        states=np.stack(hist_s).reshape(S + 1, B, N, -1),
        actions=np.stack(hist_u).reshape(S, B, N, 2) if hist_u else np.zeros((0, B, N, 2)),
        arrivals=arr.reshape(B, N, T1),
        advances=adv.reshape(B, N, T1),
        completion=completion,
        end_step=end_step,
        fallbacks=fallbacks,
        dt=env_cfg.dt,
    )


def rollout_fixed_rate(
    plans: np.ndarray,
    init_states: np.ndarray,
    env_cfg: EnvConfig,
    spec: SpecConfig,
    ctrl: ControllerConfig = ControllerConfig(),
) -> np.ndarray:
    """Training-time rollout: during steps [k(t-1), kt) every agent tracks g^t.

    Returns the states sampled every k steps, shape (T+1, B, N, d).
    """
    plans, x = _batched(plans, init_states)
    B, N, T1, _ = plans.shape
    T, k = spec.plan_length, spec.sample_interval
    M = B * N
    groups = np.repeat(np.arange(B), N)
    flat_plan = plans.reshape(M, T1, 2)
    s = x.reshape(M, -1).copy()
    samples = [s.copy()]
    for t in range(k * T):
        idx = min(t // k + 1, T)
        u, _ = _control(s, flat_plan[:, idx], env_cfg, ctrl, groups)
        s = step(s, u, env_cfg)
        if not np.all(np.isfinite(s)):
            raise NonFiniteError(f"non-finite state at step {t + 1}")
        if (t + 1) % k == 0:
            samples.append(s.copy())
    return np.stack(samples).reshape(T1, B, N, -1)
