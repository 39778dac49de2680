"""Multi-agent dynamics: single/double integrators and Dubins cars, LiDAR, trajectories."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .io import atomic_write_text

ENV_KINDS = ("single_integrator", "double_integrator", "dubins")
_STATE_DIM = {"single_integrator": 2, "double_integrator": 4, "dubins": 4}


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    env_kind: str = "single_integrator"
    dt: float = 0.03
    agent_radius: float = 0.05
    sensing_radius: float = 0.5
    n_rays: int = 32
    action_limit: float = 1.0
    v_max: float = 1.0  # dubins speed cap
    arena: tuple = (-1.0, 3.0, -1.0, 3.0)  # xmin, xmax, ymin, ymax
    obstacles: tuple = ()  # ((cx, cy, radius), ...)

    def __post_init__(self):
        if self.env_kind not in ENV_KINDS:
            raise ValueError(f"env_kind must be one of {ENV_KINDS}, got {self.env_kind!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.agent_radius > 0:
            raise ValueError("agent_radius must be positive")
        if not self.sensing_radius > 2 * self.agent_radius:
            raise ValueError("sensing_radius must exceed twice the agent radius")
        if self.n_rays < 0:
            raise ValueError("n_rays must be non-negative")
        if not self.action_limit > 0:
            raise ValueError("action_limit must be positive")
        object.__setattr__(self, "arena", tuple(float(v) for v in self.arena))
        object.__setattr__(
            self, "obstacles", tuple(tuple(float(v) for v in ob) for ob in self.obstacles)
        )

    @property
    def state_dim(self) -> int:
        return _STATE_DIM[self.env_kind]

    @property
    def action_dim(self) -> int:
        return 2

    @property
    def edge_dim(self) -> int:
        return 2 if self.env_kind == "single_integrator" else 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arena"] = list(self.arena)
        d["obstacles"] = [list(o) for o in self.obstacles]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        d["arena"] = tuple(d.get("arena", cls.arena))
        d["obstacles"] = tuple(tuple(o) for o in d.get("obstacles", ()))
        return cls(**d)


def positions(states: np.ndarray) -> np.ndarray:
    """Map full states to planar positions (first two components)."""
    return np.asarray(states)[..., :2]


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - theta, 2 * np.pi)


def clamp_action(actions: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    lim = cfg.action_limit
    return np.clip(np.asarray(actions, dtype=np.float64), -lim, lim)


def step(states: np.ndarray, actions: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """One explicit-Euler step. Works on a single state (d,) or a stack (..., d).

    Actions are clamped to the limits before integration.
    """
    s = np.asarray(states, dtype=np.float64)
    raw = np.asarray(actions, dtype=np.float64)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(raw))):
        raise NonFiniteError("non-finite state or action")
    u = clamp_action(raw, cfg)
    dt = cfg.dt
    if cfg.env_kind == "single_integrator":
        return s + dt * u
    if cfg.env_kind == "double_integrator":
        out = np.empty_like(s)
        out[..., :2] = s[..., :2] + dt * s[..., 2:]
        out[..., 2:] = s[..., 2:] + dt * u
        return out
    px, py, th, v = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    out = np.empty_like(s)
    out[..., 0] = px + dt * v * np.cos(th)
    out[..., 1] = py + dt * v * np.sin(th)
    out[..., 2] = wrap_angle(th + dt * u[..., 0])
    out[..., 3] = np.clip(v + dt * u[..., 1], 0.0, cfg.v_max)
    return out


def velocities(states: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """Planar velocity read off the state; zero for single integrators."""
    s = np.asarray(states, dtype=np.float64)
    if cfg.env_kind == "single_integrator":
        return np.zeros(s.shape[:-1] + (2,))
    if cfg.env_kind == "double_integrator":
        return s[..., 2:4].copy()
    th, v = s[..., 2], s[..., 3]
    return np.stack([v * np.cos(th), v * np.sin(th)], axis=-1)


def ray_angles(states: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    s = np.asarray(states, dtype=np.float64)
    base = 2 * np.pi * np.arange(cfg.n_rays) / max(cfg.n_rays, 1)
    heading = s[..., 2:3] if cfg.env_kind == "dubins" else np.zeros(s.shape[:-1] + (1,))
    return heading + base


def lidar_scan(states: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """Ray distances to the nearest circle obstacle, capped at the sensing radius.

    Accepts (d,) or (..., d); returns (n_rays,) or (..., n_rays).
    """
    s = np.asarray(states, dtype=np.float64)
    R = cfg.sensing_radius
    ang = ray_angles(s, cfg)
    dist = np.full(ang.shape, R)
    if not cfg.obstacles or cfg.n_rays == 0:
        return dist
    p = s[..., None, :2]
    u = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    for cx, cy, rad in cfg.obstacles:
        w = p - np.array([cx, cy])
        # |w + s u|^2 = rad^2  ->  s^2 + 2 (w.u) s + |w|^2 - rad^2 = 0
        bq = np.sum(w * u, axis=-1)
        cq = np.sum(w * w, axis=-1) - rad * rad
        disc = bq * bq - cq
        root = np.sqrt(np.maximum(disc, 0.0))
        near = -bq - root
        far = -bq + root
        hit = np.where(cq <= 0, 0.0, np.where(near >= 0, near, np.where(far >= 0, 0.0, np.inf)))
        hit = np.where(disc >= 0, hit, np.inf)
        dist = np.minimum(dist, hit)
    return dist


def lidar_hits(states: np.ndarray, cfg: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Hit points of rays shorter than R: returns (owner agent index, point (2,))."""
    s = np.asarray(states, dtype=np.float64)
    d = lidar_scan(s, cfg)
    if d.size == 0:
        return np.zeros(0, dtype=int), np.zeros((0, 2))
    owner, ray = np.nonzero(d < cfg.sensing_radius)
    ang = ray_angles(s, cfg)[owner, ray]
    pts = s[owner, :2] + d[owner, ray][:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return owner, pts


def pairwise_distances(states: np.ndarray) -> np.ndarray:
    p = positions(states)
    diff = p[..., :, None, :] - p[..., None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def pairwise_min_distance(states: np.ndarray) -> float:
    s = np.asarray(states, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 2:
        raise ValueError("pairwise_min_distance needs at least two agents")
    d = pairwise_distances(s)
    iu = np.triu_indices(s.shape[0], 1)
    return float(d[iu].min())


def sample_initial_states(
    n_agents: int, cfg: EnvConfig, rng: np.random.Generator, max_tries: int = 10000
) -> np.ndarray:
    """Uniform positions in the arena with pairwise distance > 2.5 r, clear of obstacles."""
    x0, x1, y0, y1 = cfg.arena
    min_sep = 2.5 * cfg.agent_radius
    pts: list[np.ndarray] = []
    tries = 0
    while len(pts) < n_agents:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not place {n_agents} agents after {max_tries} draws")
        p = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        if any(np.linalg.norm(p - q) <= min_sep for q in pts):
            continue
        if any(np.hypot(p[0] - cx, p[1] - cy) <= rad + 2 * cfg.agent_radius for cx, cy, rad in cfg.obstacles):
            continue
        pts.append(p)
    P = np.array(pts).reshape(n_agents, 2)
    if cfg.env_kind == "single_integrator":
        return P
    extra = np.zeros((n_agents, 2))
    if cfg.env_kind == "dubins":
        extra[:, 0] = rng.uniform(-np.pi, np.pi, n_agents)
    return np.concatenate([P, extra], axis=1)


@dataclass
class Trajectory:
    """Time-major record: states (S+1, N, d), actions (S, N, 2)."""

    states: np.ndarray
    actions: np.ndarray
    dt: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.states.ndim != 3:
            raise ValueError("states must be (steps+1, N, state_dim)")
        if self.actions.size and self.actions.shape[:2] != (self.states.shape[0] - 1, self.states.shape[1]):
            raise ValueError("actions must be (steps, N, action_dim)")

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def n_agents(self) -> int:
        return self.states.shape[1]

    @property
    def positions(self) -> np.ndarray:
        return positions(self.states)


def replay(traj: Trajectory, cfg: EnvConfig) -> np.ndarray:
    """Re-step from the first state with the stored actions."""
    out = [traj.states[0]]
    for a in traj.actions:
        out.append(step(out[-1], a, cfg))
    return np.stack(out)


def save_trajectory(path, traj: Trajectory, cfg: EnvConfig, spec_name: str, extra: dict | None = None) -> Path:
    header = {"header": True, "env": cfg.to_dict(), "spec": spec_name, "dt": traj.dt}
    header.update(traj.meta)
    if extra:
        header.update(extra)
    lines = [json.dumps(header, sort_keys=True)]
    for t in range(traj.states.shape[0]):
        rec = {"t": t, "states": traj.states[t].tolist()}
        if t < traj.actions.shape[0]:
            rec["actions"] = traj.actions[t].tolist()
        lines.append(json.dumps(rec))
    return atomic_write_text(path, "\n".join(lines) + "\n")


def load_trajectory(path) -> tuple[Trajectory, EnvConfig | None, dict]:
    """Read a trajectory file. Returns (trajectory, env config or None, header)."""
    header: dict = {}
    states, actions = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if rec.get("header"):
                header = rec
                continue
            if "states" not in rec:
                raise ValueError(f"{path}:{lineno}: record lacks 'states'")
            if rec.get("t", len(states)) != len(states):
                raise ValueError(f"{path}:{lineno}: expected t={len(states)}, got {rec.get('t')}")
            states.append(rec["states"])
            if "actions" in rec:
                actions.append(rec["actions"])
    if not states:
        raise ValueError(f"{path}: no state records")
    S = np.asarray(states, dtype=np.float64)
    if S.ndim == 2:  # single agent written as flat vectors
        S = S[:, None, :]
    A = np.asarray(actions, dtype=np.float64) if actions else np.zeros((0, S.shape[1], 2))
    if A.ndim == 2:
        A = A[:, None, :]
    if A.shape[0] not in (0, S.shape[0] - 1):
        raise ValueError(f"{path}: {A.shape[0]} action records for {S.shape[0]} states")
    cfg = EnvConfig.from_dict(header["env"]) if "env" in header else None
    traj = Trajectory(S, A, header.get("dt", cfg.dt if cfg else 0.03))
    return traj, cfg, header
