"""Episode judging, baselines and the seeded experiment runner."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .env import EnvConfig, Trajectory, lidar_scan, load_trajectory, pairwise_distances, replay, sample_initial_states, save_trajectory
from .io import atomic_write_text, dumps_jsonl
from .planner import PlannerParams, plan
from .safety import ControllerConfig, RolloutResult, rollout
from .stl.formula import SpecConfig
from .stl.robustness import robustness_exact, robustness_smooth

CSV_HEADER = [
    "planner", "spec", "env", "N", "seeds",
    "plan_time_s", "finish_pct", "safety_pct", "success_pct", "ttr_steps",
]


@dataclass
class EpisodeMetrics:
    finished: bool
    safe: bool
    success: bool
    ttr: int | None
    planning_time: float = 0.0
    infeasible_fallbacks: int = 0
    robustness: list = field(default_factory=list)  # per agent, None if unfinished
    min_distance: float = math.inf

    def to_dict(self) -> dict:
        d = asdict(self)
        d["min_distance"] = None if math.isinf(self.min_distance) else self.min_distance
        return d


def visited_sequence(positions: np.ndarray, arrivals: np.ndarray) -> np.ndarray | None:
    """Positions at one agent's waypoint arrival steps, or None if a waypoint was missed."""
    if np.any(arrivals < 0):
        return None
    return positions[arrivals]


def judge_episode(
    traj: Trajectory,
    arrivals: np.ndarray,
    spec: SpecConfig,
    env_cfg: EnvConfig,
    mode: str = "visited",
    planning_time: float = 0.0,
    fallbacks: int = 0,
) -> EpisodeMetrics:
    """Finish, safety and success for one episode.

    ``mode="visited"`` judges each agent's spec on its states at the recorded
    waypoint-arrival steps. ``mode="uniform"`` uses the states every k steps.
    Safety covers pairs up to the earlier of the two completion steps and
    LiDAR up to each agent's own completion step.
    """
    if mode not in ("visited", "uniform"):
        raise ValueError("mode must be 'visited' or 'uniform'")
    pos = traj.positions
    arrivals = np.asarray(arrivals, dtype=int)
    S, N = traj.n_steps, traj.n_agents
    T, k = spec.plan_length, spec.sample_interval
    if arrivals.shape != (N, T + 1):
        raise ValueError(f"arrivals shape {arrivals.shape}, expected {(N, T + 1)}")
    if np.any(arrivals > S):
        raise ValueError("arrival step beyond the end of the trajectory")

    rob: list = []
    for i in range(N):
        if mode == "visited":
            seq = visited_sequence(pos[:, i], arrivals[i])
        else:
            seq = pos[k * np.arange(T + 1), i] if S >= k * T else None
        rob.append(None if seq is None else robustness_exact(spec.formula, seq))
    finished = all(r is not None and r >= 0 for r in rob)

    completion = np.where(arrivals[:, T] >= 0, arrivals[:, T], S)
    safe, dmin = safety_check(traj, completion, env_cfg)
    success = finished and safe
    ttr = int(completion.max()) if success else None
    return EpisodeMetrics(finished, safe, success, ttr, planning_time, int(fallbacks), rob, dmin)


def safety_check(traj: Trajectory, completion: np.ndarray, env_cfg: EnvConfig) -> tuple[bool, float]:
    """(safe, smallest judged pair distance)."""
    two_r = 2 * env_cfg.agent_radius
    S, N = traj.n_steps, traj.n_agents
    t = np.arange(S + 1)
    dmin = math.inf
    safe = True
    if N >= 2:
        d = pairwise_distances(traj.states)  # (S+1, N, N)
        horizon = np.minimum(completion[:, None], completion[None, :])
        active = (t[:, None, None] <= horizon[None]) & ~np.eye(N, dtype=bool)[None]
        if active.any():
            dmin = float(d[active].min())
            safe = dmin >= two_r
    if env_cfg.obstacles and env_cfg.n_rays > 0:
        scans = lidar_scan(traj.states, env_cfg).min(axis=-1)  # (S+1, N)
        active = t[:, None] <= completion[None, :]
        if np.any(scans[active] < two_r):
            safe = False
    return safe, dmin


# -- baselines -------------------------------------------------------------------


def gradient_plan(
    init_states: np.ndarray,
    spec: SpecConfig,
    rng: np.random.Generator,
    iters: int = 300,
    lr: float = 0.05,
    temp: float = 10.0,
    smooth_weight: float = 0.01,
    noise: float = 0.1,
) -> np.ndarray:
    """Per-agent waypoints by Adam ascent on smooth robustness (no learned model).

    Waypoints start at the agent's position plus seeded noise; a small
    penalty on consecutive-waypoint jumps keeps plans compact.
    """
    p0 = np.asarray(init_states, dtype=np.float64)[:, :2]
    N, T = p0.shape[0], spec.plan_length
    G = p0[:, None, :] + noise * rng.standard_normal((N, T + 1, 2))
    state = ad.AdamState()
    for _ in range(iters):
        tape = ad.Tape()
        leaf = tape.leaf(G.reshape(N, -1), name="g")
        goals = [ad.slice(leaf, cols=np.s_[2 * t : 2 * t + 2]) for t in range(T + 1)]
        rho = robustness_smooth(spec.formula, goals, 0, temp=temp)
        jumps = [goals[t + 1] - goals[t] for t in range(T)]
        reg = ad.sum(ad.concat([j * j for j in jumps], axis=1))
        loss = ad.scale(ad.sum(rho), -1.0) + ad.scale(reg, smooth_weight)
        tape.backward(loss)
        new, state = ad.adam_step({"g": leaf.value}, {"g": tape.grad(leaf)}, state, lr=lr)
        G = new["g"].reshape(N, T + 1, 2)
    return G


# -- experiments -----------------------------------------------------------------


@dataclass
class EpisodeRun:
    seed: int
    init: np.ndarray
    plan: np.ndarray
    planning_time: float


def _plan_episodes(planner, env_cfg, spec, N, seeds, base_seed):
    runs = []
    for s in range(seeds):
        rng = np.random.default_rng(base_seed + s)
        init = sample_initial_states(N, env_cfg, rng)
        t0 = time.perf_counter()
        if isinstance(planner, PlannerParams):
            g = plan(planner, init, env_cfg, spec)
        elif planner == "nominal":
            g = gradient_plan(init, spec, rng)
        else:
            raise ValueError(f"unknown planner {planner!r}")
        runs.append(EpisodeRun(base_seed + s, init, g, time.perf_counter() - t0))
    return runs


def planner_label(planner) -> str:
    if isinstance(planner, PlannerParams):
        return planner.config.mode
    return str(planner)


def run_experiment(
    planner,
    env_cfg: EnvConfig,
    spec: SpecConfig,
    N: int,
    seeds: int,
    ctrl: ControllerConfig | None = None,
    base_seed: int = 10_000,
    traj_dir: str | Path | None = None,
    label: str | None = None,
) -> tuple[dict | None, list[dict]]:
    """Run ``seeds`` seeded episodes; returns (aggregate row or None, episode records).

    ``planner`` is a :class:`PlannerParams` or ``"nominal"``. The nominal
    baseline tracks gradient-ascent waypoints without the safety filter
    unless ``ctrl`` says otherwise.
    """
    label = label or planner_label(planner)
    if ctrl is None:
        ctrl = ControllerConfig(use_cbf=planner != "nominal")
    if seeds <= 0:
        return None, []
    runs = _plan_episodes(planner, env_cfg, spec, N, seeds, base_seed)
    res = rollout(np.stack([r.plan for r in runs]), np.stack([r.init for r in runs]), env_cfg, spec, ctrl)
    records = []
    for b, run in enumerate(runs):
        traj = res.trajectory(b)
        m = judge_episode(traj, res.arrivals[b], spec, env_cfg,
                          planning_time=run.planning_time, fallbacks=int(res.fallbacks[b]))
        rec = {"planner": label, "spec": spec.name, "env": env_cfg.env_kind, "N": N, "seed": run.seed,
               **m.to_dict(),
               "arrivals": res.arrivals[b].tolist(), "advances": res.advances[b].tolist()}
        if traj_dir is not None:
            path = Path(traj_dir) / f"{label}_{spec.name}_N{N}_seed{run.seed}.jsonl"
            save_trajectory(path, traj, env_cfg, spec.name, episode_header(res, b, run.plan, ctrl))
            rec["trajectory_file"] = str(path)
        records.append(rec)
    return aggregate(records), records


def episode_header(res: RolloutResult, b: int, goals: np.ndarray, ctrl: ControllerConfig) -> dict:
    return {
        "arrivals": res.arrivals[b].tolist(),
        "advances": res.advances[b].tolist(),
        "plan": np.asarray(goals).tolist(),
        "r_goal": ctrl.r_goal,
        "controller": ctrl.to_dict(),
    }


def aggregate(records: list[dict]) -> dict | None:
    """Table row from per-episode records (a pure function of them)."""
    if not records:
        return None
    n = len(records)
    first = records[0]
    succ = [r for r in records if r["success"]]
    return {
        "planner": first["planner"],
        "spec": first["spec"],
        "env": first["env"],
        "N": first["N"],
        "seeds": n,
        "plan_time_s": float(np.mean([r["planning_time"] for r in records])),
        "finish_pct": 100.0 * sum(r["finished"] for r in records) / n,
        "safety_pct": 100.0 * sum(r["safe"] for r in records) / n,
        "success_pct": 100.0 * len(succ) / n,
        "ttr_steps": float(np.mean([r["ttr"] for r in succ])) if succ else None,
    }


def results_csv(rows: list[dict | None]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    w.writeheader()
    for row in rows:
        if row is not None:
            w.writerow({k: ("" if row[k] is None else row[k]) for k in CSV_HEADER})
    return buf.getvalue()


def write_results(out_dir: str | Path, rows: list[dict | None], records: list[dict]) -> tuple[Path, Path]:
    out = Path(out_dir)
    table = atomic_write_text(out / "results.csv", results_csv(rows))
    eps = atomic_write_text(out / "episodes.jsonl", dumps_jsonl(records))
    return table, eps


# -- post-hoc audit --------------------------------------------------------------


def audit_trajectory_file(path, spec: SpecConfig) -> list[str]:
    """Check replay and the waypoint-advancement rule on a saved episode.

    Returns a list of problems (empty when the file is consistent).
    """
    traj, cfg, header = load_trajectory(path)
    problems = []
    if cfg is None:
        return ["header lacks env config"]
    if traj.actions.shape[0] == traj.n_steps:
        if not np.array_equal(replay(traj, cfg), traj.states):
            problems.append("replay does not reproduce stored states")
    else:
        problems.append("actions missing; cannot replay")
    if "arrivals" not in header:
        return problems
    arr = np.asarray(header["arrivals"])
    adv = np.asarray(header["advances"])
    goals = np.asarray(header["plan"])
    rg = header.get("r_goal", 0.3)
    k, T = spec.sample_interval, spec.plan_length
    pos = traj.positions
    for i in range(arr.shape[0]):
        reached = arr[i][arr[i] >= 0]
        if np.any(np.diff(reached) <= 0):
            problems.append(f"agent {i}: arrival steps not strictly increasing")
        for w in range(T + 1):
            if arr[i, w] >= 0:
                if np.linalg.norm(pos[arr[i, w], i] - goals[i, w]) > rg:
                    problems.append(f"agent {i}: arrival at waypoint {w} outside r_goal")
                if arr[i, w] < k * w:
                    problems.append(f"agent {i}: waypoint {w} reached before k*{w}")
            if w >= 1 and adv[i, w] >= 0:
                t = adv[i, w]
                if t < k * w:
                    problems.append(f"agent {i}: advanced to {w} at {t} < k*{w}")
                if np.linalg.norm(pos[t, i] - goals[i, w - 1]) > rg:
                    problems.append(f"agent {i}: advanced to {w} while outside r_goal of {w - 1}")
                if arr[i, w - 1] < 0 or arr[i, w - 1] > t:
                    problems.append(f"agent {i}: advanced to {w} before reaching {w - 1}")
            if w >= 1 and arr[i, w] >= 0 and (adv[i, w] < 0 or adv[i, w] > arr[i, w]):
                problems.append(f"agent {i}: reached {w} before switching to it")
    return problems
