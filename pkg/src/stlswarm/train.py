"""End-to-end planner training on smooth STL robustness plus an achievability term."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .env import EnvConfig, sample_initial_states
from .io import dumps_jsonl, atomic_write_text
from .planner import PlannerConfig, PlannerParams, plan_on_tape, save_checkpoint
from .safety import ControllerConfig, rollout_fixed_rate
from .stl.formula import SpecConfig
from .stl.robustness import DEFAULT_TEMP, robustness_smooth

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, last_good: str | None):
        super().__init__(f"non-finite loss at epoch {epoch}; last good checkpoint: {last_good}")
        self.epoch = epoch
        self.last_good = last_good


@dataclass(frozen=True)
class LossConfig:
    lambda_stl: float = 1.0
    lambda_ach: float = 0.1
    temp: float = DEFAULT_TEMP
    achievability_eps: float = 0.3
    batch_size: int = 8
    epochs: int = 200
    lr: float = 1e-3
    seed: int = 0
    n_agents: int = 4
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.lambda_stl < 0 or self.lambda_ach < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.lambda_stl + self.lambda_ach > 0:
            raise ValueError("lambda_stl + lambda_ach must be positive")
        if not self.temp > 0:
            raise ValueError("temp must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.n_agents < 1:
            raise ValueError("batch_size, n_agents must be >= 1 and epochs >= 0")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def achievability_gap(positions: np.ndarray, goals: np.ndarray, k: int) -> float:
    """Sum over agents and t = 0..T of |p(k t) - g^t|_2.

    ``positions`` is (steps+1, N, 2) at the simulation rate, ``goals`` is (N, T+1, 2).
    """
    pos = np.asarray(positions, dtype=np.float64)
    g = np.asarray(goals, dtype=np.float64)
    if g.ndim == 2:
        g = g[None]
    if pos.ndim == 2:
        pos = pos[:, None, :]
    T = g.shape[1] - 1
    if pos.shape[0] < k * T + 1:
        raise ValueError(f"horizon: trajectory has {pos.shape[0]} steps, need {k * T + 1}")
    sampled = pos[k * np.arange(T + 1)][..., :2]  # (T+1, N, 2)
    return float(np.linalg.norm(sampled - np.swapaxes(g, 0, 1), axis=-1).sum())


def planner_loss(
    goals: list[ad.Var],
    samples: np.ndarray,
    spec: SpecConfig,
    loss_cfg: LossConfig,
    n_scenarios: int = 1,
) -> tuple[ad.Var, float, float]:
    """Batch-mean of sum_i [-l_stl * rho_i + l_ach * d_i].

    ``samples`` holds executed positions at t = 0, k, ..., kT with shape
    (T+1, rows, 2); they enter as constants. Returns (loss, stl, ach) where
    the last two are the unweighted batch-mean components.
    """
    tape = goals[0].tape
    rho = robustness_smooth(spec.formula, goals, 0, temp=loss_cfg.temp)
    stl = ad.scale(ad.sum(rho), -1.0 / n_scenarios)
    gaps = [ad.l2_norm(g - tape.const(samples[t][:, :2]), axis=1) for t, g in enumerate(goals)]
    ach = ad.scale(ad.sum(ad.concat(gaps, axis=1)), 1.0 / n_scenarios)
    loss = ad.scale(stl, loss_cfg.lambda_stl) + ad.scale(ach, loss_cfg.lambda_ach)
    return loss, float(stl.value[0, 0]), float(ach.value[0, 0])


@dataclass
class TrainResult:
    params: PlannerParams
    curve: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def train_step(
    params: PlannerParams,
    adam: ad.AdamState | None,
    init: np.ndarray,
    env_cfg: EnvConfig,
    spec: SpecConfig,
    loss_cfg: LossConfig,
    ctrl: ControllerConfig,
):
    """One optimizer step on a batch of initial states (B, N, d)."""
    tape = ad.Tape()
    leaves = ad.leaves_from(tape, params.arrays)
    B, N = init.shape[:2]
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            goals = plan_on_tape(leaves, init, env_cfg, spec.plan_length, params.config, tape)
            plan_np = np.stack([g.value for g in goals], axis=1).reshape(B, N, -1, 2)
            samples = rollout_fixed_rate(plan_np, init, env_cfg, spec, ctrl).reshape(plan_np.shape[2], B * N, -1)
            loss, stl, ach = planner_loss(goals, samples, spec, loss_cfg, B)
    except FloatingPointError:  # includes NonFiniteError from the simulator
        nan = float("nan")
        return None, adam, {"loss": nan, "stl": nan, "ach": nan}
    lv = float(loss.value[0, 0])
    if not np.isfinite(lv):
        return None, adam, {"loss": lv, "stl": stl, "ach": ach}
    tape.backward(loss)
    grads = ad.grads_by_name(tape, leaves)
    new, adam = ad.adam_step(params.arrays, grads, adam or ad.AdamState(), lr=loss_cfg.lr)
    return PlannerParams(params.config, new), adam, {"loss": lv, "stl": stl, "ach": ach}


def train(
    env_cfg: EnvConfig,
    spec: SpecConfig,
    loss_cfg: LossConfig = LossConfig(),
    planner_cfg: PlannerConfig | None = None,
    ctrl: ControllerConfig = ControllerConfig(),
    out_dir: str | Path | None = None,
    params: PlannerParams | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train a planner; deterministic given ``loss_cfg.seed``.

    With ``out_dir`` the loss curve (``curve.jsonl``) and checkpoints
    (``ckpt_XXXX.npz`` and ``final.npz``) are written there.
    """
    if planner_cfg is None:
        planner_cfg = PlannerConfig(edge_dim=env_cfg.edge_dim, seed=loss_cfg.seed)
    if planner_cfg.edge_dim != env_cfg.edge_dim and planner_cfg.mode == "gnn_ode":
        raise ValueError(f"planner edge_dim {planner_cfg.edge_dim} != env edge_dim {env_cfg.edge_dim}")
    params = params or PlannerParams.init(planner_cfg)
    rng = np.random.default_rng(loss_cfg.seed + 1)
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(params)
    adam = None
    last_good = None

    def checkpoint(name: str, p: PlannerParams, epoch: int):
        nonlocal last_good
        if out is None:
            return
        path = save_checkpoint(out / name, p, {"epoch": epoch, "spec": spec.name, "env": env_cfg.to_dict()})
        last_good = str(path)
        result.checkpoints.append(last_good)

    for epoch in range(loss_cfg.epochs):
        init = np.stack(
            [sample_initial_states(loss_cfg.n_agents, env_cfg, rng) for _ in range(loss_cfg.batch_size)]
        )
        new, adam, rec = train_step(params, adam, init, env_cfg, spec, loss_cfg, ctrl)
        rec = {"epoch": epoch, **rec}
        result.curve.append(rec)
        if out is not None:
            atomic_write_text(out / "curve.jsonl", dumps_jsonl(result.curve))
        if new is None or not all(np.all(np.isfinite(v)) for v in new.arrays.values()):
            log.error("diverged at epoch %d", epoch)
            raise DivergenceError(epoch, last_good)
        params = new
        result.params = params
        if on_epoch:
            on_epoch(rec)
        if loss_cfg.checkpoint_every and (epoch + 1) % loss_cfg.checkpoint_every == 0:
            checkpoint(f"ckpt_{epoch + 1:04d}.npz", params, epoch + 1)
    checkpoint("final.npz", params, loss_cfg.epochs)
    return result
