"""GNN-ODE waypoint planner and its GNN-free ablation."""

from __future__ import annotations

import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .env import EnvConfig
from .graph import build_graph
from .io import atomic_write_bytes, content_hash
from .stl.formula import SpecConfig

MODES = ("gnn_ode", "ode_only")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    mode: str = "gnn_ode"
    layers: int = 2
    hidden: int = 64
    edge_dim: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("layers and hidden must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def shape_table(cfg: PlannerConfig) -> dict[str, tuple[int, int]]:
    H = cfg.hidden
    shapes: dict[str, tuple[int, int]] = {}
    if cfg.mode == "gnn_ode":
        h_in = 3
        for l in range(cfg.layers):
            shapes[f"edge{l}_W"] = (2 * h_in + cfg.edge_dim, H)
            shapes[f"edge{l}_b"] = (1, H)
            shapes[f"node{l}_W"] = (h_in + H, H)
            shapes[f"node{l}_b"] = (1, H)
            h_in = H
        shapes["readout1_W"] = (H + 2, H)
    else:
        shapes["readout1_W"] = (2, H)
    shapes["readout1_b"] = (1, H)
    shapes["readout2_W"] = (H, 2)
    shapes["readout2_b"] = (1, 2)
    shapes["ode1_W"] = (2, H)
    shapes["ode1_b"] = (1, H)
    shapes["ode2_W"] = (H, 2)
    shapes["ode2_b"] = (1, 2)
    return shapes


@dataclass
class PlannerParams:
    config: PlannerConfig
    arrays: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: PlannerConfig, seed: int | None = None) -> "PlannerParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
        rng = np.random.default_rng(config.seed if seed is None else seed)
        arrays = {}
        shapes = shape_table(config)
        for name, shp in shapes.items():
            fan_in = shapes[name.replace("_b", "_W")][0]
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shp)
        return cls(config, arrays)

    def copy(self) -> "PlannerParams":
        return PlannerParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def check(self) -> None:
        want = shape_table(self.config)
        if set(want) != set(self.arrays):
            missing = sorted(set(want) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(want))
            raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for k, shp in want.items():
            if self.arrays[k].shape != shp:
                raise CheckpointError(f"{k}: expected shape {shp}, got {self.arrays[k].shape}")
            if not np.all(np.isfinite(self.arrays[k])):
                raise CheckpointError(f"{k}: non-finite entries")

    def config_hash(self) -> str:
        return content_hash(self.config.to_dict())


def save_checkpoint(path, params: PlannerParams, extra: dict | None = None):
    meta = {"config": params.config.to_dict(), "config_hash": params.config_hash(),
            "shapes": {k: list(v.shape) for k, v in params.arrays.items()}}
    if extra:
        meta["extra"] = extra
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **params.arrays)
    return atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> tuple[PlannerParams, dict]:
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from exc
    with data:
        if "__meta__" not in data.files:
            raise CheckpointError(f"{path}: missing metadata")
        meta = json.loads(str(data["__meta__"]))
        arrays = {k: data[k].astype(np.float64) for k in data.files if k != "__meta__"}
    cfg = PlannerConfig(**meta["config"])
    if content_hash(cfg.to_dict()) != meta.get("config_hash"):
        raise CheckpointError(f"{path}: config hash mismatch")
    for k, shp in meta.get("shapes", {}).items():
        if k not in arrays or list(arrays[k].shape) != shp:
            raise CheckpointError(f"{path}: shape table mismatch for {k}")
    params = PlannerParams(cfg, arrays)
    params.check()
    return params, meta.get("extra", {})


def _dense(x: ad.Var, W: ad.Var, b: ad.Var, act=True) -> ad.Var:
    y = x @ W + b
    return ad.relu(y) if act else y


def encode(P: dict, states: np.ndarray, env_cfg: EnvConfig, cfg: PlannerConfig, tape: ad.Tape) -> ad.Var:
    """Message passing over the initial graph; returns agent embeddings (N, H)."""
    g = build_graph(states, env_cfg, include_lidar=True)
    src, dst, mean = g.incidence()
    h = tape.const(g.node_features)
    if g.n_edges:
        S, D, Mn = tape.const(src), tape.const(dst), tape.const(mean)
        e = tape.const(g.edge_features)
    for l in range(cfg.layers):
        if g.n_edges:
            msg_in = ad.concat([S @ h, D @ h, e], axis=1)
            msg = _dense(msg_in, P[f"edge{l}_W"], P[f"edge{l}_b"])
            agg = Mn @ msg
        else:
            agg = tape.const(np.zeros((g.n_nodes, cfg.hidden)))
        h = _dense(ad.concat([h, agg], axis=1), P[f"node{l}_W"], P[f"node{l}_b"])
    # agents occupy the first N node slots
    return ad.slice(h, rows=np.s_[: g.agent_index.size])


def plan_on_tape(
    P: dict,
    states: np.ndarray,
    env_cfg: EnvConfig,
    T: int,
    cfg: PlannerConfig,
    tape: ad.Tape,
) -> list[ad.Var]:
    """Goal sequence [g^0, ..., g^T] as Vars of shape (rows, 2).

    ``states`` is (N, d) for one scenario or (B, N, d) for a batch; batch
    scenarios are encoded separately and stacked scenario-major.
    """
    s = np.asarray(states, dtype=np.float64)
    if s.ndim == 2:
        s = s[None]
    pos = tape.const(s[:, :, :2].reshape(-1, 2))
    if cfg.mode == "gnn_ode":
        hs = [encode(P, sc, env_cfg, cfg, tape) for sc in s]
        h = hs[0] if len(hs) == 1 else ad.concat(hs, axis=0)
        feat = ad.concat([h, pos], axis=1)
    else:
        feat = pos
    z = _dense(feat, P["readout1_W"], P["readout1_b"])
    g = pos + _dense(z, P["readout2_W"], P["readout2_b"], act=False)
    goals = [g]
    for _ in range(T):
        z = _dense(g, P["ode1_W"], P["ode1_b"])
        g = g + _dense(z, P["ode2_W"], P["ode2_b"], act=False)
        goals.append(g)
    return goals


def plan(
    params: PlannerParams,
    states: np.ndarray,
    env_cfg: EnvConfig,
    spec: SpecConfig | int,
) -> np.ndarray:
    """Goal plan (N, T+1, 2), or (B, N, T+1, 2) for batched states."""
    T = spec if isinstance(spec, int) else spec.plan_length
    s = np.asarray(states, dtype=np.float64)
    tape = ad.Tape()
    P = {k: tape.const(v) for k, v in params.arrays.items()}
    goals = plan_on_tape(P, s, env_cfg, T, params.config, tape)
    out = np.stack([g.value for g in goals], axis=1)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("planner produced non-finite goals")
    if s.ndim == 3:
        return out.reshape(s.shape[0], s.shape[1], T + 1, 2)
    return out


def inference_time(
    params: PlannerParams,
    states: np.ndarray,
    env_cfg: EnvConfig,
    spec: SpecConfig | int,
    repetitions: int = 10,
) -> float:
    """Mean wall-clock seconds per plan."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    plan(params, states, env_cfg, spec)  # warm-up
    t0 = time.perf_counter()
    for _ in range(repetitions):
        plan(params, states, env_cfg, spec)
    return (time.perf_counter() - t0) / repetitions
