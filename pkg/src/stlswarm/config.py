"""Run configuration: loading, validation, resolution and hashing."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .env import EnvConfig
from .io import atomic_write_text, content_hash
from .planner import PlannerConfig
from .safety import CbfConfig, ControllerConfig, Gains
from .stl.formula import RegionPredicate, SpecConfig
from .stl.specs import REGIONS, builtin_spec, custom_spec
from .train import LossConfig

SEED_ENV = "STLSWARM_SEED"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class SpecBlock:
    name: str | None = "cover"
    formula: str | None = None
    regions: dict | None = None
    T: int | None = None
    k: int | None = None

    def build(self) -> SpecConfig:
        if self.formula is None:
            base = builtin_spec(self.name)
            if self.T is None and self.k is None:
                return base
            return SpecConfig(base.name, base.formula, self.T or base.T, self.k or base.k, base.regions)
        if self.T is None or self.k is None:
            raise ValueError("inline formulas need T and k")
        return custom_spec(self.formula, region_table(self.regions), self.T, self.k, self.name or "custom")


def region_table(spec: dict | None) -> dict:
    if not spec:
        return dict(REGIONS)
    table = dict(REGIONS)
    for name, r in spec.items():
        table[name] = RegionPredicate(tuple(r["center"]), float(r.get("radius", 1.0)), name)
    return table


@dataclass
class EvalBlock:
    N: int = 4
    seeds: int = 30
    base_seed: int | None = None
    judge: str = "visited"


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    env: dict = field(default_factory=dict)
    spec: dict = field(default_factory=dict)
    planner: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    controller: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    # resolved objects, filled by resolve()
    def resolve(self) -> "Resolved":
        problems: list[str] = []

        def make(block: str, cls, data: dict, **forced):
            allowed = {f.name for f in dataclasses.fields(cls)}
            for key in data:
                if key not in allowed:
                    problems.append(f"{block}.{key}: unknown key")
            kwargs = {k: v for k, v in data.items() if k in allowed}
            kwargs.update(forced)
            try:
                return cls(**kwargs)
            except (TypeError, ValueError, KeyError) as exc:
                problems.append(f"{block}: {exc}")
                return None

        env_data = dict(self.env)
        if "obstacles" in env_data:
            env_data["obstacles"] = tuple(tuple(o) for o in env_data["obstacles"])
        env = make("env", EnvConfig, env_data)
        spec_block = make("spec", SpecBlock, self.spec)
        spec = None
        if spec_block is not None:
            try:
                spec = spec_block.build()
            except (ValueError, KeyError) as exc:
                problems.append(f"spec: {exc}")
        pdata = dict(self.planner)
        checkpoint = pdata.pop("checkpoint", None)
        pl = make("planner", PlannerConfig, pdata,
                  seed=pdata.get("seed", self.seed),
                  edge_dim=pdata.get("edge_dim", env.edge_dim if env else 2))
        loss = make("loss", LossConfig, self.loss, seed=self.seed)
        cdata = dict(self.controller)
        gains = make("controller.gains", Gains, cdata.pop("gains", {}))
        cbf = make("controller.cbf", CbfConfig, cdata.pop("cbf", {}))
        ctrl = None
        if gains is not None and cbf is not None:
            ctrl = make("controller", ControllerConfig, cdata, gains=gains, cbf=cbf)
        ev = make("eval", EvalBlock, self.eval)
        if ev is not None and ev.seeds < 0:
            problems.append("eval.seeds: must be >= 0")
        if ev is not None and ev.N < 1:
            problems.append("eval.N: must be >= 1")
        if problems:
            raise ConfigError(problems)
        if ev.base_seed is None:
            ev.base_seed = 10_000 + self.seed
        return Resolved(self, env, spec, pl, checkpoint, loss, ctrl, ev)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Resolved:
    raw: RunConfig
    env: EnvConfig
    spec: SpecConfig
    planner: PlannerConfig
    checkpoint: str | None
    loss: LossConfig
    controller: ControllerConfig
    eval: EvalBlock

    def to_dict(self) -> dict:
        return {
            "seed": self.raw.seed,
            "output_dir": self.raw.output_dir,
            "env": self.env.to_dict(),
            "spec": {k: v for k, v in self.raw.spec.items()} | {
                "name": self.spec.name, "T": self.spec.T, "k": self.spec.k,
                "T_h": self.spec.eval_horizon,
            },
            "planner": self.planner.to_dict() | ({"checkpoint": self.checkpoint} if self.checkpoint else {}),
            "loss": self.loss.to_dict(),
            "controller": self.controller.to_dict(),
            "eval": dataclasses.asdict(self.eval),
        }

    def write(self, out_dir: str | Path) -> tuple[Path, str]:
        """Write the resolved config (sorted JSON) and its sha256 next to outputs."""
        d = self.to_dict()
        h = content_hash(d)
        path = atomic_write_text(Path(out_dir) / "config.resolved.json",
                                 json.dumps({"config": d, "sha256": h}, indent=2, sort_keys=True) + "\n")
        return path, h


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML or JSON config (JSON is valid YAML). ``STLSWARM_SEED`` overrides ``seed``."""
    data: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc
        if not isinstance(data, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        # a written resolved config can be fed back in
        if set(data) == {"config", "sha256"}:
            data = data["config"]
            data.get("spec", {}).pop("T_h", None)
    data = dict(data)
    for k, v in (overrides or {}).items():
        data[k] = v
    if os.environ.get(SEED_ENV):
        try:
            data["seed"] = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError([f"{SEED_ENV}: not an integer"]) from exc
    allowed = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = [f"{k}: unknown key" for k in data if k not in allowed]
    if unknown:
        raise ConfigError(unknown)
    for block in ("env", "spec", "planner", "loss", "controller", "eval"):
        if block in data and not isinstance(data[block], dict):
            raise ConfigError([f"{block}: must be a mapping"])
    return RunConfig(**data)
