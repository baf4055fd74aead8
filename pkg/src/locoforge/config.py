"""Run configuration: one YAML document with a section per module.

    seed: 0
    out_dir: runs/hop1
    model:   {...PlanarModel fields}
    ground:  {...GroundModel fields}
    env:     {...EnvConfig fields}
    gains:   {kp, kd, torque_limit}
    rewards: {...RewardWeights fields}
    ppo:     {...PpoConfig fields}
    demo:    {path: file.csv} or {task, apex, stance_depth, amplitude, hop_height, period, dt}

Missing keys take the dataclass defaults, unknown keys are errors. The
top-level ``seed`` overrides ``env.seed`` and ``ppo.seed``.
"""
from __future__ import annotations

import hashlib
import json
import os
import platform
import subprocess
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .control import PDGains
from .demo import DemoTrajectory, load_demo, synthesize_bound_demo, synthesize_hop_demo
from .dynamics import GroundModel, PlanarModel
from .env import EnvConfig, LocomotionEnv
from .ppo import PpoConfig
from .rewards import RewardWeights

SEED_ENV_VAR = "LOCOFORGE_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DemoSource:
    path: str | None = None
    task: str = "hopping"
    apex: float = 0.35
    stance_depth: float = 0.092
    amplitude: float = 0.25
    hop_height: float = 0.03
    period: float | None = None        # None -> 0.5 s hopping, 0.4 s bounding
    dt: float = 0.01

    def __post_init__(self):
        if self.task not in ("hopping", "bounding"):
            raise ValueError(f"unknown demo task {self.task!r}")

    def build(self, model: PlanarModel, base_dir: Path | None = None) -> DemoTrajectory:
        if self.path is not None:
            p = Path(self.path)
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            return load_demo(p)
        if self.task == "hopping":
            return synthesize_hop_demo(self.apex, self.stance_depth, self.period or 0.5, self.dt, model)
        return synthesize_bound_demo(self.amplitude, self.hop_height, self.period or 0.4, self.dt, model)


_SECTIONS = {
    "model": PlanarModel, "ground": GroundModel, "env": EnvConfig, "gains": PDGains,
    "rewards": RewardWeights, "ppo": PpoConfig, "demo": DemoSource,
}


@dataclass(frozen=True)
class RunConfig:
    model: PlanarModel = field(default_factory=PlanarModel)
    ground: GroundModel = field(default_factory=GroundModel)
    env: EnvConfig = field(default_factory=EnvConfig)
    gains: PDGains = field(default_factory=PDGains)
    rewards: RewardWeights = field(default_factory=RewardWeights)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    demo: DemoSource = field(default_factory=DemoSource)
    out_dir: str = "runs/default"
    seed: int = 0
    base_dir: str | None = field(default=None, compare=False)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=int(seed), env=replace(self.env, seed=int(seed)),
                       ppo=replace(self.ppo, seed=int(seed)))

    def for_stage(self, stage: int, task: str | None = None) -> "RunConfig":
        task = task or self.env.task
        env = replace(self.env, stage=stage, task=task, tilt_limit=None, init_tilt=None) \
            if task != self.env.task else replace(self.env, stage=stage)
        return replace(self, env=env)

    def build_demo(self) -> DemoTrajectory:
        base = Path(self.base_dir) if self.base_dir else None
        return self.demo.build(self.model, base)


def _to_plain(value):
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def to_dict(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed, "out_dir": cfg.out_dir}
    for name in _SECTIONS:
        sec = getattr(cfg, name)
        out[name] = {f.name: _to_plain(getattr(sec, f.name)) for f in fields(sec)}
    return out


def _build_section(name, cls, data):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def from_dict(data: dict, base_dir=None) -> RunConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - set(_SECTIONS) - {"seed", "out_dir"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    secs = {name: _build_section(name, cls, data.get(name)) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(**secs, out_dir=str(data.get("out_dir", "runs/default")),
                    base_dir=None if base_dir is None else str(base_dir))
    seed = data.get("seed")
    if seed is None:
        seed = secs["ppo"].seed
    cfg = cfg.with_seed(int(seed))
    if cfg.demo.path is not None:
        p = Path(cfg.demo.path)
        if not p.is_absolute() and base_dir is not None:
            p = Path(base_dir) / p
        if not p.exists():
            raise ConfigError(f"demo file not found: {p}")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data, base_dir=path.parent)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, default=repr)
    return hashlib.sha256(blob.encode()).hexdigest()


def resolve_seed(cli_seed: int | None, cfg_seed: int) -> int:
    """CLI flag, then ``LOCOFORGE_SEED``, then the config value."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV_VAR)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR}={env!r} is not an integer") from None
    return int(cfg_seed)


def build_id() -> str:
    """Package version plus the git commit of the source tree when available."""
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"locoforge-{__version__}" + (f"+{rev}" if rev else "")


def write_manifest(out_dir, cfg: RunConfig, command: str, extra: dict | None = None) -> Path:
    """``manifest.json`` plus the normalized ``config.yaml`` it hashes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.yaml")
    manifest = dict(command=command, config_hash=config_hash(cfg), seed=cfg.seed, build=build_id(),
                    python=platform.python_version(), numpy=np.__version__, config="config.yaml")
    manifest.update(extra or {})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def build_envs(cfg: RunConfig, demo: DemoTrajectory, stage: int | None = None,
               task: str | None = None, n: int | None = None) -> list[LocomotionEnv]:
    c = cfg.for_stage(stage or cfg.env.stage, task)
    n = n or c.ppo.n_envs
    return [LocomotionEnv(c.env, demo, c.model, c.gains, c.rewards, c.ground, instance=i) for i in range(n)]
