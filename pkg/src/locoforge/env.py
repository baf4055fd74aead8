"""Hopping / bounding episodes on the planar model.

Stage 1 starts every episode on a random demo frame and rewards tracking the
demo from there on. Stage 2 starts from a wide box of states, randomizes the
ground height and friction per episode and uses the time-free task reward.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import rewards
from .control import PDGains
from .demo import DemoTrajectory, sample_demo_point
from .dynamics import (NQ, ContactReport, GroundModel, PlanarModel, RobotState, SimulationError,
                       control_interval, foot_kinematics, lowest_body_point, standing_state)
from .rewards import RewardWeights, StepContext

OBS_DIM = {"hopping": 10, "bounding": 12}
DEFAULT_TILT = {"hopping": 0.5, "bounding": 1.2}
TILT_MARGIN = 0.3


@dataclass(frozen=True)
class EnvConfig:
    task: str = "hopping"
    stage: int = 1
    control_dt: float = 0.01
    substeps: int = 10
    max_steps: int = 500
    tilt_limit: float | None = None          # None -> per-task default
    init_height_range: tuple[float, float] = (-0.05, 0.25)   # relative to standing height
    init_tilt: float | None = None           # None -> tilt_limit - 0.3
    init_joint_noise: float = 0.3
    ground_height_range: tuple[float, float] = (-0.05, 0.05)
    friction_range: tuple[float, float] = (0.5, 1.0)
    nominal_friction: float = 1.0
    seed: int = 0
    state_bound: float = 1e6

    def __post_init__(self):
        if self.task not in OBS_DIM:
            raise ValueError(f"unknown task {self.task!r}")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        for name in ("init_height_range", "ground_height_range", "friction_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must satisfy lo <= hi")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not (self.control_dt > 0 and self.substeps >= 1 and self.max_steps >= 1):
            raise ValueError("control_dt, substeps and max_steps must be positive")
        if self.tilt_limit is None:
            object.__setattr__(self, "tilt_limit", DEFAULT_TILT[self.task])
        if self.init_tilt is None:
            object.__setattr__(self, "init_tilt", max(0.0, self.tilt_limit - TILT_MARGIN))

    @property
    def physics_dt(self) -> float:
        return self.control_dt / self.substeps

    @property
    def obs_dim(self) -> int:
        return OBS_DIM[self.task]


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool
    info: dict = field(default_factory=dict)


class EpisodeOver(RuntimeError):
    pass


class ObservationMap:
    """Fixed affine normalisation of the observation channels."""

    def __init__(self, task: str, nominal_joints):
        self.task = task
        off = [0.25, 0.0, *nominal_joints, 0.0, 0.0, 0.0, 0.0]
        scale = [0.1, 1.0, 1.0, 1.0, 1.0, 1.0, 10.0, 10.0, 10.0, 10.0]
        if task == "bounding":
            off += [0.0, 0.0]
            scale += [0.5, 3.0]
        self.offset = np.array(off)
        self.scale = np.array(scale)

    def raw(self, state: RobotState) -> np.ndarray:
        q, v = state.q, state.v
        parts = [q[1:2], v[1:2], q[3:], v[3:]]
        if self.task == "bounding":
            parts += [q[2:3], v[2:3]]
        return np.concatenate(parts)

    def __call__(self, state: RobotState) -> np.ndarray:
        return (self.raw(state) - self.offset) / self.scale

    def unnormalize(self, obs) -> np.ndarray:
        return np.asarray(obs) * self.scale + self.offset


class LocomotionEnv:
    def __init__(self, config: EnvConfig, demo: DemoTrajectory, model: PlanarModel | None = None,
                 gains: PDGains | None = None, weights: RewardWeights | None = None,
                 ground: GroundModel | None = None, instance: int = 0):
        self.config = config
        self.demo = demo
        self.model = model or PlanarModel()
        self.gains = gains or PDGains()
        self.weights = weights or RewardWeights()
        self.base_ground = ground or GroundModel()
        self.rng = np.random.default_rng(config.seed + instance)
        self.obs_map = ObservationMap(config.task, demo.mean_posture())
        self.action_low = np.array(self.model.joint_lower)
        self.action_high = np.array(self.model.joint_upper)
        self.term_names = rewards.term_names(config.stage, config.task)
        self._mp = self.model.packed()
        self._kp = self.gains.kp_array
        self._kd = self.gains.kd_array
        self.state: RobotState | None = None
        self.ground = self.base_ground
        self.steps = 0
        self.done = True

    # -- episode control -------------------------------------------------

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = rng if rng is not None else self.rng
        cfg = self.config
        if cfg.stage == 1:
            self.ground = replace(self.base_ground, height=0.0, friction_coeff=cfg.nominal_friction)
            self.start_frame, state = sample_demo_point(self.demo, rng)
        else:
            self.ground = replace(self.base_ground,
                                  height=float(rng.uniform(*cfg.ground_height_range)),
                                  friction_coeff=float(rng.uniform(*cfg.friction_range)))
            self.start_frame = None
            state = self._sample_wide_state(rng)
        self._begin(state)
        return self.observe()

    def reset_to(self, state: RobotState, ground: GroundModel | None = None,
                 start_frame: int | None = None) -> np.ndarray:
        """Start an episode from an explicit state (evaluation protocols)."""
        self.ground = ground or replace(self.base_ground, friction_coeff=self.config.nominal_friction)
        self.start_frame = start_frame
        if self.config.stage == 1 and start_frame is None:
            self.start_frame = 0
        self._begin(replace(state, t=0.0))
        return self.observe()

    def _begin(self, state: RobotState):
        self.state = state
        self.steps = 0
        self.prev_torque = None
        self.done = False

    def _sample_wide_state(self, rng):
        cfg = self.config
        mean_joints = self.demo.mean_posture()
        stand = self.standing_height(mean_joints)
        for _ in range(1000):
            joints = mean_joints + rng.uniform(-cfg.init_joint_noise, cfg.init_joint_noise, 4)
            joints = np.clip(joints, self.action_low, self.action_high)
            z = self.ground.height + stand + rng.uniform(*cfg.init_height_range)
            pitch = rng.uniform(-cfg.init_tilt, cfg.init_tilt)
            q = np.concatenate([[0.0, z, pitch], joints])
            state = RobotState(q=q, v=np.zeros(NQ))
            feet_ok = all(foot_kinematics(self.model, state, leg)[0][1] > self.ground.height - 0.005
                          for leg in (0, 1))
            if feet_ok and not self.is_failure(state):
                return state
        raise RuntimeError("could not sample a valid initial state")

    def standing_height(self, joints) -> float:
        """Base height above ground with level base and the lower foot touching."""
        q = np.concatenate([[0.0, 0.0, 0.0], joints])
        s = RobotState(q=q, v=np.zeros(NQ))
        return -min(foot_kinematics(self.model, s, leg)[0][1] for leg in (0, 1))

    # -- dynamics ---------------------------------------------------------

    def is_failure(self, state: RobotState) -> bool:
        if abs(state.q[2]) > self.config.tilt_limit:
            return True
        return lowest_body_point(self.model, state.q) < self.ground.height

    def observe(self, state: RobotState | None = None) -> np.ndarray:
        return self.obs_map(state if state is not None else self.state)

    def clip_action(self, action) -> np.ndarray:
        return np.clip(np.asarray(action, dtype=np.float64), self.action_low, self.action_high)

    def step(self, action) -> StepResult:
        if self.done:
            raise EpisodeOver("step() called on a finished episode; call reset()")
        cfg = self.config
        q_des = self.clip_action(action)
        s = self.state
        q, v, anchors, torque, forces, inc, pen, status = control_interval(
            self._mp, self.ground.packed(), s.q, s.v, s.anchors, q_des, self._kp, self._kd,
            self.gains.torque_limit, cfg.physics_dt, cfg.substeps, cfg.state_bound)
        nxt = RobotState(q=q, v=v, t=s.t + cfg.control_dt, anchors=anchors)
        contact = ContactReport(in_contact=inc, force=forces, penetration=pen)
        prev = self.prev_torque if self.prev_torque is not None else torque
        self.steps += 1
        phase = None
        if cfg.stage == 1:
            phase = self.demo.phase_index(self.start_frame, self.steps * cfg.control_dt)
        ctx = StepContext(state=s, next_state=nxt, q_des=q_des, torque=torque, prev_torque=prev,
                          contact=contact, demo=self.demo, phase=phase)
        blew_up = status != 0 or not np.all(np.isfinite(q))
        if blew_up:
            terms = {k: 0.0 for k in self.term_names}
        else:
            terms = rewards.breakdown(ctx, self.weights, cfg.stage, cfg.task)
        reward = rewards.total(terms)
        terminated = blew_up or self.is_failure(nxt)
        truncated = (not terminated) and self.steps >= cfg.max_steps
        info = dict(terms=terms, contact=contact, torque=torque, prev_torque=prev, q_des=q_des,
                    phase=phase, state=s, blew_up=blew_up)
        self.state = nxt
        self.prev_torque = torque
        self.done = terminated or truncated
        obs = self.observe() if not blew_up else np.zeros(cfg.obs_dim)
        return StepResult(obs, reward, terminated, truncated, info)


# ---------------------------------------------------------------------------
# traces


def trace_columns(term_names) -> list[str]:
    cols = ["step", "t", "phase", "ground_height", "friction"]
    cols += [f"q{i}" for i in range(NQ)] + [f"v{i}" for i in range(NQ)]
    cols += [f"nq{i}" for i in range(NQ)] + [f"nv{i}" for i in range(NQ)]
    cols += [f"qdes{j}" for j in range(4)] + [f"tau{j}" for j in range(4)]
    cols += [f"ptau{j}" for j in range(4)]
    cols += ["contact_f", "contact_b", "fx_f", "fz_f", "fx_b", "fz_b"]
    cols += list(term_names) + ["reward", "terminated", "truncated"]
    return cols


def trace_row(env: LocomotionEnv, res: StepResult) -> dict:
    info = res.info
    s, n = info["state"], env.state
    row = {"step": env.steps, "t": n.t, "phase": -1 if info["phase"] is None else info["phase"],
           "ground_height": env.ground.height, "friction": env.ground.friction_coeff}
    for i in range(NQ):
        row[f"q{i}"] = s.q[i]
        row[f"v{i}"] = s.v[i]
        row[f"nq{i}"] = n.q[i]
        row[f"nv{i}"] = n.v[i]
    for j in range(4):
        row[f"qdes{j}"] = info["q_des"][j]
        row[f"tau{j}"] = info["torque"][j]
        row[f"ptau{j}"] = info["prev_torque"][j]
    c = info["contact"]
    row["contact_f"], row["contact_b"] = int(c.in_contact[0]), int(c.in_contact[1])
    row["fx_f"], row["fz_f"] = c.force[0]
    row["fx_b"], row["fz_b"] = c.force[1]
    row.update(info["terms"])
    row["reward"] = res.reward
    row["terminated"], row["truncated"] = int(res.terminated), int(res.truncated)
    return row


def write_trace(path, rows, term_names) -> None:
    cols = trace_columns(term_names)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in row.items()})


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def context_from_row(row: dict, demo: DemoTrajectory | None) -> StepContext:
    """Rebuild the reward context of one trace row (the replay oracle input)."""
    q = np.array([row[f"q{i}"] for i in range(NQ)])
    v = np.array([row[f"v{i}"] for i in range(NQ)])
    nq = np.array([row[f"nq{i}"] for i in range(NQ)])
    nv = np.array([row[f"nv{i}"] for i in range(NQ)])
    contact = ContactReport(
        in_contact=np.array([row["contact_f"] > 0.5, row["contact_b"] > 0.5]),
        force=np.array([[row["fx_f"], row["fz_f"]], [row["fx_b"], row["fz_b"]]]),
        penetration=np.zeros(2))
    phase = int(row["phase"])
    return StepContext(
        state=RobotState(q=q, v=v), next_state=RobotState(q=nq, v=nv),
        q_des=np.array([row[f"qdes{j}"] for j in range(4)]),
        torque=np.array([row[f"tau{j}"] for j in range(4)]),
        prev_torque=np.array([row[f"ptau{j}"] for j in range(4)]),
        contact=contact, demo=demo, phase=phase if phase >= 0 else None)


def rollout(env: LocomotionEnv, act_fn, max_steps: int | None = None, record: bool = True):
    """Run one episode from the env's current state with ``act_fn(obs) -> q_des``."""
    rows = []
    obs = env.observe()
    total = 0.0
    res = None
    limit = max_steps or env.config.max_steps
    while not env.done and env.steps < limit:
        res = env.step(act_fn(obs))
        total += res.reward
        if record:
            rows.append(trace_row(env, res))
        obs = res.observation
    return rows, total, res
