"""Reward terms for demo tracking (stage 1) and task optimisation (stage 2).

All state-dependent terms are evaluated on ``ctx.next_state``, the state the
action produced. In the planar model y, roll and yaw are identically zero, so
their posture terms sit at their maxima and enter as constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .demo import DemoTrajectory, nearest_path_distance
from .dynamics import ContactReport, RobotState


@dataclass(frozen=True)
class RewardWeights:
    k_tt: float = 0.5
    # tracking: (weight, scale) pairs for base pos, base vel, pitch, pitch rate, joints, joint vel
    k_ti1: float = 1.0
    k_ti2: float = 20.0
    k_ti3: float = 0.5
    k_ti4: float = 2.0
    k_ti5: float = 0.5
    k_ti6: float = 20.0
    k_ti7: float = 0.25
    k_ti8: float = 1.0
    k_ti9: float = 2.0
    k_ti10: float = 2.0
    k_ti11: float = 1.0
    k_ti12: float = 0.2
    # hopping task
    k_hp: float = 10.0
    z_base_min: float = 0.32
    z_base_max: float = 0.5
    # posture: x, y, roll, pitch, yaw
    k_ps1: float = 1.0
    k_ps2: float = 10.0
    k_ps3: float = 1.0
    k_ps4: float = 10.0
    k_ps5: float = 1.0
    k_ps6: float = 10.0
    k_ps7: float = 2.0
    k_ps8: float = 10.0
    k_ps9: float = 1.0
    k_ps10: float = 10.0
    # impacts and torque smoothness
    k_ct: float = 0.01
    F_limit_foot: float = 40.0
    k_ts1: float = 0.05
    k_ts2: float = 0.2
    # bounding task
    k_bn: float = 5.0
    k_cc: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if not (math.isfinite(val) and val >= 0):
                raise ValueError(f"RewardWeights.{f.name} must be finite and >= 0, got {val}")
        if not self.z_base_min < self.z_base_max:
            raise ValueError("z_base_min must be < z_base_max")


@dataclass(frozen=True)
class StepContext:
    state: RobotState
    next_state: RobotState
    q_des: np.ndarray
    torque: np.ndarray
    prev_torque: np.ndarray
    contact: ContactReport
    demo: DemoTrajectory | None = None
    phase: int | None = None


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def r_tt(ctx: StepContext, w: RewardWeights) -> float:
    e = np.asarray(ctx.q_des) - ctx.next_state.joints
    return -w.k_tt * float(e @ e)


def r_ti(ctx: StepContext, w: RewardWeights) -> float:
    if ctx.demo is None or ctx.phase is None:
        raise ValueError("tracking reward needs a demo and a phase index")
    ref = ctx.demo.frames[ctx.phase]
    q, v = ctx.next_state.q, ctx.next_state.v
    errs = (
        np.linalg.norm(ref[0:2] - q[0:2]),
        np.linalg.norm(ref[7:9] - v[0:2]),
        abs(wrap_angle(ref[2] - q[2])),
        abs(ref[9] - v[2]),
        np.linalg.norm(ref[3:7] - q[3:7]),
        np.linalg.norm(ref[10:14] - v[3:7]),
    )
    k = [getattr(w, f"k_ti{i}") for i in range(1, 13)]
    return float(sum(k[2 * i] * math.exp(-k[2 * i + 1] * e) for i, e in enumerate(errs)))


def r_hp(ctx: StepContext, w: RewardWeights) -> float:
    z = ctx.next_state.q[1]
    return w.k_hp * z if w.z_base_min < z < w.z_base_max else 0.0


def _posture_terms(ctx, w, with_pitch):
    q = ctx.next_state.q
    x, pitch = q[0], wrap_angle(q[2])
    terms = [w.k_ps1 * math.exp(-w.k_ps2 * x * x),
             w.k_ps3,   # y == 0
             w.k_ps5]   # roll == 0
    if with_pitch:
        terms.append(w.k_ps7 * math.exp(-w.k_ps8 * pitch * pitch))
    terms.append(w.k_ps9)  # yaw == 0
    return terms


def r_ps_hopping(ctx: StepContext, w: RewardWeights) -> float:
    return float(sum(_posture_terms(ctx, w, True)))


def r_ps_bounding(ctx: StepContext, w: RewardWeights) -> float:
    """Posture reward without the pitch term.

    The four bounding terms reuse the hopping weights for x, y, roll and yaw
    (k_ps1/2, k_ps3/4, k_ps5/6, k_ps9/10), so it equals the hopping value
    minus the pitch term.
    """
    return float(sum(_posture_terms(ctx, w, False)))


def foot_force_sum(contact: ContactReport) -> float:
    return float(np.linalg.norm(contact.force, axis=1).sum())


def r_ct(ctx: StepContext, w: RewardWeights) -> float:
    s = foot_force_sum(ctx.contact)
    return -w.k_ct * s if s > w.F_limit_foot else 0.0


def r_ts(ctx: StepContext, w: RewardWeights) -> float:
    d = np.linalg.norm(np.asarray(ctx.torque) - np.asarray(ctx.prev_torque))
    return -w.k_ts1 * math.exp(w.k_ts2 * d)


def r_bn(ctx: StepContext, w: RewardWeights) -> float:
    q = ctx.next_state.q
    return -w.k_bn * nearest_path_distance(ctx.demo, q[1], q[2])


def r_cc(ctx: StepContext, w: RewardWeights) -> float:
    front, back = (bool(c) for c in ctx.contact.in_contact)
    return 0.0 if (front and back) else w.k_cc


STAGE1_TERMS = ("r_ti", "r_tt")
HOPPING_TERMS = ("r_hp", "r_ps", "r_ct", "r_ts", "r_tt")
BOUNDING_TERMS = ("r_bn", "r_cc", "r_ps", "r_ct", "r_ts", "r_tt")
ALL_TERMS = ("r_ti", "r_hp", "r_bn", "r_cc", "r_ps", "r_ct", "r_ts", "r_tt")

_FUNCS = {
    "r_ti": r_ti, "r_tt": r_tt, "r_hp": r_hp, "r_ct": r_ct, "r_ts": r_ts,
    "r_bn": r_bn, "r_cc": r_cc,
}


def term_names(stage: int, task: str) -> tuple[str, ...]:
    if stage == 1:
        return STAGE1_TERMS
    return HOPPING_TERMS if task == "hopping" else BOUNDING_TERMS


def breakdown(ctx: StepContext, w: RewardWeights, stage: int, task: str) -> dict[str, float]:
    out = {}
    for name in term_names(stage, task):
        if name == "r_ps":
            out[name] = r_ps_hopping(ctx, w) if task == "hopping" else r_ps_bounding(ctx, w)
        else:
            out[name] = _FUNCS[name](ctx, w)
    return out


def total(terms: dict[str, float]) -> float:
    s = 0.0
    for v in terms.values():
        s += v
    return s


def stage1_reward(ctx: StepContext, w: RewardWeights) -> float:
    return r_ti(ctx, w) + r_tt(ctx, w)


def stage2_hopping_reward(ctx: StepContext, w: RewardWeights) -> float:
    return r_hp(ctx, w) + r_ps_hopping(ctx, w) + r_ct(ctx, w) + r_ts(ctx, w) + r_tt(ctx, w)


def stage2_bounding_reward(ctx: StepContext, w: RewardWeights) -> float:
    return (r_bn(ctx, w) + r_cc(ctx, w) + r_ps_bounding(ctx, w) + r_ct(ctx, w)
            + r_ts(ctx, w) + r_tt(ctx, w))
