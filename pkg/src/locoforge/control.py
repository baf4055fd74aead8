"""Fixed-gain joint PD control: desired joint positions in, torques out."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import RobotState


@dataclass(frozen=True)
class PDGains:
    """Per-joint gains. Defaults are for a lumped planar joint, i.e. two
    Solo-class actuators in parallel (2 x 3.0 N.m/rad, 2 x 0.1, 2 x 2.7 N.m)."""

    kp: tuple[float, ...] = (6.0, 6.0, 6.0, 6.0)
    kd: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2)
    torque_limit: float = 5.4

    def __post_init__(self):
        kp = tuple(float(k) for k in np.broadcast_to(self.kp, (4,)))
        kd = tuple(float(k) for k in np.broadcast_to(self.kd, (4,)))
        object.__setattr__(self, "kp", kp)
        object.__setattr__(self, "kd", kd)
        if min(kp) < 0 or min(kd) < 0:
            raise ValueError("PD gains must be nonnegative")
        if not self.torque_limit > 0:
            raise ValueError("torque_limit must be positive")

    @property
    def kp_array(self) -> np.ndarray:
        return np.array(self.kp)

    @property
    def kd_array(self) -> np.ndarray:
        return np.array(self.kd)


def pd_torques(gains: PDGains, q_des, state: RobotState) -> np.ndarray:
    """tau = clamp(kp (q_des - q) - kd qdot, +-limit); desired velocity is zero."""
    q_des = np.asarray(q_des, dtype=np.float64).reshape(4)
    tau = gains.kp_array * (q_des - state.joints) - gains.kd_array * state.joint_velocities
    return np.clip(tau, -gains.torque_limit, gains.torque_limit)
