"""Demonstration trajectories: container, text file format, synthesizers.

A demonstration holds states only (no actions). Each frame is the 14-vector
``[x, z, th, qfh, qfk, qbh, qbk, vx, vz, vth, dqfh, dqfk, dqbh, dqbk]`` and
frame ``i`` sits at time ``i * dt``.

File format::

    # locoforge-demo v1
    task=<hopping|bounding>,dt=<float>,cyclic=<0|1>
    x,z,th,qfh,qfk,qbh,qbk,vx,vz,vth,dqfh,dqfk,dqbh,dqbk
    <14 comma-separated floats per line>

A leading ``t`` column is also accepted; its spacing must then equal ``dt``
to within 1e-9 s.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import NQ, PlanarModel, RobotState

MAGIC = "# locoforge-demo v1"
COLUMNS = ("x", "z", "th", "qfh", "qfk", "qbh", "qbk",
           "vx", "vz", "vth", "dqfh", "dqfk", "dqbh", "dqbk")
TASKS = ("hopping", "bounding")
TIME_TOL = 1e-9


class DemoFormatError(ValueError):
    """Unparseable demo file; carries 1-based line and column."""

    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(loc + message)
        self.line = line
        self.column = column


class DemoValidationError(ValueError):
    """A DemoTrajectory invariant does not hold."""

    def __init__(self, invariant, message):
        super().__init__(f"[{invariant}] {message}")
        self.invariant = invariant


class IKError(ValueError):
    """Requested foot placement lies outside the leg workspace."""


@dataclass(frozen=True, eq=False)
class DemoTrajectory:
    dt: float
    frames: np.ndarray
    task: str = "hopping"
    cyclic: bool = True
    closure_tol: float = 1e-2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "frames", np.asarray(self.frames, dtype=np.float64))
        validate(self)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def z(self):
        return self.frames[:, 1]

    @property
    def pitch(self):
        return self.frames[:, 2]

    @property
    def duration(self) -> float:
        return (len(self) - 1) * self.dt

    def state(self, i: int, t: float = 0.0) -> RobotState:
        f = self.frames[i]
        return RobotState(q=f[:NQ].copy(), v=f[NQ:].copy(), t=t)

    def mean_posture(self) -> np.ndarray:
        return self.frames[:, 3:NQ].mean(axis=0)

    def phase_index(self, start: int, elapsed: float) -> int:
        """Frame reached ``elapsed`` seconds after frame ``start``.

        Cyclic demos wrap on the ``len - 1`` distinct frames (the last frame
        repeats the first); open demos hold the last frame.
        """
        i = start + int(round(elapsed / self.dt))
        if self.cyclic:
            return i % (len(self) - 1)
        return min(i, len(self) - 1)


def validate(demo: DemoTrajectory) -> None:
    fr = demo.frames
    if fr.ndim != 2 or fr.shape[1] != len(COLUMNS):
        raise DemoValidationError("shape", f"frames must be (N, {len(COLUMNS)}), got {fr.shape}")
    if fr.shape[0] < 2:
        raise DemoValidationError("min_frames", f"need at least 2 frames, got {fr.shape[0]}")
    if not (math.isfinite(demo.dt) and demo.dt > 0):
        raise DemoValidationError("dt_positive", f"dt must be finite and > 0, got {demo.dt}")
    if demo.task not in TASKS:
        raise DemoValidationError("task", f"unknown task {demo.task!r}")
    bad = np.argwhere(~np.isfinite(fr))
    if bad.size:
        i, j = bad[0]
        raise DemoValidationError("finite", f"frame {i} column {COLUMNS[j]} is {fr[i, j]}")
    if demo.cyclic:
        scale = np.maximum(1.0, fr.max(axis=0) - fr.min(axis=0))
        gap = np.abs(fr[-1] - fr[0]) / scale
        j = int(np.argmax(gap))
        if gap[j] > demo.closure_tol:
            raise DemoValidationError(
                "cyclic_closure",
                f"first/last frame differ by {gap[j]:.3g} (normalized) in column {COLUMNS[j]}")


# ---------------------------------------------------------------------------
# file io


def save_demo(demo: DemoTrajectory, path) -> None:
    lines = [MAGIC, f"task={demo.task},dt={demo.dt!r},cyclic={int(demo.cyclic)}", ",".join(COLUMNS)]
    lines += [",".join(repr(float(x)) for x in row) for row in demo.frames]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_demo(text: str, closure_tol: float = 1e-2) -> DemoTrajectory:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise DemoFormatError(f"expected {MAGIC!r}", line=1, column=1)
    if len(lines) < 3:
        raise DemoFormatError("missing metadata or column header", line=len(lines) + 1)
    meta = {}
    col = 1
    for tok in lines[1].split(","):
        key, sep, val = tok.partition("=")
        if not sep:
            raise DemoFormatError(f"expected key=value, got {tok!r}", line=2, column=col)
        meta[key.strip()] = (val.strip(), col)
        col += len(tok) + 1
    for key in ("task", "dt", "cyclic"):
        if key not in meta:
            raise DemoFormatError(f"missing {key}=", line=2)
    task = meta["task"][0]
    if task not in TASKS:
        raise DemoFormatError(f"task must be one of {TASKS}, got {task!r}", line=2, column=meta["task"][1])
    try:
        dt = float(meta["dt"][0])
    except ValueError:
        raise DemoFormatError(f"bad dt {meta['dt'][0]!r}", line=2, column=meta["dt"][1]) from None
    if meta["cyclic"][0] not in ("0", "1"):
        raise DemoFormatError("cyclic must be 0 or 1", line=2, column=meta["cyclic"][1])
    cyclic = meta["cyclic"][0] == "1"

    header = [h.strip() for h in lines[2].split(",")]
    has_time = header[:1] == ["t"]
    expected = (["t"] if has_time else []) + list(COLUMNS)
    if header != expected:
        raise DemoFormatError(f"column header must be {','.join(expected)}", line=3, column=1)

    rows = []
    for lineno, line in enumerate(lines[3:], start=4):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(expected):
            raise DemoFormatError(f"expected {len(expected)} values, got {len(cells)}", line=lineno)
        row = []
        for c, cell in enumerate(cells, start=1):
            try:
                row.append(float(cell))
            except ValueError:
                raise DemoFormatError(f"not a number: {cell.strip()!r}", line=lineno, column=c) from None
        rows.append(row)
    if not rows:
        raise DemoValidationError("min_frames", "no frames")
    arr = np.array(rows)
    if has_time:
        t = arr[:, 0]
        arr = arr[:, 1:]
        if not np.all(np.isfinite(t)):
            raise DemoValidationError("finite", "non-finite timestamp")
        dev = np.abs(np.diff(t) - dt)
        if dev.size and dev.max() > TIME_TOL:
            i = int(np.argmax(dev))
            raise DemoValidationError("uniform_dt", f"timestamp step at frame {i + 1} is {t[i + 1] - t[i]!r}, expected dt={dt!r}")
    return DemoTrajectory(dt=dt, frames=arr, task=task, cyclic=cyclic, closure_tol=closure_tol)


def load_demo(path, closure_tol: float = 1e-2) -> DemoTrajectory:
    return parse_demo(Path(path).read_text(), closure_tol)


# ---------------------------------------------------------------------------
# synthesis


def _d(phi):
    return np.array([-math.sin(phi), -math.cos(phi)])


def _dd(phi):
    return np.array([-math.cos(phi), math.sin(phi)])


def leg_ik(model: PlanarModel, rel, knee_sign: float):
    """Joint angles placing the foot at ``rel`` (base frame, from the hip).

    ``knee_sign`` is -1 for a backward-bending knee (front leg) and +1 for the
    mirrored back leg.
    """
    l1, l2 = model.upper_leg, model.lower_leg
    r2 = float(rel[0] ** 2 + rel[1] ** 2)
    c = (r2 - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    if not -1.0 < c < 1.0:
        raise IKError(f"foot at distance {math.sqrt(r2):.4f} m is outside the leg workspace "
                      f"({abs(l1 - l2):.3f}, {l1 + l2:.3f})")
    qk = knee_sign * math.acos(c)
    phi = math.atan2(-rel[0], -rel[1])
    qh = phi - math.atan2(l2 * math.sin(qk), l1 + l2 * math.cos(qk))
    return qh, qk


def leg_jacobian_local(model: PlanarModel, qh, qk) -> np.ndarray:
    l1, l2 = model.upper_leg, model.lower_leg
    return np.column_stack([l1 * _dd(qh) + l2 * _dd(qh + qk), l2 * _dd(qh + qk)])


def _legs_from_feet(model, base, base_rate, feet, feet_rate):
    """Joint positions/velocities for given base pose and world foot motion.

    base = (x, z, th); feet is (2, 2) world positions [front, back].
    """
    x, z, th = base
    xd, zd, thd = base_rate
    c, s = math.cos(th), math.sin(th)
    rt = np.array([[c, -s], [s, c]])              # R(th)^T
    rt_dot = thd * np.array([[-s, -c], [c, -s]])
    q = np.empty(4)
    qd = np.empty(4)
    for leg, (hx, sign) in enumerate(((model.hip_front, -1.0), (model.hip_back, 1.0))):
        hip = np.array([x + hx * c, z - hx * s])
        hip_d = np.array([xd - hx * s * thd, zd - hx * c * thd])
        w = feet[leg] - hip
        w_d = feet_rate[leg] - hip_d
        rel = rt @ w
        rel_d = rt_dot @ w + rt @ w_d
        qh, qk = leg_ik(model, rel, sign)
        J = leg_jacobian_local(model, qh, qk)
        q[2 * leg:2 * leg + 2] = (qh, qk)
        qd[2 * leg:2 * leg + 2] = np.linalg.solve(J, rel_d)
    return q, qd


def _frame(model, base, base_rate, feet, feet_rate):
    q, qd = _legs_from_feet(model, base, base_rate, feet, feet_rate)
    return np.concatenate([base, q, base_rate, qd])


def _time_grid(period, dt):
    n = int(round(period / dt))
    if n < 2 or abs(n * dt - period) > 1e-6 * period + 1e-12:
        raise ValueError(f"period {period} must be an integer multiple (>= 2) of dt {dt}")
    return np.arange(n + 1) * dt, n * dt


def hop_schedule(apex_height, stance_depth, period, gravity, max_liftoff):
    """Liftoff height and phase durations of the hop cycle.

    Stance is the half-sine dip z = z_lo - depth * sin(pi tau / T_s); its end
    speed pi * depth / T_s must equal the ballistic liftoff speed g * u, with
    u the time from liftoff to apex and T_s = period - 2 u. That quadratic in
    u has up to two roots; the one with the higher liftoff inside the leg
    workspace is used.
    """
    g = gravity
    disc = (g * period) ** 2 - 8 * g * math.pi * stance_depth
    if disc < 0:
        raise IKError("no hop cycle matches these apex/depth/period values")
    best = None
    for u in ((g * period - math.sqrt(disc)) / (4 * g), (g * period + math.sqrt(disc)) / (4 * g)):
        z_lo = apex_height - 0.5 * g * u * u
        t_stance = period - 2 * u
        if t_stance <= 0 or u <= 0 or z_lo > max_liftoff or z_lo - stance_depth <= 0:
            continue
        if best is None or z_lo > best[0]:
            best = (z_lo, u, t_stance)
    if best is None:
        raise IKError(f"hop with apex {apex_height} m, depth {stance_depth} m, period {period} s "
                      f"needs a liftoff height outside the leg workspace")
    return best


def synthesize_hop_demo(apex_height: float = 0.35, stance_depth: float = 0.092, period: float = 0.5,
                        dt: float = 0.01, model: PlanarModel | None = None) -> DemoTrajectory:
    """One cyclic vertical hop starting and ending at the flight apex."""
    model = model or PlanarModel()
    g = model.gravity
    times, period = _time_grid(period, dt)
    z_lo, u, t_st = hop_schedule(apex_height, stance_depth, period, g, 0.97 * model.leg_length)
    feet_x = np.array([model.hip_front, model.hip_back])
    frames = []
    for t in times:
        if t <= u:                       # falling from the apex
            z, zd = apex_height - 0.5 * g * t * t, -g * t
        elif t < u + t_st:               # stance dip
            tau = t - u
            w = math.pi / t_st
            z, zd = z_lo - stance_depth * math.sin(w * tau), -stance_depth * w * math.cos(w * tau)
        else:                            # rising to the apex
            tr = period - t
            z, zd = apex_height - 0.5 * g * tr * tr, g * tr
        # feet hang at fixed leg length in flight and stay on the ground in stance
        fz, fzd = (z - z_lo, zd) if z > z_lo else (0.0, 0.0)
        feet = np.array([[feet_x[0], fz], [feet_x[1], fz]])
        feet_d = np.array([[0.0, fzd], [0.0, fzd]])
        frames.append(_frame(model, (0.0, z, 0.0), (0.0, zd, 0.0), feet, feet_d))
    frames = np.array(frames)
    frames[-1] = frames[0]               # exact closure; both are the apex
    meta = dict(liftoff_height=z_lo, flight_time=2 * u, stance_time=t_st, apex_height=apex_height)
    return DemoTrajectory(dt=dt, frames=frames, task="hopping", cyclic=True, meta=meta)


def synthesize_bound_demo(pitch_amplitude: float = 0.25, hop_height: float = 0.03, period: float = 0.4,
                          dt: float = 0.01, model: PlanarModel | None = None,
                          center_height: float = 0.22, tilt_limit: float = 1.2) -> DemoTrajectory:
    """Cyclic in-place bound.

    Pitch follows A sin(2 pi t / P); base height peaks at both pitch zero
    crossings, z = zc + h (1 + cos(4 pi t / P)) / 2. A foot touches down while
    its hip is below ``center_height``, which alternates front and back stance
    half a period apart.
    """
    model = model or PlanarModel()
    if not 0 <= pitch_amplitude < tilt_limit:
        raise ValueError(f"pitch amplitude {pitch_amplitude} outside [0, {tilt_limit})")
    times, period = _time_grid(period, dt)
    w = 2 * math.pi / period
    hx = np.array([model.hip_front, model.hip_back])
    foot_x = hx * math.cos(pitch_amplitude)
    frames = []
    for t in times:
        th, thd = pitch_amplitude * math.sin(w * t), pitch_amplitude * w * math.cos(w * t)
        z = center_height + 0.5 * hop_height * (1 + math.cos(2 * w * t))
        zd = -hop_height * w * math.sin(2 * w * t)
        feet = np.zeros((2, 2))
        feet_d = np.zeros((2, 2))
        for leg in range(2):
            hip_z = z - hx[leg] * math.sin(th)
            hip_zd = zd - hx[leg] * math.cos(th) * thd
            feet[leg, 0] = foot_x[leg]
            if hip_z > center_height:
                feet[leg, 1] = hip_z - center_height
                feet_d[leg, 1] = hip_zd
        frames.append(_frame(model, (0.0, z, th), (0.0, zd, thd), feet, feet_d))
    frames = np.array(frames)
    frames[-1] = frames[0]
    meta = dict(pitch_amplitude=pitch_amplitude, hop_height=hop_height, center_height=center_height)
    return DemoTrajectory(dt=dt, frames=frames, task="bounding", cyclic=True, meta=meta)


# ---------------------------------------------------------------------------
# queries


def sample_demo_point(demo: DemoTrajectory, rng: np.random.Generator):
    i = int(rng.integers(len(demo)))
    return i, demo.state(i, t=0.0)


def nearest_path_distance(demo: DemoTrajectory, z_base: float, pitch: float,
                          weights=(1.0, 1.0)) -> float:
    """min_i || (w_z (z_i - z), w_th (th_i - th)) || by exact linear scan."""
    dz = (demo.z - z_base) * weights[0]
    dth = (demo.pitch - pitch) * weights[1]
    return float(np.sqrt(np.min(dz * dz + dth * dth)))
