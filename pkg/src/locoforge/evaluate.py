"""Evaluation protocols: drop tests, limit-cycle metrics, contact-force
estimation from joint torques, and ground/friction robustness sweeps."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import policy as pol
from .dynamics import LEG_JOINTS, NQ, PlanarModel, RobotState, foot_kinematics, mirrored_posture
from .env import LocomotionEnv, rollout

DEFAULT_HEIGHTS = (0.3, 0.5, 0.7, 1.0)
DEFAULT_ANGLES = tuple(np.round(np.arange(-0.6, 0.6 + 1e-9, 0.2), 10))
SWEEP_HEIGHTS = (-0.05, -0.025, 0.0, 0.025, 0.05)
SWEEP_FRICTIONS = (0.5, 0.75, 1.0)
APEX_TOL = {"hopping": 0.01, "bounding": 0.05}


class SingularJacobianError(ValueError):
    def __init__(self, leg: str, det: float):
        super().__init__(f"{leg} leg jacobian is singular (|det| = {abs(det):.3g}); knee is straight")
        self.leg = leg
        self.det = det


LEG_NAMES = ("front", "back")


def estimate_contact_force(model: PlanarModel, state: RobotState, tau, det_threshold: float = 1e-6):
    """Ground-on-foot force per leg from joint torques, shape (2, 2) as [fx, fz].

    Statics of one leg with massless links give tau_i + J_i^T F_i = 0, hence
    F_i = -(S_i J_i^T)^-1 S_i tau with S_i picking that leg's two joints.
    """
    tau = np.asarray(tau, dtype=np.float64).reshape(4)
    out = np.zeros((2, 2))
    for leg in (0, 1):
        _, _, jac = foot_kinematics(model, state, leg)
        det = np.linalg.det(jac)
        if abs(det) < det_threshold:
            raise SingularJacobianError(LEG_NAMES[leg], det)
        s_tau = tau[[j - 3 for j in LEG_JOINTS[leg]]]
        out[leg] = -np.linalg.solve(jac.T, s_tau)
    return out


# ---------------------------------------------------------------------------
# limit cycles


@dataclass
class CycleMetrics:
    apexes: np.ndarray                 # apex heights (m) or half-swing pitch amplitudes (rad)
    apex_steps: np.ndarray
    convergence_index: int | None      # 1-based; None = non-convergent
    steady_value: float | None
    peak_force: float = float("nan")   # max estimated total foot force magnitude, N
    survived: bool = True

    @property
    def converged(self) -> bool:
        return self.convergence_index is not None


def convergence_index(apexes, tol: float) -> int | None:
    """Smallest k (1-based) with |a_{j+1} - a_j| < tol for every j >= k.

    Needs at least three apexes; returns None when the tail never settles.
    """
    a = np.asarray(apexes, dtype=float)
    if a.size < 3:
        return None
    ok = np.abs(np.diff(a)) < tol
    if not ok[-1]:
        return None
    k = ok.size
    while k > 0 and ok[k - 1]:
        k -= 1
    return k + 1


def detect_apexes(z, zdot, in_flight=None):
    """Indices where zdot crosses from >0 to <=0 (optionally only in flight)."""
    zdot = np.asarray(zdot, dtype=float)
    idx = np.nonzero((zdot[:-1] > 0) & (zdot[1:] <= 0))[0] + 1
    if in_flight is not None:
        idx = idx[np.asarray(in_flight, dtype=bool)[idx]]
    return idx


def detect_pitch_extrema(rate):
    rate = np.asarray(rate, dtype=float)
    return np.nonzero(np.sign(rate[:-1]) * np.sign(rate[1:]) < 0)[0] + 1


def cycle_metrics(trace: list[dict], task: str = "hopping", tol: float | None = None,
                  model: PlanarModel | None = None, survived: bool = True) -> CycleMetrics:
    tol = APEX_TOL[task] if tol is None else tol
    if not trace:
        return CycleMetrics(np.zeros(0), np.zeros(0, dtype=int), None, None, survived=survived)
    z = np.array([r["nq1"] for r in trace])
    if task == "hopping":
        flight = np.array([r["contact_f"] < 0.5 and r["contact_b"] < 0.5 for r in trace])
        idx = detect_apexes(z, [r["nv1"] for r in trace], flight)
        apexes = z[idx] - np.array([trace[i]["ground_height"] for i in idx])
    else:
        pitch = np.array([r["nq2"] for r in trace])
        # half the swing between successive extrema, so an offset oscillation
        # still reads as one amplitude
        ext = detect_pitch_extrema([r["nv2"] for r in trace])
        idx = ext[1:]
        apexes = 0.5 * np.abs(np.diff(pitch[ext]))
    k = convergence_index(apexes, tol) if survived else None
    steady = float(apexes[k - 1:].mean()) if k is not None else None
    peak = float("nan")
    if model is not None:
        peak = max((_total_estimate(model, r) for r in trace), default=float("nan"))
    return CycleMetrics(apexes, idx, k, steady, peak, survived)


def _total_estimate(model, row):
    q = np.array([row[f"q{i}"] for i in range(NQ)])
    tau = np.array([row[f"tau{j}"] for j in range(4)])
    if not (row["contact_f"] > 0.5 or row["contact_b"] > 0.5):
        return 0.0
    try:
        f = estimate_contact_force(model, RobotState(q=q, v=np.zeros(NQ)), tau)
    except SingularJacobianError:
        return 0.0
    mask = np.array([row["contact_f"] > 0.5, row["contact_b"] > 0.5])
    return float(np.linalg.norm(f[mask], axis=1).sum())


def common_steady_count(metrics: list[CycleMetrics], tol: float) -> tuple[int, float | None]:
    """Size of the largest group of converged runs whose steady values lie
    within ``tol`` of each other, and that group's mean."""
    vals = sorted(m.steady_value for m in metrics if m.converged)
    best, best_mean = 0, None
    for i in range(len(vals)):
        j = i
        while j + 1 < len(vals) and vals[j + 1] - vals[i] <= tol:
            j += 1
        if j - i + 1 > best:
            best, best_mean = j - i + 1, float(np.mean(vals[i:j + 1]))
    return best, best_mean


def align_offsets(metrics: list[CycleMetrics]) -> list[int]:
    """Per-run step offsets that line up the first settled apex of each run."""
    out = []
    for m in metrics:
        if m.converged:
            out.append(int(m.apex_steps[m.convergence_index - 1]))
        else:
            out.append(0)
    return out


# ---------------------------------------------------------------------------
# drop tests


@dataclass(frozen=True)
class DropTestSpec:
    task: str = "hopping"
    conditions: tuple[float, ...] = DEFAULT_HEIGHTS    # base heights (m) or pitch angles (rad)
    horizon: int = 500
    seed: int = 0
    tolerance: float | None = None
    clearance: float = 0.05       # angle test: lowest foot this far above ground

    def __post_init__(self):
        if not self.conditions:
            raise ValueError("drop test needs at least one condition")
        if self.task == "hopping" and min(self.conditions) <= 0:
            raise ValueError("drop heights must be positive")
        if self.task == "bounding" and max(abs(c) for c in self.conditions) >= 1.2:
            raise ValueError("drop angles must stay inside the tilt limit")

    @property
    def tol(self) -> float:
        return APEX_TOL[self.task] if self.tolerance is None else self.tolerance


def drop_state(env: LocomotionEnv, spec: DropTestSpec, value: float) -> RobotState:
    joints = env.demo.mean_posture()
    if spec.task == "hopping":
        q = np.concatenate([[0.0, env.ground.height + value, 0.0], joints])
        return RobotState(q=q, v=np.zeros(NQ))
    q = np.concatenate([[0.0, 0.0, value], joints])
    s = RobotState(q=q, v=np.zeros(NQ))
    low = min(foot_kinematics(env.model, s, leg)[0][1] for leg in (0, 1))
    q[1] = env.ground.height + spec.clearance - low
    return RobotState(q=q, v=np.zeros(NQ))


def policy_actor(params: pol.PolicyParams):
    return lambda obs: pol.actor_forward(params, obs)


def run_condition(make_env, params, spec: DropTestSpec, value: float):
    env = make_env()
    env.reset_to(drop_state(env, spec, value), replace(env.base_ground, height=0.0,
                                                     friction_coeff=env.config.nominal_friction))
    env.config = replace(env.config, max_steps=max(env.config.max_steps, spec.horizon))
    rows, _, res = rollout(env, policy_actor(params), spec.horizon)
    survived = res is not None and not res.terminated
    return rows, cycle_metrics(rows, spec.task, spec.tol, env.model, survived)


def drop_test(make_env, params: pol.PolicyParams, spec: DropTestSpec, workers: int = 1):
    """Roll out from every condition; returns (traces, metrics) in condition order."""
    def one(v):
        return run_condition(make_env, params, spec, v)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, spec.conditions))
    else:
        results = [one(v) for v in spec.conditions]
    return [r[0] for r in results], [r[1] for r in results]


def drop_summary_rows(spec: DropTestSpec, metrics: list[CycleMetrics]) -> list[dict]:
    rows = []
    for v, m in zip(spec.conditions, metrics):
        rows.append(dict(condition=float(v), survived=int(m.survived), cycles=int(m.apexes.size),
                         convergence_index=-1 if m.convergence_index is None else m.convergence_index,
                         steady_value=float("nan") if m.steady_value is None else m.steady_value,
                         peak_force=m.peak_force,
                         apexes=" ".join(repr(float(a)) for a in m.apexes)))
    return rows


# ---------------------------------------------------------------------------
# robustness sweep


@dataclass
class SweepResult:
    heights: tuple
    frictions: tuple
    survival: np.ndarray          # (len(heights), len(frictions))
    mean_return: np.ndarray
    episodes: list = field(default_factory=list)   # (height, friction, episode, return, length, survived)

    @property
    def mean_survival(self) -> float:
        return float(self.survival.mean())


def robustness_sweep(make_env, params: pol.PolicyParams, heights=SWEEP_HEIGHTS,
                     frictions=SWEEP_FRICTIONS, episodes: int = 20, seed: int = 0,
                     workers: int = 1) -> SweepResult:
    """Survival and mean return per (ground height, friction) cell.

    Initial states come from ``np.random.default_rng([seed, cell, episode])``
    so two policies evaluated with the same seed see identical starts.
    """
    cells = [(i, j) for i in range(len(heights)) for j in range(len(frictions))]
    act = policy_actor(params)

    def run_cell(ij):
        i, j = ij
        env = make_env()
        ground = replace(env.base_ground, height=float(heights[i]), friction_coeff=float(frictions[j]))
        out = []
        for e in range(episodes):
            rng = np.random.default_rng([seed, i * len(frictions) + j, e])
            env.ground = ground
            state = env._sample_wide_state(rng)
            env.reset_to(state, ground)
            _, ret, res = rollout(env, act, record=False)
            out.append((float(heights[i]), float(frictions[j]), e, ret, env.steps,
                        bool(res is not None and not res.terminated)))
        return out

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            per_cell = list(ex.map(run_cell, cells))
    else:
        per_cell = [run_cell(c) for c in cells]
    surv = np.zeros((len(heights), len(frictions)))
    mret = np.zeros_like(surv)
    eps = []
    for (i, j), rows in zip(cells, per_cell):
        surv[i, j] = np.mean([r[5] for r in rows])
        mret[i, j] = np.mean([r[3] for r in rows])
        eps.extend(rows)
    return SweepResult(tuple(heights), tuple(frictions), surv, mret, eps)


def write_sweep(result: SweepResult, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = out_dir / "sweep_summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ground_height", "friction", "episodes", "survival_rate", "mean_return"])
        n = len(result.episodes) // max(1, result.survival.size)
        for i, h in enumerate(result.heights):
            for j, f in enumerate(result.frictions):
                w.writerow([repr(float(h)), repr(float(f)), n, repr(float(result.survival[i, j])),
                            repr(float(result.mean_return[i, j]))])
    detail = out_dir / "sweep_episodes.csv"
    with open(detail, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ground_height", "friction", "episode", "return", "length", "survived"])
        for h, f, e, ret, length, ok in result.episodes:
            w.writerow([repr(h), repr(f), e, repr(float(ret)), length, int(ok)])
    return summary, detail


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for k, v in r.items()})
