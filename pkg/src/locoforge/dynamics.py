"""Planar sagittal-plane quadruped: floating base + two lumped legs.

Generalized coordinates ``q = [x, z, pitch, q_fh, q_fk, q_bh, q_bk]``. All
rotational coordinates are about the +y axis, so a positive pitch lowers the
nose. Link direction at absolute angle ``phi`` is ``(-sin phi, -cos phi)``
(straight down at zero); knee 0 is a straight leg.

The heavy lifting is done by numba kernels operating on packed float arrays;
the dataclasses below are the public, value-typed face of those kernels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

NQ = 7
FRONT, BACK = 0, 1
LEG_JOINTS = ((3, 4), (5, 6))

# packed model layout
_MB, _IB, _L1, _L2, _MT, _MS, _IT, _IS, _HXF, _HXB, _G, _TLIM = range(12)
_BHL, _BHH, _KLIM, _DLIM, _CT, _CS = range(12, 18)
_JLO = 18   # 4 lower joint limits
_JHI = 22   # 4 upper joint limits
_NMP = 26

# packed ground layout
_GH, _MU, _KN, _CN, _KT, _CTD = range(6)


class SimulationError(RuntimeError):
    """Raised when the state leaves the sane region or the model is degenerate."""


@dataclass(frozen=True)
class PlanarModel:
    """Mass/geometry of the planar model. Each leg stands for a lumped pair."""

    base_mass: float = 1.9
    base_inertia: float = 0.03
    upper_leg: float = 0.16
    lower_leg: float = 0.16
    upper_mass: float = 0.1
    lower_mass: float = 0.05
    upper_inertia: float = 2.5e-4
    lower_inertia: float = 1.2e-4
    hip_front: float = 0.2
    hip_back: float = -0.2
    gravity: float = 9.81
    torque_limit: float = 2.7
    base_half_length: float = 0.22
    base_half_height: float = 0.04
    limit_stiffness: float = 50.0
    limit_damping: float = 0.5
    # [front hip, front knee, back hip, back knee]; the back leg is mirrored
    joint_lower: tuple[float, ...] = (-1.6, -2.9, -2.6, -0.1)
    joint_upper: tuple[float, ...] = (2.6, 0.1, 1.6, 2.9)
    upper_com: float = 0.5
    lower_com: float = 0.5

    def __post_init__(self):
        positive = ("base_mass", "base_inertia", "upper_leg", "lower_leg", "upper_mass",
                    "lower_mass", "upper_inertia", "lower_inertia", "torque_limit")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"PlanarModel.{name} must be > 0")
        if len(self.joint_lower) != 4 or len(self.joint_upper) != 4:
            raise ValueError("joint limits need 4 entries")
        if any(lo >= hi for lo, hi in zip(self.joint_lower, self.joint_upper)):
            raise ValueError("joint limits must satisfy lower < upper")

    @property
    def total_mass(self) -> float:
        return self.base_mass + 2 * (self.upper_mass + self.lower_mass)

    @property
    def leg_length(self) -> float:
        return self.upper_leg + self.lower_leg

    def packed(self) -> np.ndarray:
        p = np.empty(_NMP)
        p[:] = (self.base_mass, self.base_inertia, self.upper_leg, self.lower_leg,
                self.upper_mass, self.lower_mass, self.upper_inertia, self.lower_inertia,
                self.hip_front, self.hip_back, self.gravity, self.torque_limit,
                self.base_half_length, self.base_half_height, self.limit_stiffness,
                self.limit_damping, self.upper_com, self.lower_com,
                *self.joint_lower, *self.joint_upper)
        return p


@dataclass(frozen=True)
class GroundModel:
    height: float = 0.0
    friction_coeff: float = 1.0
    contact_stiffness: float = 1.0e4
    contact_damping: float = 100.0
    tangential_stiffness: float = 5.0e3
    tangential_damping: float = 20.0

    def __post_init__(self):
        for name in ("friction_coeff", "contact_stiffness", "contact_damping",
                     "tangential_stiffness", "tangential_damping"):
            if getattr(self, name) < 0:
                raise ValueError(f"GroundModel.{name} must be >= 0")

    def packed(self) -> np.ndarray:
        return np.array([self.height, self.friction_coeff, self.contact_stiffness,
                         self.contact_damping, self.tangential_stiffness, self.tangential_damping])


def _nan_anchors():
    return np.full(2, np.nan)


@dataclass(frozen=True, eq=False)
class RobotState:
    """Positions, velocities and time. ``anchors`` holds the tangential contact
    anchor x for each foot (NaN while the foot is airborne)."""

    q: np.ndarray
    v: np.ndarray
    t: float = 0.0
    anchors: np.ndarray = field(default_factory=_nan_anchors)

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64).reshape(NQ))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64).reshape(NQ))
        object.__setattr__(self, "anchors", np.asarray(self.anchors, dtype=np.float64).reshape(2))

    def __eq__(self, other):
        if not isinstance(other, RobotState):
            return NotImplemented
        return (np.array_equal(self.q, other.q) and np.array_equal(self.v, other.v)
                and self.t == other.t and np.array_equal(self.anchors, other.anchors, equal_nan=True))

    @property
    def joints(self) -> np.ndarray:
        return self.q[3:]

    @property
    def joint_velocities(self) -> np.ndarray:
        return self.v[3:]

    def with_time(self, t: float) -> "RobotState":
        return replace(self, t=t)


@dataclass(frozen=True)
class ContactReport:
    in_contact: np.ndarray    # (2,) bool, [front, back]
    force: np.ndarray         # (2, 2), rows [f_x, f_z] per foot
    penetration: np.ndarray   # (2,)

    @property
    def total_normal(self) -> float:
        return float(self.force[:, 1].sum())


# ---------------------------------------------------------------------------
# kinematics kernels


@numba.njit(cache=True)
def _link_dir(phi):
    return -math.sin(phi), -math.cos(phi)


@numba.njit(cache=True)
def _foot_kin(mp, q, v, leg):
    """World foot position (2,), velocity (2,) and full jacobian (2, 7)."""
    th = q[2]
    hx = mp[_HXF] if leg == 0 else mp[_HXB]
    ih = 3 + 2 * leg
    l1 = mp[_L1]
    l2 = mp[_L2]
    p1 = th + q[ih]
    p2 = p1 + q[ih + 1]
    c = math.cos(th)
    s = math.sin(th)
    s1 = math.sin(p1)
    c1 = math.cos(p1)
    s2 = math.sin(p2)
    c2 = math.cos(p2)
    pos = np.empty(2)
    pos[0] = q[0] + hx * c - l1 * s1 - l2 * s2
    pos[1] = q[1] - hx * s - l1 * c1 - l2 * c2
    jac = np.zeros((2, NQ))
    jac[0, 0] = 1.0
    jac[1, 1] = 1.0
    # d/dphi of (-sin, -cos) is (-cos, sin)
    jk_x = -l2 * c2
    jk_z = l2 * s2
    jh_x = -l1 * c1 + jk_x
    jh_z = l1 * s1 + jk_z
    jac[0, 2] = -hx * s + jh_x
    jac[1, 2] = -hx * c + jh_z
    jac[0, ih] = jh_x
    jac[1, ih] = jh_z
    jac[0, ih + 1] = jk_x
    jac[1, ih + 1] = jk_z
    vel = np.zeros(2)
    for r in range(2):
        for c in range(NQ):
            vel[r] += jac[r, c] * v[c]
    return pos, vel, jac


@numba.njit(cache=True)
def _knee_pos(mp, q, leg):
    th = q[2]
    hx = mp[_HXF] if leg == 0 else mp[_HXB]
    p1 = th + q[3 + 2 * leg]
    return (q[0] + hx * math.cos(th) - mp[_L1] * math.sin(p1),
            q[1] - hx * math.sin(th) - mp[_L1] * math.cos(p1))


@numba.njit(cache=True)
def _lowest_body_point(mp, q):
    """Lowest z among knees and the four base corners."""
    lowest = 1e300
    for leg in range(2):
        kz = _knee_pos(mp, q, leg)[1]
        if kz < lowest:
            lowest = kz
    c = math.cos(q[2])
    s = math.sin(q[2])
    for sx in (-1.0, 1.0):
        for sz in (-1.0, 1.0):
            bx = sx * mp[_BHL]
            bz = sz * mp[_BHH]
            z = q[1] - s * bx + c * bz
            if z < lowest:
                lowest = z
    return lowest


# ---------------------------------------------------------------------------
# planar spatial algebra: motion vectors are [omega_ccw, vx, vz]

# joints: prismatic x, prismatic z, then five revolutes about +y
_PARENT = np.array([-1, 0, 1, 2, 3, 2, 5])


@numba.njit(cache=True)
def _plnr(theta, rx, rz):
    c = math.cos(theta)
    s = math.sin(theta)
    X = np.empty((3, 3))
    X[0, 0] = 1.0
    X[0, 1] = 0.0
    X[0, 2] = 0.0
    X[1, 0] = s * rx - c * rz
    X[1, 1] = c
    X[1, 2] = s
    X[2, 0] = c * rx + s * rz
    X[2, 1] = -s
    X[2, 2] = c
    return X


@numba.njit(cache=True)
def _mv(X, v):
    out = np.empty(3)
    for r in range(3):
        out[r] = X[r, 0] * v[0] + X[r, 1] * v[1] + X[r, 2] * v[2]
    return out


@numba.njit(cache=True)
def _mtv(X, v):
    out = np.empty(3)
    for r in range(3):
        out[r] = X[0, r] * v[0] + X[1, r] * v[1] + X[2, r] * v[2]
    return out


@numba.njit(cache=True)
def _crm_mv(v, w):
    """crm(v) @ w for planar motion vectors."""
    out = np.empty(3)
    out[0] = 0.0
    out[1] = v[2] * w[0] - v[0] * w[2]
    out[2] = -v[1] * w[0] + v[0] * w[1]
    return out


@numba.njit(cache=True)
def _crf_mv(v, f):
    """crf(v) @ f = -crm(v)^T @ f."""
    out = np.empty(3)
    out[0] = -(v[2] * f[1] - v[1] * f[2])
    out[1] = -(v[0] * f[2])
    out[2] = -(-v[0] * f[1])
    return out


@numba.njit(cache=True)
def _congruence(X, I):
    """X^T I X."""
    tmp = np.empty((3, 3))
    for r in range(3):
        for c in range(3):
            tmp[r, c] = I[r, 0] * X[0, c] + I[r, 1] * X[1, c] + I[r, 2] * X[2, c]
    out = np.empty((3, 3))
    for r in range(3):
        for c in range(3):
            out[r, c] = X[0, r] * tmp[0, c] + X[1, r] * tmp[1, c] + X[2, r] * tmp[2, c]
    return out


@numba.njit(cache=True)
def _inertia(out, m, cx, cz, ic):
    out[0, 0] = ic + m * (cx * cx + cz * cz)
    out[0, 1] = -m * cz
    out[0, 2] = m * cx
    out[1, 0] = -m * cz
    out[1, 1] = m
    out[1, 2] = 0.0
    out[2, 0] = m * cx
    out[2, 1] = 0.0
    out[2, 2] = m


@numba.njit(cache=True)
def _tree(mp, q):
    """Per-body parent->body transforms, motion subspaces and inertias.

    Joint transforms compose with the fixed tree offsets as plnr(a, 0) @
    plnr(0, r) = plnr(a, r), so each Xup is a single planar transform.
    """
    xup = np.empty((NQ, 3, 3))
    S = np.zeros((NQ, 3))
    inert = np.zeros((NQ, 3, 3))
    l1 = mp[_L1]
    l2 = mp[_L2]
    xup[0] = _plnr(0.0, q[0], 0.0)
    S[0, 1] = 1.0
    xup[1] = _plnr(0.0, 0.0, q[1])
    S[1, 2] = 1.0
    xup[2] = _plnr(-q[2], 0.0, 0.0)
    xup[3] = _plnr(-q[3], mp[_HXF], 0.0)
    xup[4] = _plnr(-q[4], 0.0, -l1)
    xup[5] = _plnr(-q[5], mp[_HXB], 0.0)
    xup[6] = _plnr(-q[6], 0.0, -l1)
    for i in range(2, NQ):
        S[i, 0] = -1.0
    _inertia(inert[2], mp[_MB], 0.0, 0.0, mp[_IB])
    for thigh in (3, 5):
        _inertia(inert[thigh], mp[_MT], 0.0, -mp[_CT] * l1, mp[_IT])
        _inertia(inert[thigh + 1], mp[_MS], 0.0, -mp[_CS] * l2, mp[_IS])
    return xup, S, inert


@numba.njit(cache=True)
def _rnea(mp, q, v, a, gravity_on):
    xup, S, inert = _tree(mp, q)
    vel = np.zeros((NQ, 3))
    acc = np.zeros((NQ, 3))
    f = np.zeros((NQ, 3))
    ag = np.zeros(3)
    if gravity_on:
        ag[2] = mp[_G]   # base acceleration -a_grav
    for i in range(NQ):
        vj = S[i] * v[i]
        p = _PARENT[i]
        if p < 0:
            vel[i] = vj
            acc[i] = _mv(xup[i], ag) + S[i] * a[i]
        else:
            vel[i] = _mv(xup[i], vel[p]) + vj
            acc[i] = _mv(xup[i], acc[p]) + S[i] * a[i] + _crm_mv(vel[i], vj)
        f[i] = _mv(inert[i], acc[i]) + _crf_mv(vel[i], _mv(inert[i], vel[i]))
    tau = np.zeros(NQ)
    for i in range(NQ - 1, -1, -1):
        tau[i] = S[i, 0] * f[i, 0] + S[i, 1] * f[i, 1] + S[i, 2] * f[i, 2]
        p = _PARENT[i]
        if p >= 0:
            f[p] += _mtv(xup[i], f[i])
    return tau


@numba.njit(cache=True)
def _crba(mp, q):
    xup, S, inert = _tree(mp, q)
    ic = inert.copy()
    for i in range(NQ - 1, -1, -1):
        p = _PARENT[i]
        if p >= 0:
            ic[p] += _congruence(xup[i], ic[i])
    H = np.zeros((NQ, NQ))
    for i in range(NQ):
        fh = _mv(ic[i], S[i])
        H[i, i] = S[i, 0] * fh[0] + S[i, 1] * fh[1] + S[i, 2] * fh[2]
        j = i
        while _PARENT[j] >= 0:
            fh = _mtv(xup[j], fh)
            j = _PARENT[j]
            H[i, j] = S[j, 0] * fh[0] + S[j, 1] * fh[1] + S[j, 2] * fh[2]
            H[j, i] = H[i, j]
    return H


@numba.njit(cache=True)
def _cholesky_solve(H, b):
    n = H.shape[0]
    L = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            s = H[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 1e-12:
                    raise ValueError("mass matrix is not positive definite")
                L[i, i] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    y = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x


# ---------------------------------------------------------------------------
# contact and joint limits


@numba.njit(cache=True)
def _contact_full(mp, gp, q, v, anchors):
    """Penalty contact at the current state.

    Returns forces (2, 2), in_contact (2,), penetration (2,), new anchors (2,),
    foot jacobians (2, 2, 7) and the per-foot active stiffness / damping
    (2, 2) along [x, z] used for the linearly implicit update.
    """
    forces = np.zeros((2, 2))
    inc = np.zeros(2, dtype=np.bool_)
    pen = np.zeros(2)
    new_anchors = np.full(2, np.nan)
    jacs = np.zeros((2, 2, NQ))
    stiff = np.zeros((2, 2))
    damp = np.zeros((2, 2))
    for leg in range(2):
        pos, vel, jac = _foot_kin(mp, q, v, leg)
        jacs[leg] = jac
        d = gp[_GH] - pos[1]
        if d <= 0.0:
            continue
        inc[leg] = True
        pen[leg] = d
        fz = gp[_KN] * d
        stiff[leg, 1] = gp[_KN]
        if vel[1] < 0.0:
            fz -= gp[_CN] * vel[1]
            damp[leg, 1] = gp[_CN]
        a = anchors[leg]
        if math.isnan(a):
            a = pos[0]
        fx = -gp[_KT] * (pos[0] - a) - gp[_CTD] * vel[0]
        lim = gp[_MU] * fz
        if fx > lim or fx < -lim:
            fx = lim if fx > 0 else -lim
            # slip: pull the anchor in until the spring stretch fits the cone;
            # never stretch it further, which would create energy
            fs = -gp[_KT] * (pos[0] - a)
            if gp[_KT] <= 0:
                a = pos[0]
            elif fs > lim:
                a = pos[0] + lim / gp[_KT]
            elif fs < -lim:
                a = pos[0] - lim / gp[_KT]
        else:
            stiff[leg, 0] = gp[_KT]
            damp[leg, 0] = gp[_CTD]
        new_anchors[leg] = a
        forces[leg, 0] = fx
        forces[leg, 1] = fz
    return forces, inc, pen, new_anchors, jacs, stiff, damp


@numba.njit(cache=True)
def _contact(mp, gp, q, v, anchors):
    forces, inc, pen, new_anchors, jacs, stiff, damp = _contact_full(mp, gp, q, v, anchors)
    gen = np.zeros(NQ)
    for leg in range(2):
        gen += jacs[leg, 0] * forces[leg, 0] + jacs[leg, 1] * forces[leg, 1]
    return forces, inc, pen, new_anchors, gen


@numba.njit(cache=True)
def _limit_torques(mp, q, v):
    out = np.zeros(NQ)
    for j in range(3, NQ):
        lo = mp[_JLO + j - 3]
        hi = mp[_JHI + j - 3]
        if q[j] > hi:
            out[j] = -mp[_KLIM] * (q[j] - hi) - mp[_DLIM] * v[j]
        elif q[j] < lo:
            out[j] = -mp[_KLIM] * (q[j] - lo) - mp[_DLIM] * v[j]
    return out


@numba.njit(cache=True)
def _accel(mp, gp, q, v, anchors, tau4):
    forces, inc, pen, new_anchors, gen = _contact(mp, gp, q, v, anchors)
    b = _limit_torques(mp, q, v) + gen - _rnea(mp, q, v, np.zeros(NQ), True)
    for j in range(4):
        b[3 + j] += tau4[j]
    a = _cholesky_solve(_crba(mp, q), b)
    return a, forces, inc, pen, new_anchors


@numba.njit(cache=True)
def _euler(mp, gp, q, v, anchors, tau4, dt):
    """Semi-implicit Euler; contact springs/dampers enter linearly implicitly.

    Solves (M + dt J^T D J + dt^2 J^T K J) a = b - dt J^T K J v, which keeps
    the stiff foot contact stable at millisecond steps despite the very small
    effective foot mass.
    """
    forces, inc, pen, new_anchors, jacs, stiff, damp = _contact_full(mp, gp, q, v, anchors)
    H = _crba(mp, q)
    b = _limit_torques(mp, q, v) - _rnea(mp, q, v, np.zeros(NQ), True)
    for j in range(4):
        b[3 + j] += tau4[j]
    # joint-limit springs, implicit like the contact springs
    for j in range(3, NQ):
        lo = mp[_JLO + j - 3]
        hi = mp[_JHI + j - 3]
        inside = lo <= q[j] <= hi
        qn = q[j] + v[j] * dt
        if inside and lo <= qn <= hi:
            continue
        if inside:
            edge = hi if qn > hi else lo
            b[j] -= mp[_KLIM] * (q[j] - edge + dt * v[j])
            H[j, j] += dt * dt * mp[_KLIM]
        else:
            b[j] -= dt * mp[_KLIM] * v[j]
            H[j, j] += dt * mp[_DLIM] + dt * dt * mp[_KLIM]
    for leg in range(2):
        if not inc[leg]:
            # a foot that reaches the ground within this step gets the implicit
            # normal spring on its end-of-step penetration right away
            pos, vel, jac = _foot_kin(mp, q, v, leg)
            gap = pos[1] - gp[_GH]
            if gap + vel[1] * dt < 0.0:
                jz = jacs[leg, 1]
                w = dt * dt * gp[_KN]
                for c in range(NQ):
                    b[c] -= gp[_KN] * (gap + dt * vel[1]) * jz[c]
                    for k in range(NQ):
                        H[c, k] += w * jz[c] * jz[k]
            continue
        for r in range(2):
            jr = jacs[leg, r]
            b += jr * forces[leg, r]
            w = dt * damp[leg, r] + dt * dt * stiff[leg, r]
            if w > 0.0:
                jv = 0.0
                for c in range(NQ):
                    jv += jr[c] * v[c]
                for c in range(NQ):
                    b[c] -= dt * stiff[leg, r] * jv * jr[c]
                    for k in range(NQ):
                        H[c, k] += w * jr[c] * jr[k]
    a = _cholesky_solve(H, b)
    v2 = v + a * dt
    q2 = q + v2 * dt
    return q2, v2, new_anchors, forces, inc


@numba.njit(cache=True)
def _pd(q, v, qdes, kp, kd, tlim):
    tau = np.empty(4)
    for j in range(4):
        t = kp[j] * (qdes[j] - q[3 + j]) - kd[j] * v[3 + j]
        if t > tlim:
            t = tlim
        elif t < -tlim:
            t = -tlim
        tau[j] = t
    return tau


@numba.njit(cache=True, nogil=True)
def control_interval(mp, gp, q, v, anchors, qdes, kp, kd, tlim, dt, substeps, bound):
    """Hold ``qdes`` for ``substeps`` physics steps under PD control.

    Returns the final (q, v, anchors), the mean applied torque, the mean foot
    forces, per-foot contact flags (any substep), the final penetration and a
    status flag (0 ok, 1 blow-up).
    """
    tau_sum = np.zeros(4)
    f_sum = np.zeros((2, 2))
    any_contact = np.zeros(2, dtype=np.bool_)
    status = 0
    for _ in range(substeps):
        tau = _pd(q, v, qdes, kp, kd, tlim)
        q, v, anchors, forces, inc = _euler(mp, gp, q, v, anchors, tau, dt)
        tau_sum += tau
        f_sum += forces
        for leg in range(2):
            if inc[leg]:
                any_contact[leg] = True
        for j in range(NQ):
            if not (abs(q[j]) <= bound and abs(v[j]) <= bound):
                status = 1
        if status:
            break
    pen = np.zeros(2)
    for leg in range(2):
        pos, vel, jac = _foot_kin(mp, q, v, leg)
        pen[leg] = max(0.0, gp[_GH] - pos[1])
    return q, v, anchors, tau_sum / substeps, f_sum / substeps, any_contact, pen, status


# ---------------------------------------------------------------------------
# public API


def foot_kinematics(model: PlanarModel, state: RobotState, leg: int | None = None):
    """Foot position, velocity and the 2x2 leg jacobian d(foot)/d(hip, knee).

    With ``leg=None`` returns a list for [front, back].
    """
    if leg is None:
        return [foot_kinematics(model, state, i) for i in (FRONT, BACK)]
    pos, vel, jac = _foot_kin(model.packed(), state.q, state.v, leg)
    i, k = LEG_JOINTS[leg]
    return pos, vel, jac[:, [i, k]].copy()


def foot_jacobian_full(model: PlanarModel, state: RobotState, leg: int) -> np.ndarray:
    return _foot_kin(model.packed(), state.q, state.v, leg)[2]


def knee_positions(model: PlanarModel, q) -> np.ndarray:
    mp = model.packed()
    q = np.asarray(q, dtype=np.float64)
    return np.array([_knee_pos(mp, q, leg) for leg in (FRONT, BACK)])


def lowest_body_point(model: PlanarModel, q) -> float:
    """Lowest z over knees and base corners (the non-foot contact points)."""
    return float(_lowest_body_point(model.packed(), np.asarray(q, dtype=np.float64)))


def contact_forces(model: PlanarModel, state: RobotState, ground: GroundModel) -> ContactReport:
    forces, inc, pen, _, _ = _contact(model.packed(), ground.packed(), state.q, state.v, state.anchors)
    return ContactReport(in_contact=inc, force=forces, penetration=pen)


def mass_matrix(model: PlanarModel, q) -> np.ndarray:
    return _crba(model.packed(), np.asarray(q, dtype=np.float64))


def bias_forces(model: PlanarModel, q, v) -> np.ndarray:
    """Coriolis, centrifugal and gravity terms h(q, v)."""
    return _rnea(model.packed(), np.asarray(q, dtype=np.float64),
                 np.asarray(v, dtype=np.float64), np.zeros(NQ), True)


def inverse_dynamics(model: PlanarModel, q, v, a) -> np.ndarray:
    return _rnea(model.packed(), *(np.asarray(x, dtype=np.float64) for x in (q, v, a)), True)


def forward_dynamics(model: PlanarModel, state: RobotState, joint_torques, ground: GroundModel) -> np.ndarray:
    tau = np.asarray(joint_torques, dtype=np.float64).reshape(4)
    try:
        a, *_ = _accel(model.packed(), ground.packed(), state.q, state.v, state.anchors, tau)
    except ValueError as e:
        raise SimulationError(str(e)) from None
    return a


def step(model: PlanarModel, state: RobotState, joint_torques, ground: GroundModel,
         dt: float, bound: float = 1e6) -> RobotState:
    """One semi-implicit Euler step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    tau = np.asarray(joint_torques, dtype=np.float64).reshape(4)
    try:
        q, v, anchors, _, _ = _euler(model.packed(), ground.packed(), state.q, state.v,
                                     state.anchors, tau, dt)
    except ValueError as e:
        raise SimulationError(str(e)) from None
    if not (np.all(np.abs(q) <= bound) and np.all(np.abs(v) <= bound)):
        raise SimulationError(f"state blow-up at t={state.t + dt:.4f}")
    return RobotState(q=q, v=v, t=state.t + dt, anchors=anchors)


def mechanical_energy(model: PlanarModel, state: RobotState, ground: GroundModel) -> float:
    """Kinetic + gravitational + energy stored in contact and joint-limit springs."""
    mp = model.packed()
    q, v = state.q, state.v
    ke = 0.5 * v @ _crba(mp, q) @ v
    # gravity potential equals z-integral of the static gravity load
    pe = 0.0
    for m, zc in _body_com_heights(model, q):
        pe += m * model.gravity * zc
    springs = 0.0
    for leg in (FRONT, BACK):
        pos, _, _ = _foot_kin(mp, q, v, leg)
        d = ground.height - pos[1]
        if d > 0:
            springs += 0.5 * ground.contact_stiffness * d * d
            a = state.anchors[leg]
            if not np.isnan(a):
                springs += 0.5 * ground.tangential_stiffness * (pos[0] - a) ** 2
    for j in range(3, NQ):
        lo, hi = model.joint_lower[j - 3], model.joint_upper[j - 3]
        over = max(0.0, q[j] - hi) + max(0.0, lo - q[j])
        springs += 0.5 * model.limit_stiffness * over * over
    return float(ke + pe + springs)


def _body_com_heights(model: PlanarModel, q):
    x, z, th = q[0], q[1], q[2]
    out = [(model.base_mass, z)]
    for leg, hx in ((FRONT, model.hip_front), (BACK, model.hip_back)):
        qh, qk = q[LEG_JOINTS[leg][0]], q[LEG_JOINTS[leg][1]]
        hip_z = z - hx * math.sin(th)
        p1 = th + qh
        p2 = p1 + qk
        out.append((model.upper_mass, hip_z - model.upper_com * model.upper_leg * math.cos(p1)))
        knee_z = hip_z - model.upper_leg * math.cos(p1)
        out.append((model.lower_mass, knee_z - model.lower_com * model.lower_leg * math.cos(p2)))
    return out


def com_jacobians(model: PlanarModel, q):
    """(mass, inertia, linear COM jacobian (2, 7), angular jacobian (7,)) per body.

    Written directly from the link geometry; used as an independent check on
    the recursive mass matrix.
    """
    q = np.asarray(q, dtype=np.float64)
    th = q[2]
    out = []
    jb = np.zeros((2, NQ))
    jb[0, 0] = jb[1, 1] = 1.0
    wb = np.zeros(NQ)
    wb[2] = 1.0
    out.append((model.base_mass, model.base_inertia, jb, wb))
    for leg, hx in ((FRONT, model.hip_front), (BACK, model.hip_back)):
        ih, ik = LEG_JOINTS[leg]
        p1 = th + q[ih]
        p2 = p1 + q[ik]
        dhip = np.array([-hx * math.sin(th), -hx * math.cos(th)])
        d1 = np.array([-math.cos(p1), math.sin(p1)])
        d2 = np.array([-math.cos(p2), math.sin(p2)])
        c1 = model.upper_com * model.upper_leg
        c2 = model.lower_com * model.lower_leg
        j1 = jb.copy()
        j1[:, 2] = dhip + c1 * d1
        j1[:, ih] = c1 * d1
        w1 = wb.copy()
        w1[ih] = 1.0
        j2 = jb.copy()
        j2[:, 2] = dhip + model.upper_leg * d1 + c2 * d2
        j2[:, ih] = model.upper_leg * d1 + c2 * d2
        j2[:, ik] = c2 * d2
        w2 = w1.copy()
        w2[ik] = 1.0
        out.append((model.upper_mass, model.upper_inertia, j1, w1))
        out.append((model.lower_mass, model.lower_inertia, j2, w2))
    return out


def mirrored_posture(hip: float, knee: float) -> np.ndarray:
    """Joint vector with the front leg at (hip, knee) and the back leg mirrored."""
    return np.array([hip, knee, -hip, -knee])


def standing_state(model: PlanarModel, hip: float = 0.8, knee: float = -1.6,
                   ground_height: float = 0.0, clearance: float = 0.0) -> RobotState:
    """Level base, mirrored legs, feet ``clearance`` above the ground."""
    q = np.concatenate([[0.0, 0.0, 0.0], mirrored_posture(hip, knee)])
    foot_z = _foot_kin(model.packed(), q, np.zeros(NQ), 0)[0][1]
    q[1] = ground_height + clearance - foot_z
    return RobotState(q=q, v=np.zeros(NQ))
