"""Relative orbital and attitude dynamics for a deputy spacecraft.

Translational motion follows the linearized relative-motion equations about
a circular chief orbit; rotation follows quaternion kinematics plus the
rigid-body Euler equation. The full relative state is 13 channels in fixed
order [r(3), v(3), q(4 scalar-first), omega(3)] and is propagated with
classical RK4, renormalizing the quaternion after every step.

Quaternions are plain length-4 numpy arrays [w, x, y, z] (Hamilton
convention). q and -q encode the same attitude; every error function here
is sign-invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MU_EARTH = 3.986004418e14  # m^3/s^2

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


# --- quaternion algebra ---

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("degenerate quaternion (zero norm)")
    return q / n


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_inv(q):
    """Inverse of a unit quaternion (its conjugate)."""
    return quat_conj(quat_normalize(q))


def quat_mul(a, b):
    """Hamilton product a (x) b, scalar-first, broadcasting over leading axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_rotmat(q):
    """Rotation matrix R(q) rotating body-frame vectors into the reference frame."""
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_rotmat(R):
    """Shepperd's method; returns a unit scalar-first quaternion."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return quat_normalize(q)


def quat_error_angle(q, q_ref, norm_tol=1e-6):
    """Geodesic attitude error alpha = 2*arccos|Re(q (x) q_ref^-1)|, in [0, pi].

    Sign-invariant in both arguments (double cover).
    """
    q = np.asarray(q, dtype=float)
    q_ref = np.asarray(q_ref, dtype=float)
    for name, quat in (("q", q), ("q_ref", q_ref)):
        n = np.linalg.norm(quat, axis=-1)
        if np.any(np.abs(n - 1.0) > norm_tol):
            raise ValueError(f"{name} is not unit-norm (|norm-1| > {norm_tol})")
    # For unit quaternions Re(q (x) q_ref^-1) is just the 4-vector dot product.
    c = np.abs(np.sum(q * q_ref, axis=-1))
    return 2.0 * np.arccos(np.clip(c, -1.0, 1.0))


def quat_to_rotvec(q):
    """Rotation vector (axis * angle) of a unit quaternion, angle in [0, pi]."""
    q = quat_normalize(q)
    q = np.where(q[..., :1] < 0, -q, q)
    w = np.clip(q[..., 0], -1.0, 1.0)
    angle = 2.0 * np.arccos(w)
    s = np.sqrt(np.maximum(1.0 - w * w, 0.0))
    scale = np.where(s > 1e-12, angle / np.where(s > 1e-12, s, 1.0), 2.0)
    return q[..., 1:] * scale[..., None]


# --- configuration ---

@dataclass(frozen=True)
class OrbitConfig:
    """Circular chief orbit and integration step."""

    mu: float = MU_EARTH
    r_orbit: float = 7.5000e6  # m, chosen so n0 ~= 9.720e-4 rad/s
    dt: float = 0.1

    def __post_init__(self):
        if self.r_orbit <= 0 or self.mu <= 0:
            raise ValueError("mu and r_orbit must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def n0(self) -> float:
        """Mean motion sqrt(mu / r^3), rad/s."""
        return float(np.sqrt(self.mu / self.r_orbit**3))


@dataclass(frozen=True)
class SpacecraftParams:
    """Deputy mass/inertia and per-axis actuator bounds."""

    mass: float = 100.0
    inertia: np.ndarray = field(default_factory=lambda: np.diag([10.0, 12.0, 14.0]))
    thrust_limit: float = 0.2  # N/kg per axis
    torque_limit: float = 8.0  # N*m per axis

    def __post_init__(self):
        J = np.asarray(self.inertia, dtype=float)
        if J.shape != (3, 3) or not np.allclose(J, J.T):
            raise ValueError("inertia must be a symmetric 3x3 matrix")
        if np.any(np.linalg.eigvalsh(J) <= 0):
            raise ValueError("inertia must be positive definite")
        object.__setattr__(self, "inertia", J)
        object.__setattr__(self, "inertia_inv", np.linalg.inv(J))


# --- state containers ---

@dataclass(frozen=True)
class RelativeState:
    """13-channel relative state [r(3), v(3), q(4), omega(3)] of deputy vs chief."""

    r: np.ndarray
    v: np.ndarray
    q: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).reshape(4))
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.v, self.q, self.omega])

    @staticmethod
    def from_vector(x) -> "RelativeState":
        x = np.asarray(x, dtype=float).reshape(13)
        return RelativeState(x[0:3], x[3:6], x[6:10], x[10:13])

    @staticmethod
    def zero() -> "RelativeState":
        return RelativeState(np.zeros(3), np.zeros(3), IDENTITY_QUAT.copy(), np.zeros(3))


@dataclass(frozen=True)
class ControlInput:
    """Thrust acceleration (N/kg, LVLH) and body torque (N*m)."""

    f: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "f", np.asarray(self.f, dtype=float).reshape(3))
        object.__setattr__(self, "tau", np.asarray(self.tau, dtype=float).reshape(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.f, self.tau])

    @staticmethod
    def from_vector(u) -> "ControlInput":
        u = np.asarray(u, dtype=float).reshape(6)
        return ControlInput(u[0:3], u[3:6])

    @staticmethod
    def zero() -> "ControlInput":
        return ControlInput(np.zeros(3), np.zeros(3))


# --- vector field ---

def cw_accel(r, v, f, n0):
    """Translational acceleration of the linearized relative-motion equations.

    xdd = -2 n0 yd + f_x
    ydd =  2 n0 xd + 3 n0^2 y + f_y
    zdd = -n0^2 z + f_z
    """
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    f = np.asarray(f, dtype=float)
    a = np.empty_like(np.broadcast_arrays(r, v, f)[0])
    a[..., 0] = -2.0 * n0 * v[..., 1] + f[..., 0]
    a[..., 1] = 2.0 * n0 * v[..., 0] + 3.0 * n0 * n0 * r[..., 1] + f[..., 1]
    a[..., 2] = -n0 * n0 * r[..., 2] + f[..., 2]
    return a


def cw_derivative(state: RelativeState, f, cfg: OrbitConfig) -> np.ndarray:
    """Translational acceleration for a RelativeState under thrust f."""
    return cw_accel(state.r, state.v, f, cfg.n0)


def gravity_accel_raw(r, v, n0):
    """Relative 'gravitational' acceleration: the unforced part of cw_accel."""
    return cw_accel(r, v, np.zeros(3), n0)


def gravity_accel(state: RelativeState, cfg: OrbitConfig) -> np.ndarray:
    return gravity_accel_raw(state.r, state.v, cfg.n0)


def quat_kinematics(q, omega):
    """qdot = 0.5 * Omega(omega) q for scalar-first body rates."""
    q = np.asarray(q, dtype=float)
    w = np.asarray(omega, dtype=float)
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    return 0.5 * np.stack(
        [
            -qx * wx - qy * wy - qz * wz,
            qw * wx + qy * wz - qz * wy,
            qw * wy - qx * wz + qz * wx,
            qw * wz + qx * wy - qy * wx,
        ],
        axis=-1,
    )


def euler_rotational(omega, tau, params: SpacecraftParams):
    """omegadot = J^-1 (tau - omega x (J omega))."""
    w = np.asarray(omega, dtype=float)
    tau = np.asarray(tau, dtype=float)
    Jw = w @ params.inertia.T
    gyro = np.cross(w, Jw)
    return (tau - gyro) @ params.inertia_inv.T


def attitude_derivative(q, omega, tau, params: SpacecraftParams):
    """(qdot, omegadot) from quaternion kinematics and the Euler equation."""
    return quat_kinematics(q, omega), euler_rotational(omega, tau, params)


def state_derivative(x, u, n0, params: SpacecraftParams):
    """Full 13-channel vector field; x (..., 13), u (..., 6)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    dx = np.empty_like(x)
    dx[..., 0:3] = x[..., 3:6]
    dx[..., 3:6] = cw_accel(x[..., 0:3], x[..., 3:6], u[..., 0:3], n0)
    dx[..., 6:10] = quat_kinematics(x[..., 6:10], x[..., 10:13])
    dx[..., 10:13] = euler_rotational(x[..., 10:13], u[..., 3:6], params)
    return dx


def rk4_step_raw(x, u, dt, n0, params: SpacecraftParams):
    """One classical RK4 step on (..., 13) states; quaternion renormalized."""
    k1 = state_derivative(x, u, n0, params)
    k2 = state_derivative(x + 0.5 * dt * k1, u, n0, params)
    k3 = state_derivative(x + 0.5 * dt * k2, u, n0, params)
    k4 = state_derivative(x + dt * k3, u, n0, params)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    qn = np.linalg.norm(out[..., 6:10], axis=-1, keepdims=True)
    out[..., 6:10] /= qn
    return out


def rk4_step(
    state: RelativeState, u: ControlInput, cfg: OrbitConfig, params: SpacecraftParams
) -> RelativeState:
    out = rk4_step_raw(state.as_vector(), u.as_vector(), cfg.dt, cfg.n0, params)
    if not np.all(np.isfinite(out)):
        raise RuntimeError("integration diverged (non-finite state)")
    return RelativeState.from_vector(out)


# --- ECI <-> relative-frame conversion (initialization utilities) ---

def lvlh_basis(r_c, v_c):
    """Rows of the ECI->LVLH rotation: radial, transverse, orbit-normal."""
    r_c = np.asarray(r_c, dtype=float)
    v_c = np.asarray(v_c, dtype=float)
    rn = np.linalg.norm(r_c)
    if rn < 1e-9:
        raise ValueError("chief position has zero radius")
    x_hat = r_c / rn
    h = np.cross(r_c, v_c)
    z_hat = h / np.linalg.norm(h)
    y_hat = np.cross(z_hat, x_hat)
    return np.vstack([x_hat, y_hat, z_hat])


def relative_from_absolute(r_c, v_c, r_d, v_d, q_c, q_d, omega_c, omega_d) -> RelativeState:
    """Build the relative state from ECI positions/velocities and attitudes.

    The chief body frame is taken coincident with LVLH, so with q_c identity
    and omega_c zero the outputs are the deputy's LVLH quantities directly.
    """
    R = lvlh_basis(r_c, v_c)
    r_rel = R @ (np.asarray(r_d, float) - np.asarray(r_c, float))
    rn = np.linalg.norm(np.asarray(r_c, float))
    n0 = np.linalg.norm(np.cross(r_c, v_c)) / rn**2
    omega_lvlh = np.array([0.0, 0.0, n0])
    v_rel = R @ (np.asarray(v_d, float) - np.asarray(v_c, float)) - np.cross(omega_lvlh, r_rel)
    q_rel = quat_normalize(quat_mul(quat_inv(q_c), q_d))
    omega_rel = np.asarray(omega_d, float) - np.asarray(omega_c, float)
    return RelativeState(r_rel, v_rel, q_rel, omega_rel)


def absolute_from_relative(state: RelativeState, r_c, v_c, q_c, omega_c):
    """Inverse of relative_from_absolute; returns (r_d, v_d, q_d, omega_d)."""
    R = lvlh_basis(r_c, v_c)
    rn = np.linalg.norm(np.asarray(r_c, float))
    n0 = np.linalg.norm(np.cross(r_c, v_c)) / rn**2
    omega_lvlh = np.array([0.0, 0.0, n0])
    r_d = np.asarray(r_c, float) + R.T @ state.r
    v_d = np.asarray(v_c, float) + R.T @ (state.v + np.cross(omega_lvlh, state.r))
    q_d = quat_normalize(quat_mul(q_c, state.q))
    omega_d = state.omega + np.asarray(omega_c, float)
    return r_d, v_d, q_d, omega_d


# --- initial-condition sampling ---

def random_unit_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniform on SO(3) via the subgroup-algorithm construction."""
    u1, u2, u3 = rng.random(3)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    return np.array(
        [
            a * np.sin(2 * np.pi * u2),
            a * np.cos(2 * np.pi * u2),
            b * np.sin(2 * np.pi * u3),
            b * np.cos(2 * np.pi * u3),
        ]
    )


def sample_initial_state(
    rng: np.random.Generator,
    dist_range=(75.0, 125.0),
) -> RelativeState:
    """Random initial relative state: |r| in dist_range with uniform direction,
    v = 0, uniform random unit quaternion, omega components uniform in [0, 1).
    """
    d = rng.uniform(*dist_range)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    q = random_unit_quaternion(rng)
    omega = rng.random(3)
    return RelativeState(d * direction, np.zeros(3), q, omega)
