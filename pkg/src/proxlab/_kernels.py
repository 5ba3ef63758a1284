"""Numba kernels for the hot MPC rollout path.

The math here mirrors dynamics.state_derivative / rk4_step_raw exactly;
the kernels exist only because the SQP expert evaluates tens of batched
horizon rollouts per control step.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _deriv(x, u, n0, J, Jinv, dx):
    dx[0] = x[3]
    dx[1] = x[4]
    dx[2] = x[5]
    dx[3] = -2.0 * n0 * x[4] + u[0]
    dx[4] = 2.0 * n0 * x[3] + 3.0 * n0 * n0 * x[1] + u[1]
    dx[5] = -n0 * n0 * x[2] + u[2]
    qw, qx, qy, qz = x[6], x[7], x[8], x[9]
    wx, wy, wz = x[10], x[11], x[12]
    dx[6] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    dx[7] = 0.5 * (qw * wx + qy * wz - qz * wy)
    dx[8] = 0.5 * (qw * wy - qx * wz + qz * wx)
    dx[9] = 0.5 * (qw * wz + qx * wy - qy * wx)
    jw0 = J[0, 0] * wx + J[0, 1] * wy + J[0, 2] * wz
    jw1 = J[1, 0] * wx + J[1, 1] * wy + J[1, 2] * wz
    jw2 = J[2, 0] * wx + J[2, 1] * wy + J[2, 2] * wz
    m0 = u[3] - (wy * jw2 - wz * jw1)
    m1 = u[4] - (wz * jw0 - wx * jw2)
    m2 = u[5] - (wx * jw1 - wy * jw0)
    dx[10] = Jinv[0, 0] * m0 + Jinv[0, 1] * m1 + Jinv[0, 2] * m2
    dx[11] = Jinv[1, 0] * m0 + Jinv[1, 1] * m1 + Jinv[1, 2] * m2
    dx[12] = Jinv[2, 0] * m0 + Jinv[2, 1] * m1 + Jinv[2, 2] * m2


@njit(cache=True)
def rk4_step_kernel(x, u, dt, n0, J, Jinv, out):
    k1 = np.empty(13)
    k2 = np.empty(13)
    k3 = np.empty(13)
    k4 = np.empty(13)
    tmp = np.empty(13)
    _deriv(x, u, n0, J, Jinv, k1)
    for i in range(13):
        tmp[i] = x[i] + 0.5 * dt * k1[i]
    _deriv(tmp, u, n0, J, Jinv, k2)
    for i in range(13):
        tmp[i] = x[i] + 0.5 * dt * k2[i]
    _deriv(tmp, u, n0, J, Jinv, k3)
    for i in range(13):
        tmp[i] = x[i] + dt * k3[i]
    _deriv(tmp, u, n0, J, Jinv, k4)
    for i in range(13):
        out[i] = x[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    qn = np.sqrt(out[6] ** 2 + out[7] ** 2 + out[8] ** 2 + out[9] ** 2)
    for i in range(6, 10):
        out[i] /= qn


@njit(cache=True)
def rollout_batch(s0, U, dt, n0, J, Jinv):
    """Propagate s0 under each control sequence in U.

    s0: (13,); U: (B, Np, 6). Returns states (B, Np + 1, 13).
    """
    B, Np, _ = U.shape
    states = np.empty((B, Np + 1, 13))
    for b in range(B):
        for i in range(13):
            states[b, 0, i] = s0[i]
        for t in range(Np):
            rk4_step_kernel(states[b, t], U[b, t], dt, n0, J, Jinv, states[b, t + 1])
    return states
