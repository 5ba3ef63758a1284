"""Receding-horizon MPC expert for rendezvous and docking.

The expert solves a box-constrained nonlinear program at every control
step: quadratic stage/terminal costs on the 13-channel tracking error and
the 6-channel wrench, subject to the discrete RK4 transition. The solver
is single-shooting Gauss-Newton (an SQP specialization for least-squares
objectives) with finite-difference Jacobians of the horizon rollout and a
backtracking, box-clamped line search, warm-started across steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dyn
from ._kernels import rollout_batch
from .dynamics import (
    ControlInput,
    OrbitConfig,
    RelativeState,
    SpacecraftParams,
    quat_inv,
    quat_mul,
    quat_normalize,
)

DEFAULT_Q = np.array([1.0, 1, 1, 10, 10, 10, 50, 50, 50, 50, 20, 20, 20])
DEFAULT_R = np.array([10.0, 10, 10, 0.1, 0.1, 0.1])


@dataclass(frozen=True)
class TargetState:
    """Docking configuration: port offset and attitude, zero v and omega."""

    # pure radial offset: an equilibrium of the relative translational
    # dynamics, so holding at dock needs no steady thrust
    r_hat: np.ndarray = field(default_factory=lambda: np.array([2.0, 0.0, 0.0]))
    q_hat: np.ndarray = field(default_factory=lambda: dyn.IDENTITY_QUAT.copy())

    def __post_init__(self):
        object.__setattr__(self, "r_hat", np.asarray(self.r_hat, dtype=float).reshape(3))
        object.__setattr__(self, "q_hat", quat_normalize(self.q_hat))

    @property
    def v_hat(self) -> np.ndarray:
        return np.zeros(3)

    @property
    def omega_hat(self) -> np.ndarray:
        return np.zeros(3)

    def as_state(self) -> RelativeState:
        return RelativeState(self.r_hat, np.zeros(3), self.q_hat, np.zeros(3))


@dataclass(frozen=True)
class MpcConfig:
    """Horizon lengths, cost weights, bounds, and SQP iteration budget."""

    Np: int = 30
    Nc: int = 10
    Q: np.ndarray = field(default_factory=lambda: DEFAULT_Q.copy())
    R: np.ndarray = field(default_factory=lambda: DEFAULT_R.copy())
    P: np.ndarray = field(default_factory=lambda: 20.0 * DEFAULT_Q)
    u_min: np.ndarray = field(default_factory=lambda: np.array([-0.2] * 3 + [-8.0] * 3))
    u_max: np.ndarray = field(default_factory=lambda: np.array([0.2] * 3 + [8.0] * 3))
    sqp_iters: int = 3
    step_tol: float = 1e-9

    def __post_init__(self):
        for name in ("Q", "R", "P", "u_min", "u_max"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.Nc > self.Np or self.Nc < 1:
            raise ValueError("require 1 <= Nc <= Np")
        if np.any(self.Q < 0) or np.any(self.P < 0):
            raise ValueError("Q and P must be positive semidefinite (nonnegative diagonals)")
        if np.any(self.R <= 0):
            raise ValueError("R must be positive definite")
        if np.any(self.u_min >= self.u_max):
            raise ValueError("u_min must be elementwise below u_max")


def error_vector(states, target: TargetState):
    """13-channel tracking error [r - r_hat, v, e_q - identity, omega].

    e_q = q_hat^-1 (x) q, flipped to the w >= 0 hemisphere so q and -q give
    the same error. Accepts (..., 13) stacked states.
    """
    x = np.asarray(states, dtype=float)
    e = np.empty_like(x)
    e[..., 0:3] = x[..., 0:3] - target.r_hat
    e[..., 3:6] = x[..., 3:6]
    eq = quat_mul(quat_inv(target.q_hat), x[..., 6:10])
    eq = np.where(eq[..., :1] < 0, -eq, eq)
    e[..., 6] = eq[..., 0] - 1.0
    e[..., 7:10] = eq[..., 1:4]
    e[..., 10:13] = x[..., 10:13]
    return e


def _held_controls(u_seq, Np):
    """(B, Nc, 6) decision controls -> (B, Np, 6) with the last value held."""
    u_seq = np.asarray(u_seq, dtype=float)
    B, Nc, _ = u_seq.shape
    if Nc == Np:
        return u_seq
    tail = np.repeat(u_seq[:, -1:, :], Np - Nc, axis=1)
    return np.concatenate([u_seq, tail], axis=1)


def _rollout(s0, u_full, cfg: OrbitConfig, params: SpacecraftParams):
    return rollout_batch(
        np.ascontiguousarray(s0, dtype=float),
        np.ascontiguousarray(u_full, dtype=float),
        cfg.dt,
        cfg.n0,
        params.inertia,
        params.inertia_inv,
    )


def _batch_cost(states, u_full, mpc: MpcConfig, target: TargetState):
    """J per batch element from rolled-out states (B, Np+1, 13)."""
    e = error_vector(states, target)
    stage = np.einsum("btk,k,btk->b", e[:, :-1], mpc.Q, e[:, :-1])
    term = np.einsum("bk,k,bk->b", e[:, -1], mpc.P, e[:, -1])
    ctrl = np.einsum("btk,k,btk->b", u_full, mpc.R, u_full)
    return stage + term + ctrl


def trajectory_cost(
    s0,
    u_seq,
    cfg: OrbitConfig,
    params: SpacecraftParams,
    mpc: MpcConfig,
    target: TargetState,
) -> float:
    """Horizon cost of one control sequence (length Nc, held to Np)."""
    u_full = _held_controls(np.asarray(u_seq, float)[None], mpc.Np)
    states = _rollout(np.asarray(s0, float).reshape(13), u_full, cfg, params)
    if not np.all(np.isfinite(states)):
        raise RuntimeError("horizon diverged (non-finite rollout)")
    return float(_batch_cost(states, u_full, mpc, target)[0])


def _batch_residuals(states, u_full, mpc: MpcConfig, target: TargetState):
    """Least-squares residuals; ||res||^2 = J minus the constant e_0 term."""
    e = error_vector(states, target)
    sq = np.sqrt(mpc.Q)
    sr = np.sqrt(mpc.R)
    sp = np.sqrt(mpc.P)
    B = states.shape[0]
    parts = [
        (e[:, 1:-1] * sq).reshape(B, -1),
        (u_full * sr).reshape(B, -1),
        e[:, -1] * sp,
    ]
    return np.concatenate(parts, axis=1)


@dataclass
class SqpSolution:
    u_seq: np.ndarray  # (Nc, 6)
    cost_history: list
    converged: bool
    line_search_failed: bool


def solve_receding_horizon(
    s0,
    target: TargetState,
    cfg: OrbitConfig,
    params: SpacecraftParams,
    mpc: MpcConfig,
    warm_start=None,
    fd_eps: float = 1e-6,
) -> SqpSolution:
    """Gauss-Newton SQP over the Nc x 6 control sequence with box clamping.

    The per-iteration cost is non-increasing by construction: a candidate
    step is only accepted if it does not increase the cost.
    """
    s0 = np.asarray(s0, dtype=float).reshape(13)
    nvar = mpc.Nc * 6
    if warm_start is None:
        U = np.zeros((mpc.Nc, 6))
    else:
        U = np.clip(np.asarray(warm_start, dtype=float).reshape(mpc.Nc, 6), mpc.u_min, mpc.u_max)

    alphas = np.array([1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125])
    cost_history = []
    converged = False
    ls_failed = False

    def eval_batch(U_batch):
        u_full = _held_controls(U_batch, mpc.Np)
        states = _rollout(s0, u_full, cfg, params)
        return states, u_full

    for _ in range(mpc.sqp_iters):
        # residuals at U and at the 6*Nc forward-difference perturbations
        U_fd = np.repeat(U[None], nvar + 1, axis=0)
        U_fd[1:] += fd_eps * np.eye(nvar).reshape(nvar, mpc.Nc, 6)
        states, u_full = eval_batch(U_fd)
        if not np.all(np.isfinite(states)):
            raise RuntimeError("horizon diverged (non-finite rollout)")
        res = _batch_residuals(states, u_full, mpc, target)
        cost0 = float(np.sum(res[0] ** 2))
        if not cost_history:
            cost_history.append(cost0)
        Jac = (res[1:] - res[0]) / fd_eps  # (nvar, m)
        g = Jac @ res[0]
        H = Jac @ Jac.T
        # Projected Gauss-Newton: freeze variables pinned at a bound whose
        # gradient points outward, solve the reduced normal equations.
        u_flat = U.ravel()
        lo = np.tile(mpc.u_min, mpc.Nc)
        hi = np.tile(mpc.u_max, mpc.Nc)
        pinned = ((u_flat <= lo + 1e-12) & (g > 0)) | ((u_flat >= hi - 1e-12) & (g < 0))
        free = ~pinned
        delta = np.zeros(nvar)
        if free.any():
            Hf = H[np.ix_(free, free)]
            nf = int(free.sum())
            lam = 1e-9 * (1.0 + np.trace(Hf) / nf)
            try:
                delta[free] = -np.linalg.solve(Hf + lam * np.eye(nf), g[free])
            except np.linalg.LinAlgError:
                ls_failed = True
                break
        if np.linalg.norm(delta) < mpc.step_tol:
            converged = True
            break

        cand = np.clip(U[None] + alphas[:, None, None] * delta.reshape(1, mpc.Nc, 6),
                       mpc.u_min, mpc.u_max)
        c_states, c_full = eval_batch(cand)
        costs = np.where(
            np.all(np.isfinite(c_states.reshape(len(alphas), -1)), axis=1),
            np.sum(_batch_residuals(np.nan_to_num(c_states), c_full, mpc, target) ** 2, axis=1),
            np.inf,
        )
        best = int(np.argmin(costs))
        if costs[best] <= cost0:
            step = cand[best] - U
            U = cand[best]
            cost_history.append(float(costs[best]))
            if np.linalg.norm(step) < mpc.step_tol:
                converged = True
                break
        elif costs[best] <= cost0 * (1.0 + 1e-6) + 1e-14:
            # Stalled: either at the FD-noise floor or pinned against active
            # box constraints (the clipped step is a near-no-op). Converged,
            # not a failure.
            converged = True
            break
        else:
            ls_failed = True
            break

    return SqpSolution(U, cost_history, converged, ls_failed)


class MpcController:
    """Stateful receding-horizon controller: returns the first control of
    the current SQP solution and shifts it as the next warm start."""

    def __init__(
        self,
        target: TargetState,
        cfg: OrbitConfig,
        params: SpacecraftParams,
        mpc: MpcConfig | None = None,
    ):
        self.target = target
        self.cfg = cfg
        self.params = params
        self.mpc = mpc if mpc is not None else MpcConfig()
        self.reset()

    def reset(self):
        self._warm = np.zeros((self.mpc.Nc, 6))
        self.failure_count = 0
        self.step_count = 0

    def step(self, observed: RelativeState) -> ControlInput:
        sol = solve_receding_horizon(
            observed.as_vector(), self.target, self.cfg, self.params, self.mpc,
            warm_start=self._warm,
        )
        if sol.line_search_failed:
            self.failure_count += 1
        self.step_count += 1
        self._warm = np.vstack([sol.u_seq[1:], sol.u_seq[-1:]])
        return ControlInput.from_vector(sol.u_seq[0])


# --- observation noise ---

@dataclass(frozen=True)
class NoiseConfig:
    """Zero-mean Gaussian state-observation noise; attitude noise is a small
    random rotation (per-axis rotation-vector std, degrees)."""

    sigma_r: float = 0.05
    sigma_v: float = 0.005
    sigma_omega: float = 0.001
    sigma_att_deg: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        if min(self.sigma_r, self.sigma_v, self.sigma_omega, self.sigma_att_deg) < 0:
            raise ValueError("noise stds must be nonnegative")

    def disabled(self) -> "NoiseConfig":
        return replace(self, enabled=False)


def inject_noise(state: RelativeState, noise: NoiseConfig, rng: np.random.Generator) -> RelativeState:
    if not noise.enabled:
        return state
    r = state.r + rng.normal(0.0, noise.sigma_r, 3) if noise.sigma_r > 0 else state.r.copy()
    v = state.v + rng.normal(0.0, noise.sigma_v, 3) if noise.sigma_v > 0 else state.v.copy()
    w = state.omega + rng.normal(0.0, noise.sigma_omega, 3) if noise.sigma_omega > 0 else state.omega.copy()
    q = state.q
    if noise.sigma_att_deg > 0:
        rotvec = rng.normal(0.0, np.deg2rad(noise.sigma_att_deg), 3)
        angle = np.linalg.norm(rotvec)
        if angle > 0:
            dq = dyn.quat_from_axis_angle(rotvec / angle, angle)
            q = quat_normalize(quat_mul(q, dq))
    return RelativeState(r, v, q, w)
