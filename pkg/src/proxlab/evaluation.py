"""Closed-loop evaluation: episode runner, metrics, robustness, ablations.

Two execution modes:

* wrench mode (MPC, PID): the policy emits a ControlInput each step and the
  true state propagates through the RK4 integrator.
* commanded-state mode (sequence policy, BC): the policy's predicted next
  state (after temporal aggregation, quaternion renormalized) becomes the
  next achieved state directly — the "low-level servo" abstraction. The
  applied wrench is reconstructed afterwards by central differences for
  the energy metric.

Metrics per episode: CS (convergence step), SEC (specific energy
consumption), TTP/TRP (terminal translational/rotational precision,
averaged into ATTP/ATRP), and ESR (episodic stepwise reward). All suites
run the same five seeded initial states.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aggregation import AggregationBuffer, aggregate_action
from .dynamics import (
    OrbitConfig,
    RelativeState,
    SpacecraftParams,
    gravity_accel_raw,
    quat_error_angle,
    quat_inv,
    quat_mul,
    quat_normalize,
    quat_to_rotvec,
    rk4_step,
    sample_initial_state,
)
from .mpc import MpcConfig, MpcController, NoiseConfig, TargetState, inject_noise

log = logging.getLogger(__name__)

EVAL_SEEDS = (3, 10, 15, 20, 26)
DEFAULT_STEPS = 2500

# observation disturbance for the robustness protocol (stronger than the
# demonstration noise)
ROBUSTNESS_NOISE = NoiseConfig(sigma_r=0.1, sigma_v=0.01, sigma_omega=0.002,
                               sigma_att_deg=0.5)

METRIC_NAMES = ("CS", "SEC", "TTP", "TRP", "ESR")


@dataclass
class EpisodeRecord:
    """One closed-loop run; states are the achieved (true) states."""

    states: np.ndarray  # (N+1, 13)
    observed: np.ndarray  # (N+1, 13)
    controls: np.ndarray | None  # (N, 6) commanded wrench, wrench mode only
    policy_id: str
    seed: int
    mode: str  # "wrench" | "commanded"
    diverged: bool = False

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1


# --- per-episode policy runners ---

class MpcRunner:
    mode = "wrench"

    def __init__(self, target: TargetState, orbit: OrbitConfig, params: SpacecraftParams,
                 mpc_cfg: MpcConfig | None = None):
        self._controller = MpcController(target, orbit, params, mpc_cfg)

    def step(self, observed: RelativeState):
        return self._controller.step(observed)


class PidRunner:
    mode = "wrench"

    def __init__(self, target: TargetState, dt: float, pid_cfg=None):
        from .baselines import PidController
        self._controller = PidController(target, dt, pid_cfg)

    def step(self, observed: RelativeState):
        return self._controller.step(observed)


class SequenceRunner:
    """Commanded-state execution of the sequence policy, with optional
    temporal aggregation over the prediction buffer."""

    mode = "commanded"

    def __init__(self, policy, kappa: float | None = None, use_aggregation: bool = True):
        self.policy = policy
        self.kappa = policy.config.kappa if kappa is None else kappa
        self.use_aggregation = use_aggregation
        self._buffer = AggregationBuffer(policy.config.n)
        self._t = 0

    def step(self, observed: RelativeState):
        self._t += 1
        frames = self.policy.predict(observed.as_vector())
        self._buffer.add(self._t, frames)
        if self.use_aggregation:
            return aggregate_action(self._buffer, self._t, self.kappa)
        return frames[0]


class BcRunner:
    mode = "commanded"

    def __init__(self, policy):
        self.policy = policy

    def step(self, observed: RelativeState):
        return self.policy.predict(observed.as_vector())


class EchoRunner:
    """Echoes the observation back as the commanded state (test fixture)."""

    mode = "commanded"

    def step(self, observed: RelativeState):
        return observed.as_vector()


def run_episode(runner, initial_state: RelativeState, steps: int, noise: NoiseConfig,
                rng, orbit: OrbitConfig, params: SpacecraftParams,
                policy_id: str = "", seed: int = -1) -> EpisodeRecord:
    """Closed loop for `steps` control intervals; a fresh runner per episode."""
    states = np.empty((steps + 1, 13))
    observed = np.empty((steps + 1, 13))
    controls = np.empty((steps, 6)) if runner.mode == "wrench" else None
    state = initial_state
    states[0] = state.as_vector()
    diverged = False
    t_done = steps
    for t in range(steps):
        obs = inject_noise(state, noise, rng)
        observed[t] = obs.as_vector()
        out = runner.step(obs)
        if runner.mode == "wrench":
            controls[t] = out.as_vector()
            try:
                state = rk4_step(state, out, orbit, params)
            except RuntimeError:
                diverged = True
        else:
            vec = np.asarray(out, dtype=np.float64).copy()
            if not np.all(np.isfinite(vec)):
                diverged = True
            else:
                vec[6:10] = quat_normalize(vec[6:10])
                state = RelativeState.from_vector(vec)
        if diverged:
            log.warning("episode %s/%d diverged at step %d", policy_id, seed, t + 1)
            t_done = t
            break
        states[t + 1] = state.as_vector()
    observed[t_done] = inject_noise(state, noise, rng).as_vector()
    end = t_done + 1
    return EpisodeRecord(states[:end].copy(), observed[:end].copy(),
                         controls[:t_done].copy() if controls is not None else None,
                         policy_id, seed, runner.mode, diverged)


# --- wrench reconstruction and energy ---

def reconstruct_wrench(record: EpisodeRecord, orbit: OrbitConfig,
                       params: SpacecraftParams):
    """Thrust force (N) and torque (N.m) at interior timesteps 1..N-1.

    Central differences on the achieved velocities/body rates; the
    gravitational part of the relative dynamics is subtracted before
    multiplying by the deputy mass.
    """
    s = record.states
    if s.shape[0] < 3:
        raise ValueError("need at least 3 states to reconstruct the wrench")
    dt = orbit.dt
    r, v, omega = s[:, 0:3], s[:, 3:6], s[:, 10:13]
    v_dot = (v[2:] - v[:-2]) / (2.0 * dt)
    w_dot = (omega[2:] - omega[:-2]) / (2.0 * dt)
    acc_g = np.stack([gravity_accel_raw(r[t], v[t], orbit.n0)
                      for t in range(1, s.shape[0] - 1)])
    force = params.mass * (v_dot - acc_g)
    w_mid = omega[1:-1]
    torque = w_dot @ params.inertia.T + np.cross(w_mid, w_mid @ params.inertia.T)
    return force, torque


def _attitude_increments(q: np.ndarray) -> np.ndarray:
    """Rotation vectors of q_t^-1 (x) q_{t+1}, shape (len(q)-1, 3)."""
    return quat_to_rotvec(quat_mul(quat_inv(q[:-1]), q[1:]))


def episode_energy(record: EpisodeRecord, orbit: OrbitConfig, params: SpacecraftParams):
    """(W_F, W_tau, SEC): L1 work sums and their per-step average.

    Wrench mode uses the commanded wrench (specific force scaled by the
    deputy mass); commanded-state mode uses the central-difference
    reconstruction, which only covers interior timesteps.
    """
    s = record.states
    r, q = s[:, 0:3], s[:, 6:10]
    if record.mode == "wrench":
        force = params.mass * record.controls[:, 0:3]
        torque = record.controls[:, 3:6]
        dr = r[1:] - r[:-1]
        dtheta = _attitude_increments(q)
    else:
        force, torque = reconstruct_wrench(record, orbit, params)
        dr = r[2:] - r[1:-1]
        dtheta = _attitude_increments(q[1:])
    w_f = float(np.sum(np.abs(force * dr)))
    w_tau = float(np.sum(np.abs(torque * dtheta)))
    sec = (w_f + w_tau) / record.n_steps
    return w_f, w_tau, sec


# --- error metrics ---

def step_errors(states: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Per-state error ||dr|| + ||dv|| + alpha(q, q_ref)^2 + ||dw||."""
    dr = np.linalg.norm(states[:, 0:3] - ref[0:3], axis=1)
    dv = np.linalg.norm(states[:, 3:6] - ref[3:6], axis=1)
    dw = np.linalg.norm(states[:, 10:13] - ref[10:13], axis=1)
    alpha = np.array([quat_error_angle(qi, ref[6:10]) for qi in states[:, 6:10]])
    return dr + dv + alpha**2 + dw


def convergence_step(record: EpisodeRecord, window: int = 20) -> int:
    """1-based start of the earliest `window`-step span with minimal mean
    error relative to the final achieved state."""
    states = record.states[1:]
    n = states.shape[0]
    if n < window:
        raise ValueError(f"need at least {window} steps, episode has {n}")
    errs = step_errors(states, record.states[-1])
    csum = np.concatenate([[0.0], np.cumsum(errs)])
    means = (csum[window:] - csum[:-window]) / window
    return int(np.argmin(means)) + 1


def terminal_precision(record: EpisodeRecord, target: TargetState):
    """(TTP, TRP) of the final achieved state."""
    final = record.states[-1]
    ttp = (np.linalg.norm(final[0:3] - target.r_hat)
           + np.linalg.norm(final[3:6] - target.v_hat))
    trp = (quat_error_angle(final[6:10], target.q_hat) ** 2
           + np.linalg.norm(final[10:13] - target.omega_hat))
    return float(ttp), float(trp)


def episodic_stepwise_reward(record: EpisodeRecord, target: TargetState) -> float:
    """Mean over steps of the negated error against the target."""
    errs = step_errors(record.states[1:], target.as_state().as_vector())
    return float(-np.mean(errs))


def episode_metrics(record: EpisodeRecord, target: TargetState, orbit: OrbitConfig,
                    params: SpacecraftParams) -> dict:
    w_f, w_tau, sec = episode_energy(record, orbit, params)
    ttp, trp = terminal_precision(record, target)
    return {
        "CS": convergence_step(record),
        "SEC": sec,
        "W_F": w_f,
        "W_tau": w_tau,
        "TTP": ttp,
        "TRP": trp,
        "ESR": episodic_stepwise_reward(record, target),
        "diverged": record.diverged,
        "seed": record.seed,
    }


# --- suite ---

def _aggregate(episodes: list) -> dict:
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([e[name] for e in episodes], dtype=float)
        out[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
    # suite-level names for the averaged terminal precisions
    out["ATTP"] = out.pop("TTP")
    out["ATRP"] = out.pop("TRP")
    return out


def evaluate_suite(factories: dict, noise: NoiseConfig, seeds=EVAL_SEEDS,
                   steps: int = DEFAULT_STEPS, orbit: OrbitConfig | None = None,
                   params: SpacecraftParams | None = None,
                   target: TargetState | None = None,
                   series_dir=None) -> dict:
    """Run every policy factory on the same seeded initial states.

    `factories` maps policy name -> zero-argument callable returning a fresh
    per-episode runner. Returns a JSON-serializable report.
    """
    orbit = orbit or OrbitConfig()
    params = params or SpacecraftParams()
    target = target or TargetState()
    report = {
        "seeds": list(seeds),
        "steps": steps,
        "noise": {
            "sigma_r": noise.sigma_r, "sigma_v": noise.sigma_v,
            "sigma_omega": noise.sigma_omega, "sigma_att_deg": noise.sigma_att_deg,
            "enabled": noise.enabled,
        },
        "policies": {},
    }
    for name, factory in factories.items():
        episodes = []
        for seed in seeds:
            initial = sample_initial_state(np.random.default_rng(seed))
            noise_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
            record = run_episode(factory(), initial, steps, noise, noise_rng,
                                 orbit, params, policy_id=name, seed=seed)
            episodes.append(episode_metrics(record, target, orbit, params))
            if series_dir is not None:
                write_episode_series(record, target, orbit, params,
                                     Path(series_dir) / f"{name}_seed{seed}.csv")
            log.info("%s seed %d: %s", name, seed,
                     {k: round(v, 4) if isinstance(v, float) else v
                      for k, v in episodes[-1].items()})
        report["policies"][name] = {"episodes": episodes, "aggregate": _aggregate(episodes)}
    return report


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return path


def write_episode_series(record: EpisodeRecord, target: TargetState,
                         orbit: OrbitConfig, params: SpacecraftParams, path) -> Path:
    """Per-step CSV: state channels, reconstructed wrench, per-step error."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    force, torque = reconstruct_wrench(record, orbit, params)
    errs = step_errors(record.states, target.as_state().as_vector())
    n = record.states.shape[0]
    header = (["t"]
              + [f"s_{c}" for c in ("rx", "ry", "rz", "vx", "vy", "vz",
                                    "qw", "qx", "qy", "qz", "wx", "wy", "wz")]
              + ["F_x", "F_y", "F_z", "tau_x", "tau_y", "tau_z", "error"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(n):
            wrench = ([repr(v) for v in force[t - 1]] + [repr(v) for v in torque[t - 1]]
                      if 1 <= t < n - 1 else [""] * 6)
            w.writerow([t] + [repr(v) for v in record.states[t]] + wrench
                       + [repr(errs[t])])
    return path


# --- ablations ---

ABLATION_LENGTHS = (100, 200, 400, 600)


def run_ablations(dataset, model_cfg, noise: NoiseConfig, seed: int = 0,
                  seeds=EVAL_SEEDS, steps: int = DEFAULT_STEPS,
                  orbit: OrbitConfig | None = None,
                  params: SpacecraftParams | None = None,
                  target: TargetState | None = None,
                  lengths=ABLATION_LENGTHS, out_dir=None) -> dict:
    """Train and evaluate the sequence-policy ablation grid.

    Variants: the baseline configuration, the baseline checkpoint evaluated
    without temporal aggregation (no retraining), zero and learnable decoder
    targets, and each prediction-sequence length in `lengths`. All variants
    share the training seed and the evaluation protocol.
    """
    from dataclasses import replace

    from .policy import train

    orbit = orbit or OrbitConfig()
    params = params or SpacecraftParams()
    target = target or TargetState()
    out_dir = Path(out_dir) if out_dir is not None else None

    variants = [("baseline", model_cfg)]
    for mode in ("zero", "learnable"):
        if mode != model_cfg.decoder_target_mode:
            variants.append((f"decoder_target={mode}",
                             replace(model_cfg, decoder_target_mode=mode)))
    for n in lengths:
        if n != model_cfg.n:
            variants.append((f"n={n}", replace(model_cfg, n=n)))

    report = {"seed": seed, "variants": {}}
    baseline_policy = None
    for name, cfg in variants:
        log.info("ablation %s: training", name)
        policy = train(dataset, cfg, seed=seed)
        if name == "baseline":
            baseline_policy = policy
        if out_dir is not None:
            policy.save(out_dir / f"{name.replace('=', '_')}.ckpt")
        suite = evaluate_suite({name: lambda p=policy: SequenceRunner(p)}, noise,
                               seeds=seeds, steps=steps, orbit=orbit, params=params,
                               target=target)
        report["variants"][name] = suite["policies"][name]
        report["variants"][name]["config"] = {
            "n": cfg.n, "decoder_target_mode": cfg.decoder_target_mode,
            "kappa": cfg.kappa,
        }

    # evaluation-time-only variant: same checkpoint, aggregation disabled
    name = "w/o temporal aggregation"
    suite = evaluate_suite(
        {name: lambda: SequenceRunner(baseline_policy, use_aggregation=False)},
        noise, seeds=seeds, steps=steps, orbit=orbit, params=params, target=target)
    report["variants"][name] = suite["policies"][name]
    report["variants"][name]["config"] = {
        "n": model_cfg.n, "decoder_target_mode": model_cfg.decoder_target_mode,
        "aggregation": False,
    }
    return report
