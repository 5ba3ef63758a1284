"""Expert demonstration generation and on-disk dataset format.

A dataset directory holds `manifest.json` plus one CSV per trajectory
(`traj_0000.csv` ...). Each CSV row is `t`, 13 true-state channels, 13
observed-state channels, and 6 control channels; the final row has no
control (L + 1 states, L controls). Floats are written with shortest
round-trip repr, so save/load is lossless and byte-reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import (
    ControlInput,
    OrbitConfig,
    RelativeState,
    SpacecraftParams,
    rk4_step,
    sample_initial_state,
)
from .mpc import MpcConfig, MpcController, NoiseConfig, TargetState, inject_noise

log = logging.getLogger(__name__)

STATE_CHANNELS = ["rx", "ry", "rz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz"]
CONTROL_CHANNELS = ["fx", "fy", "fz", "tx", "ty", "tz"]
CSV_HEADER = (
    ["t"]
    + [f"true_{c}" for c in STATE_CHANNELS]
    + [f"obs_{c}" for c in STATE_CHANNELS]
    + [f"u_{c}" for c in CONTROL_CHANNELS]
)

MANIFEST_VERSION = 1
MAX_FAILURE_RATE = 0.05


@dataclass
class Demonstration:
    """One expert trajectory: L+1 true/observed states and L controls."""

    true_states: np.ndarray  # (L+1, 13)
    observed_states: np.ndarray  # (L+1, 13)
    controls: np.ndarray  # (L, 6)
    index: int
    attempt: int = 0

    def __post_init__(self):
        L = self.controls.shape[0]
        if self.true_states.shape != (L + 1, 13) or self.observed_states.shape != (L + 1, 13):
            raise ValueError("inconsistent trajectory lengths")

    @property
    def length(self) -> int:
        return self.controls.shape[0]


@dataclass
class DemoDataset:
    demos: list
    global_seed: int
    noise: NoiseConfig
    orbit: OrbitConfig
    params: SpacecraftParams
    target: TargetState
    rejected: int = 0

    @property
    def n_traj(self) -> int:
        return len(self.demos)

    @property
    def n_steps(self) -> int:
        return self.demos[0].length if self.demos else 0


def _traj_rng(global_seed: int, index: int, attempt: int) -> np.random.Generator:
    """Independent, reproducible stream per (trajectory, attempt)."""
    return np.random.default_rng(np.random.SeedSequence(global_seed, spawn_key=(index, attempt)))


def generate_trajectory(
    index: int,
    length: int,
    noise: NoiseConfig,
    global_seed: int,
    orbit: OrbitConfig,
    params: SpacecraftParams,
    target: TargetState,
    mpc_cfg: MpcConfig | None = None,
) -> Demonstration:
    """Closed-loop expert rollout; resamples the initial state if the SQP
    failure rate exceeds MAX_FAILURE_RATE."""
    attempt = 0
    while True:
        rng = _traj_rng(global_seed, index, attempt)
        state = sample_initial_state(rng)
        controller = MpcController(target, orbit, params, mpc_cfg)
        true = np.empty((length + 1, 13))
        observed = np.empty((length + 1, 13))
        controls = np.empty((length, 6))
        true[0] = state.as_vector()
        observed[0] = inject_noise(state, noise, rng).as_vector()
        for t in range(length):
            u = controller.step(RelativeState.from_vector(observed[t]))
            controls[t] = u.as_vector()
            state = rk4_step(state, u, orbit, params)
            true[t + 1] = state.as_vector()
            observed[t + 1] = inject_noise(state, noise, rng).as_vector()
        rate = controller.failure_count / length
        if rate <= MAX_FAILURE_RATE:
            return Demonstration(true, observed, controls, index, attempt)
        log.warning(
            "trajectory %d attempt %d rejected: solver failure rate %.1f%%",
            index, attempt, 100 * rate,
        )
        attempt += 1


def generate_demonstrations(
    n_traj: int = 50,
    length: int = 2500,
    noise: NoiseConfig | None = None,
    global_seed: int = 0,
    orbit: OrbitConfig | None = None,
    params: SpacecraftParams | None = None,
    target: TargetState | None = None,
    mpc_cfg: MpcConfig | None = None,
    progress=None,
) -> DemoDataset:
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    noise = noise if noise is not None else NoiseConfig()
    orbit = orbit if orbit is not None else OrbitConfig()
    params = params if params is not None else SpacecraftParams()
    target = target if target is not None else TargetState()
    demos = []
    rejected = 0
    for i in range(n_traj):
        demo = generate_trajectory(i, length, noise, global_seed, orbit, params, target, mpc_cfg)
        rejected += demo.attempt
        demos.append(demo)
        if progress is not None:
            progress(i + 1, n_traj)
    return DemoDataset(demos, global_seed, noise, orbit, params, target, rejected)


# --- persistence ---

def _fmt(x: float) -> str:
    return repr(float(x))


def _write_traj_csv(path: Path, demo: Demonstration):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        L = demo.length
        for t in range(L + 1):
            row = [str(t)]
            row += [_fmt(v) for v in demo.true_states[t]]
            row += [_fmt(v) for v in demo.observed_states[t]]
            row += [_fmt(v) for v in demo.controls[t]] if t < L else [""] * 6
            w.writerow(row)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def persist_dataset(dataset: DemoDataset, directory) -> Path:
    """Write manifest.json + traj_NNNN.csv files; returns the directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for demo in dataset.demos:
        name = f"traj_{demo.index:04d}.csv"
        _write_traj_csv(directory / name, demo)
        files.append({"name": name, "sha256": _sha256(directory / name), "attempt": demo.attempt})
    manifest = {
        "format_version": MANIFEST_VERSION,
        "n_traj": dataset.n_traj,
        "n_steps": dataset.n_steps,
        "dt": dataset.orbit.dt,
        "n0": dataset.orbit.n0,
        "mu": dataset.orbit.mu,
        "r_orbit": dataset.orbit.r_orbit,
        "mass": dataset.params.mass,
        "inertia": dataset.params.inertia.tolist(),
        "thrust_limit": dataset.params.thrust_limit,
        "torque_limit": dataset.params.torque_limit,
        "noise": {
            "sigma_r": dataset.noise.sigma_r,
            "sigma_v": dataset.noise.sigma_v,
            "sigma_omega": dataset.noise.sigma_omega,
            "sigma_att_deg": dataset.noise.sigma_att_deg,
            "enabled": dataset.noise.enabled,
        },
        "target": {"r_hat": dataset.target.r_hat.tolist(), "q_hat": dataset.target.q_hat.tolist()},
        "global_seed": dataset.global_seed,
        "rejected": dataset.rejected,
        "files": files,
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return directory


def _parse_traj_csv(path: Path):
    true_rows, obs_rows, ctrl_rows = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path.name}: unexpected CSV header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{path.name}:{lineno}: expected {len(CSV_HEADER)} columns")
            try:
                true_rows.append([float(v) for v in row[1:14]])
                obs_rows.append([float(v) for v in row[14:27]])
                if row[27] != "":
                    ctrl_rows.append([float(v) for v in row[27:33]])
            except ValueError as exc:
                raise ValueError(f"{path.name}:{lineno}: malformed value ({exc})") from None
    return np.array(true_rows), np.array(obs_rows), np.array(ctrl_rows)


def load_dataset(directory) -> DemoDataset:
    """Load and checksum-verify a dataset directory."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest format_version {manifest.get('format_version')}")

    orbit = OrbitConfig(mu=manifest["mu"], r_orbit=manifest["r_orbit"], dt=manifest["dt"])
    params = SpacecraftParams(
        mass=manifest["mass"],
        inertia=np.array(manifest["inertia"]),
        thrust_limit=manifest["thrust_limit"],
        torque_limit=manifest["torque_limit"],
    )
    noise = NoiseConfig(**manifest["noise"])
    target = TargetState(np.array(manifest["target"]["r_hat"]), np.array(manifest["target"]["q_hat"]))

    demos = []
    for i, entry in enumerate(manifest["files"]):
        path = directory / entry["name"]
        if not path.exists():
            raise FileNotFoundError(f"missing trajectory file: {path}")
        digest = _sha256(path)
        if digest != entry["sha256"]:
            raise ValueError(f"checksum mismatch for {path.name}: {digest} != {entry['sha256']}")
        true, obs, ctrl = _parse_traj_csv(path)
        if ctrl.shape[0] != manifest["n_steps"] or true.shape[0] != manifest["n_steps"] + 1:
            raise ValueError(f"{path.name}: row count does not match manifest n_steps")
        demos.append(Demonstration(true, obs, ctrl, i, entry.get("attempt", 0)))
    if len(demos) != manifest["n_traj"]:
        raise ValueError("manifest n_traj does not match file count")
    return DemoDataset(demos, manifest["global_seed"], noise, orbit, params, target,
                       manifest.get("rejected", 0))
