"""Narrative demo 3: temporal aggregation weights and the metric suite.

Shows how the exponential aggregation weights distribute over the buffer
of overlapping predictions, and exercises each evaluation metric on a
hand-built episode so its definition is visible in isolation.

Run:  python demos/03_aggregation_and_metrics.py
"""

import numpy as np

from proxlab.aggregation import aggregation_weights
from proxlab.dynamics import OrbitConfig, SpacecraftParams
from proxlab.evaluation import (EpisodeRecord, convergence_step, episode_energy,
                                episodic_stepwise_reward, terminal_precision)
from proxlab.mpc import TargetState

orbit = OrbitConfig()
params = SpacecraftParams()
target = TargetState()

# --- aggregation weights ---
print("aggregation weights w_i ~ exp(-kappa * i), i = 1 is the oldest prediction:")
for kappa in (0.0, 0.01, 0.1):
    w = aggregation_weights(n=8, kappa=kappa, m=8)
    print(f"  kappa={kappa:<5} " + " ".join(f"{x:.3f}" for x in w))

# --- a hand-built episode: exponential approach to the dock ---
n = 200
t = np.arange(n + 1)
states = np.zeros((n + 1, 13))
states[:, 0] = target.r_hat[0] + 100.0 * np.exp(-t / 30.0)  # x -> 2 m offset
states[:, 3] = np.gradient(states[:, 0], orbit.dt)
states[:, 6] = 1.0  # identity attitude throughout
record = EpisodeRecord(states, states.copy(), None, "handmade", 0, "commanded")

cs = convergence_step(record)
ttp, trp = terminal_precision(record, target)
esr = episodic_stepwise_reward(record, target)
w_f, w_tau, sec = episode_energy(record, orbit, params)
print(f"\nhand-built exponential approach ({n} steps):")
print(f"  CS  = {cs} (first 20-step window closest to the final state)")
print(f"  TTP = {ttp:.4f} m+m/s, TRP = {trp:.4f} (attitude never moves)")
print(f"  ESR = {esr:.3f} (mean negative per-step error)")
print(f"  SEC = {sec:.4f} (reconstructed wrench work per step: W_F={w_f:.2f}, W_tau={w_tau:.2f})")
