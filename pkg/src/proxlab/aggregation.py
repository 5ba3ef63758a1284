"""Temporal aggregation of overlapping predicted action sequences.

At each (1-based) timestep t the policy emits a fresh n-frame prediction.
The executed action fuses, channel-wise, the frames that the last
min(t, n) predictions made for timestep t: the prediction issued at step
s contributes its frame t - s + 1 (1-based). Weights are exp(-kappa * i),
i = 1..m, normalized over the m available predictions, with i ordered
oldest-first as in the source formula.

Quaternions are sign-aligned to the newest contributing frame before the
weighted sum and renormalized afterwards; summing opposite-hemisphere
quaternions naively would cancel.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

QUAT = slice(6, 10)


@dataclass(frozen=True)
class AggregationConfig:
    kappa: float = 0.01
    n: int = 500

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")


def aggregation_weights(n: int, kappa: float, m: int) -> np.ndarray:
    """Normalized weights exp(-kappa * i), i = 1..m (m available predictions)."""
    if not 1 <= m <= n:
        raise ValueError(f"m={m} outside [1, n={n}]")
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    w = np.exp(-kappa * np.arange(1, m + 1))
    return w / w.sum()


class AggregationBuffer:
    """Ring buffer of the last n predicted sequences, tagged by timestep."""

    def __init__(self, n: int):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.n = n
        self._entries: deque = deque(maxlen=n)  # (step, frames (n, 13))

    def __len__(self) -> int:
        return len(self._entries)

    def add(self, step: int, frames: np.ndarray):
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape != (self.n, 13):
            raise ValueError(f"expected frames of shape ({self.n}, 13), got {frames.shape}")
        if self._entries and step <= self._entries[-1][0]:
            raise ValueError(
                f"prediction steps must increase: got {step} after {self._entries[-1][0]}"
            )
        self._entries.append((step, frames))

    def entries_covering(self, t: int):
        """Predictions whose horizon includes timestep t, oldest first."""
        return [(s, f) for s, f in self._entries if 0 <= t - s < self.n]


def aggregate_action(buffer: AggregationBuffer, t: int, kappa: float = 0.01) -> np.ndarray:
    """Fused 13-channel action for timestep t."""
    if len(buffer) == 0:
        raise ValueError("aggregation buffer is empty")
    entries = buffer.entries_covering(t)
    if not entries:
        raise ValueError(f"no buffered prediction covers timestep {t}")
    m = len(entries)
    weights = aggregation_weights(buffer.n, kappa, m)
    frames = np.stack([frames[t - s] for s, frames in entries])  # oldest first
    newest_q = frames[-1, QUAT]
    aligned = frames.copy()
    flip = aligned[:, QUAT] @ newest_q < 0.0
    aligned[flip, QUAT] *= -1.0
    fused = weights @ aligned
    q_norm = np.linalg.norm(fused[QUAT])
    if q_norm < 1e-12:
        raise ValueError("aggregated quaternion degenerated to zero")
    fused[QUAT] /= q_norm
    return fused
