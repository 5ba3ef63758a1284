"""Sequence-prediction imitation policy.

A VAE-style transformer maps the current observed 13-channel state plus
(at training time) the expert's next n observed states to a latent code z,
then a decoder conditioned on [z-embedding, state-embedding] memory and an
anchored target sequence predicts the n future states in one pass. The
anchored target replicates the current state embedding along the horizon
(plus a fixed positional table), which keeps the query sequence tied to
physically plausible anchors. At evaluation time z = 0.

All tensors are 64-bit; training is single-threaded and deterministic for
a fixed seed.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import (
    AdamW,
    ParameterStore,
    Tape,
    Tensor,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8
LOGVAR_CLAMP = 10.0
DECODER_TARGET_MODES = ("anchor", "zero", "learnable")


@dataclass
class ModelConfig:
    """Transformer policy hyperparameters (full-scale defaults)."""

    d: int = 256
    z_dim: int = 32
    heads: int = 4
    enc_layers: int = 3
    dec_layers: int = 4
    n: int = 500
    ff_mult: int = 4
    lr: float = 7e-4
    weight_decay: float = 5e-5
    batch_size: int = 256
    epochs: int = 400
    batches_per_epoch: int | None = None  # default: dataset size / batch size
    micro_batch: int | None = None  # gradient-accumulation chunk
    kappa: float = 0.01
    lam_r: float = 1.0
    lam_v: float = 1.0
    lam_q: float = 1.0
    lam_w: float = 1.0
    lam_kl: float = 10.0
    beta: float = 0.5  # weight of the normalized-space term in mixed losses
    decoder_target_mode: str = "anchor"

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.n < 1:
            raise ValueError("sequence length n must be >= 1")
        if self.decoder_target_mode not in DECODER_TARGET_MODES:
            raise ValueError(f"decoder_target_mode must be one of {DECODER_TARGET_MODES}")
        for name in ("lam_r", "lam_v", "lam_q", "lam_w", "lam_kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")


@dataclass
class NormStats:
    """Per-channel z-score statistics over the 13 state channels."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)
        if self.mean.shape != (13,) or self.std.shape != (13,):
            raise ValueError("NormStats requires 13-channel mean/std")


def fit_normalization(dataset) -> NormStats:
    """Channel statistics over all observed states of the training set."""
    if dataset.n_traj == 0:
        raise ValueError("empty dataset")
    stacked = np.concatenate([d.observed_states for d in dataset.demos], axis=0)
    return NormStats(stacked.mean(axis=0), stacked.std(axis=0))


def normalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return (x - stats.mean) / stats.std


def denormalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse z-score; the quaternion block is renormalized to unit length."""
    out = x * stats.std + stats.mean
    q = out[..., 6:10]
    out[..., 6:10] = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return out


def sample_training_item(demo, t: int, n: int):
    """(state_t, next n observed states); pads by repeating the final state."""
    if not 0 <= t < demo.length:
        raise ValueError(f"t={t} outside [0, {demo.length})")
    state = demo.observed_states[t]
    frames = demo.observed_states[t + 1: t + 1 + n]
    if frames.shape[0] < n:
        pad = np.repeat(demo.observed_states[-1:], n - frames.shape[0], axis=0)
        frames = np.concatenate([frames, pad], axis=0)
    return state, frames


def sinusoidal_table(length: int, d: int) -> np.ndarray:
    """Fixed sin/cos positional encodings, (length, d)."""
    pos = np.arange(length)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / (10000.0 ** (2 * i / d))
    table = np.empty((length, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def reparameterize(mu: Tensor, logvar: Tensor, epsilon: np.ndarray) -> Tensor:
    """z = mu + exp(logvar / 2) * epsilon."""
    sigma = ad.exp(ad.mul(logvar, Tensor(0.5)))
    return ad.add(mu, ad.mul(sigma, Tensor(epsilon)))


def kl_loss(mu: Tensor, logvar: Tensor) -> Tensor:
    """Batch mean of sum_j -0.5 (1 + logvar - mu^2 - exp(logvar))."""
    z_dim = mu.shape[-1]
    inner = ad.sub(
        ad.add(Tensor(1.0), logvar),
        ad.add(ad.square(mu), ad.exp(logvar)),
    )
    return ad.mul(ad.mean(ad.mul(inner, Tensor(-0.5))), Tensor(float(z_dim)))


def _row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Sum over the last axis, keeping it as size 1."""
    k = a.shape[-1]
    ones = Tensor(np.ones((k, 1)))
    return ad.matmul(ad.mul(a, b), ones)


def quaternion_angle_sq(q_pred: Tensor, q_expert: np.ndarray) -> Tensor:
    """Mean over frames of alpha^2, alpha = 2 arccos |<q_pred/|q_pred|, q_expert>|.

    The dot product is clamped just inside (-1, 1) so the arccos gradient
    stays finite once the prediction matches the target hemisphere-exactly.
    """
    q_expert = q_expert / np.linalg.norm(q_expert, axis=-1, keepdims=True)
    norm = ad.sqrt(_row_dot(q_pred, q_pred))
    unit = ad.div(q_pred, norm)
    dot = _row_dot(unit, Tensor(q_expert))
    alpha = ad.mul(Tensor(2.0), ad.arccos(ad.clamp(ad.absolute(dot), -1.0, 1.0 - 1e-9)))
    return ad.mean(ad.square(alpha))


def reconstruction_loss(pred_norm: Tensor, expert_norm: np.ndarray,
                        stats: NormStats, beta: float) -> dict:
    """Per-block losses l_r, l_v, l_q, l_w.

    r/v/omega: per-frame sum of squared channel errors (mean over frames),
    mixed between normalized and physical space with weight beta on the
    normalized term. l_q is the squared rotation angle, physical space only.
    """
    expert_phys = expert_norm * stats.std + stats.mean
    blocks = {"l_r": (0, 3), "l_v": (3, 6), "l_w": (10, 13)}
    out = {}
    for name, (lo, hi) in blocks.items():
        width = float(hi - lo)
        p = pred_norm[..., lo:hi]
        norm_term = ad.mul(ad.mse(p, Tensor(expert_norm[..., lo:hi])), Tensor(width))
        scale = Tensor(stats.std[lo:hi])
        shift = Tensor(stats.mean[lo:hi])
        p_phys = ad.add(ad.mul(p, scale), shift)
        phys_term = ad.mul(ad.mse(p_phys, Tensor(expert_phys[..., lo:hi])), Tensor(width))
        out[name] = ad.add(ad.mul(norm_term, Tensor(beta)),
                           ad.mul(phys_term, Tensor(1.0 - beta)))
    q_pred = pred_norm[..., 6:10]
    q_scale = Tensor(stats.std[6:10])
    q_shift = Tensor(stats.mean[6:10])
    q_phys = ad.add(ad.mul(q_pred, q_scale), q_shift)
    out["l_q"] = quaternion_angle_sq(q_phys, expert_phys[..., 6:10])
    return out


def total_loss(components: dict, kl: Tensor, config: ModelConfig) -> Tensor:
    terms = [
        ad.mul(components["l_r"], Tensor(config.lam_r)),
        ad.mul(components["l_v"], Tensor(config.lam_v)),
        ad.mul(components["l_q"], Tensor(config.lam_q)),
        ad.mul(components["l_w"], Tensor(config.lam_w)),
        ad.mul(kl, Tensor(config.lam_kl)),
    ]
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc


class PolicyModel:
    """Parameter container + forward passes; looks parameters up by name so
    tests can substitute probe tensors for gradient checking."""

    def __init__(self, config: ModelConfig, rng=None, params: ParameterStore | None = None):
        self.config = config
        self.p_vae = sinusoidal_table(config.n + 1, config.d)
        self.p_adt = sinusoidal_table(config.n, config.d)
        if params is not None:
            self.params = params
        else:
            if rng is None:
                raise ValueError("need an rng to initialize parameters")
            self.params = self._build_params(rng)

    def _build_params(self, rng) -> ParameterStore:
        cfg = self.config
        store = ParameterStore()
        d, ff = cfg.d, cfg.ff_mult * cfg.d
        store.add_linear("embed.state", 13, d, rng)
        store.add_linear("embed.action", 13, d, rng)
        store.add_linear("embed.z", cfg.z_dim, d, rng)
        for i in range(cfg.enc_layers):
            for proj in ("q", "k", "v", "o"):
                store.add_linear(f"enc{i}.attn.{proj}", d, d, rng)
            store.add_linear(f"enc{i}.ff1", d, ff, rng)
            store.add_linear(f"enc{i}.ff2", ff, d, rng)
            store.add_layer_norm(f"enc{i}.ln1", d)
            store.add_layer_norm(f"enc{i}.ln2", d)
        store.add_linear("head.mu", d, cfg.z_dim, rng)
        store.add_linear("head.logvar", d, cfg.z_dim, rng)
        for i in range(cfg.dec_layers):
            for blk in ("self", "cross"):
                for proj in ("q", "k", "v", "o"):
                    store.add_linear(f"dec{i}.{blk}.{proj}", d, d, rng)
            store.add_linear(f"dec{i}.ff1", d, ff, rng)
            store.add_linear(f"dec{i}.ff2", ff, d, rng)
            store.add_layer_norm(f"dec{i}.ln1", d)
            store.add_layer_norm(f"dec{i}.ln2", d)
            store.add_layer_norm(f"dec{i}.ln3", d)
        store.add_linear("head.action", d, 13, rng)
        if cfg.decoder_target_mode == "learnable":
            k = 1.0 / np.sqrt(d)
            store.add("decoder_target.seed", rng.uniform(-k, k, size=(1, d)))
        return store

    # --- building blocks ---

    def _lin(self, name: str, x: Tensor) -> Tensor:
        return ad.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}.gain"], self.params[f"{name}.bias"])

    def _mha(self, prefix: str, q_in: Tensor, kv_in: Tensor) -> Tensor:
        H = self.config.heads
        d = self.config.d
        dh = d // H
        B, T = q_in.shape[0], q_in.shape[1]
        S = kv_in.shape[1]

        def split(x, length):
            return ad.transpose(ad.reshape(x, (B, length, H, dh)), (0, 2, 1, 3))

        q = split(self._lin(f"{prefix}.q", q_in), T)
        k = split(self._lin(f"{prefix}.k", kv_in), S)
        v = split(self._lin(f"{prefix}.v", kv_in), S)
        scores = ad.mul(ad.matmul(q, ad.transpose(k)), Tensor(1.0 / np.sqrt(dh)))
        att = ad.softmax(scores)
        fused = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
        return self._lin(f"{prefix}.o", fused)

    def _ff(self, prefix: str, x: Tensor) -> Tensor:
        return self._lin(f"{prefix}.ff2", ad.relu(self._lin(f"{prefix}.ff1", x)))

    # --- forward passes (normalized-space inputs) ---

    def embed_state(self, states_norm: Tensor) -> Tensor:
        """(B, 13) -> (B, 1, d) state token."""
        B = states_norm.shape[0]
        return ad.reshape(self._lin("embed.state", states_norm), (B, 1, self.config.d))

    def vae_encode(self, states_norm: Tensor, actions_norm: Tensor):
        """(B, 13) state + (B, n, 13) expert frames -> (mu, logvar), (B, z_dim)."""
        cfg = self.config
        if actions_norm.shape[1] != cfg.n:
            raise ValueError(
                f"expected {cfg.n} action frames, got {actions_norm.shape[1]}"
            )
        tokens = ad.concat(
            [self.embed_state(states_norm), self._lin("embed.action", actions_norm)],
            axis=1,
        )
        h = ad.add(tokens, Tensor(self.p_vae))
        for i in range(cfg.enc_layers):
            h = self._ln(f"enc{i}.ln1", ad.add(h, self._mha(f"enc{i}.attn", h, h)))
            h = self._ln(f"enc{i}.ln2", ad.add(h, self._ff(f"enc{i}", h)))
        pooled = h[:, 0, :]
        mu = self._lin("head.mu", pooled)
        logvar = ad.clamp(self._lin("head.logvar", pooled), -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return mu, logvar

    def build_decoder_inputs(self, z: Tensor, states_norm: Tensor):
        """Memory M = [z-token, state-token] (B, 2, d); target Y (B, n, d)."""
        cfg = self.config
        B = states_norm.shape[0]
        state_tok = self.embed_state(states_norm)
        z_tok = ad.reshape(self._lin("embed.z", z), (B, 1, cfg.d))
        memory = ad.concat([z_tok, state_tok], axis=1)
        if cfg.decoder_target_mode == "anchor":
            base = state_tok
        elif cfg.decoder_target_mode == "zero":
            base = Tensor(np.zeros((B, 1, cfg.d)))
        else:  # learnable
            base = ad.reshape(self.params["decoder_target.seed"], (1, 1, cfg.d))
        target = ad.add(base, Tensor(self.p_adt))
        if target.shape[0] == 1 and B > 1:
            target = ad.add(target, Tensor(np.zeros((B, 1, 1))))
        return memory, target

    def decode_actions(self, target: Tensor, memory: Tensor) -> Tensor:
        """(B, n, d) queries against (B, 2, d) memory -> (B, n, 13) normalized."""
        cfg = self.config
        h = target
        for i in range(cfg.dec_layers):
            h = self._ln(f"dec{i}.ln1", ad.add(h, self._mha(f"dec{i}.self", h, h)))
            h = self._ln(f"dec{i}.ln2", ad.add(h, self._mha(f"dec{i}.cross", h, memory)))
            h = self._ln(f"dec{i}.ln3", ad.add(h, self._ff(f"dec{i}", h)))
        return self._lin("head.action", h)

    def forward_train(self, states_norm: np.ndarray, actions_norm: np.ndarray,
                      epsilon: np.ndarray):
        """VAE path: encode expert actions, sample z, decode predictions."""
        s = Tensor(states_norm)
        a = Tensor(actions_norm)
        mu, logvar = self.vae_encode(s, a)
        z = reparameterize(mu, logvar, epsilon)
        memory, target = self.build_decoder_inputs(z, s)
        pred = self.decode_actions(target, memory)
        return pred, mu, logvar

    def forward_eval(self, states_norm: np.ndarray) -> np.ndarray:
        """Evaluation path with z = 0; returns (B, n, 13) normalized frames."""
        s = Tensor(states_norm)
        z = Tensor(np.zeros((states_norm.shape[0], self.config.z_dim)))
        memory, target = self.build_decoder_inputs(z, s)
        return self.decode_actions(target, memory).data


@dataclass
class Policy:
    """Trained model + normalization statistics; inference is pure."""

    model: PolicyModel
    stats: NormStats

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def predict(self, state_observed: np.ndarray) -> np.ndarray:
        """One observed state (13,) -> n predicted future states, physical units."""
        state_observed = np.asarray(state_observed, dtype=np.float64)
        if state_observed.shape != (13,):
            raise ValueError(f"expected a 13-channel state, got {state_observed.shape}")
        if not np.all(np.isfinite(state_observed)):
            raise ValueError("non-finite state")
        s_norm = normalize(state_observed, self.stats)[None, :]
        pred_norm = self.model.forward_eval(s_norm)[0]
        return denormalize(pred_norm, self.stats)

    def save(self, path) -> Path:
        cfg = {
            "kind": "sequence_policy",
            "model": asdict(self.model.config),
            "norm": {"mean": self.stats.mean.tolist(), "std": self.stats.std.tolist()},
        }
        return save_checkpoint(path, self.model.params, cfg)

    @classmethod
    def load(cls, path) -> "Policy":
        params, cfg = load_checkpoint(path)
        if cfg.get("kind") != "sequence_policy":
            raise ValueError(f"checkpoint kind {cfg.get('kind')!r} is not a sequence policy")
        config = ModelConfig(**cfg["model"])
        model = PolicyModel(config, params=params)
        stats = NormStats(np.array(cfg["norm"]["mean"]), np.array(cfg["norm"]["std"]))
        return cls(model, stats)


def _assemble_batch(dataset, stats: NormStats, traj_idx, t_idx, n: int):
    states = np.empty((len(traj_idx), 13))
    actions = np.empty((len(traj_idx), n, 13))
    for row, (j, t) in enumerate(zip(traj_idx, t_idx)):
        s, frames = sample_training_item(dataset.demos[j], int(t), n)
        states[row] = s
        actions[row] = frames
    return normalize(states, stats), normalize(actions, stats)


def train(dataset, config: ModelConfig, seed: int = 0, out_dir=None,
          log_every: int = 1) -> Policy:
    """Train the policy; deterministic for a fixed seed (single-threaded)."""
    rng = np.random.default_rng(seed)
    stats = fit_normalization(dataset)
    model = PolicyModel(config, rng)
    opt = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay)
    n_pairs = dataset.n_traj * dataset.n_steps
    batches = config.batches_per_epoch or max(1, n_pairs // config.batch_size)
    micro = config.micro_batch or config.batch_size
    curve = []
    for epoch in range(config.epochs):
        sums = np.zeros(6)  # l_r, l_v, l_q, l_w, kl, total
        for b in range(batches):
            traj_idx = rng.integers(dataset.n_traj, size=config.batch_size)
            t_idx = rng.integers(dataset.n_steps, size=config.batch_size)
            eps = rng.normal(size=(config.batch_size, config.z_dim))
            model.params.zero_grad()
            batch_vals = np.zeros(6)
            for lo in range(0, config.batch_size, micro):
                hi = min(lo + micro, config.batch_size)
                frac = (hi - lo) / config.batch_size
                s_norm, a_norm = _assemble_batch(
                    dataset, stats, traj_idx[lo:hi], t_idx[lo:hi], config.n
                )
                with Tape() as tape:
                    pred, mu, logvar = model.forward_train(s_norm, a_norm, eps[lo:hi])
                    comps = reconstruction_loss(pred, a_norm, stats, config.beta)
                    kl = kl_loss(mu, logvar)
                    loss = ad.mul(total_loss(comps, kl, config), Tensor(frac))
                tape.backward(loss)
                vals = np.array([comps["l_r"].item(), comps["l_v"].item(),
                                 comps["l_q"].item(), comps["l_w"].item(),
                                 kl.item(), loss.item() / frac])
                if not np.all(np.isfinite(vals)):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch}, batch {b}, "
                        f"rows {lo}:{hi} (trajectories {traj_idx[lo:hi].tolist()})"
                    )
                batch_vals += vals * frac
            opt.step()
            sums += batch_vals
        means = sums / batches
        curve.append((epoch, *means))
        if log_every and epoch % log_every == 0:
            log.info("epoch %d: total=%.6f l_r=%.6f l_v=%.6f l_q=%.6f l_w=%.6f kl=%.6f",
                     epoch, means[5], means[0], means[1], means[2], means[3], means[4])
    policy = Policy(model, stats)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "training_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "l_r", "l_v", "l_q", "l_w", "kl", "total"])
            for row in curve:
                w.writerow([row[0]] + [repr(v) for v in row[1:]])
        policy.save(out_dir / "policy.ckpt")
    return policy
