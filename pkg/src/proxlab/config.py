"""Merged run configuration: YAML file + dotted-key command-line overrides.

A run configuration is a bundle of the per-module dataclass configs
(orbit, spacecraft, MPC, model, aggregation, PID, BC, noise) plus run
settings (seed, dataset shape, evaluation seeds, paths). Every section
key and field name is validated against the dataclass fields, so unknown
keys are rejected before any work starts; physical consistency checks
(Nc <= Np, kappa >= 0, ...) live in the section dataclasses themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .aggregation import AggregationConfig
from .baselines import BcConfig, PidConfig
from .dynamics import OrbitConfig, SpacecraftParams
from .evaluation import DEFAULT_STEPS, EVAL_SEEDS, ROBUSTNESS_NOISE
from .mpc import MpcConfig, NoiseConfig, TargetState
from .policy import ModelConfig


@dataclass
class RunSettings:
    """Top-level knobs that do not belong to a single module."""

    seed: int = 0
    n_traj: int = 50
    demo_steps: int = 2500
    eval_seeds: tuple = EVAL_SEEDS
    eval_steps: int = DEFAULT_STEPS
    jobs: int = 1
    data_dir: str = "data"
    out_dir: str = "runs"

    def __post_init__(self):
        self.eval_seeds = tuple(int(s) for s in self.eval_seeds)
        if self.n_traj < 1 or self.demo_steps < 1 or self.eval_steps < 1:
            raise ValueError("n_traj, demo_steps, and eval_steps must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


_SECTIONS = {
    "run": RunSettings,
    "orbit": OrbitConfig,
    "spacecraft": SpacecraftParams,
    "target": TargetState,
    "mpc": MpcConfig,
    "model": ModelConfig,
    "aggregation": AggregationConfig,
    "pid": PidConfig,
    "bc": BcConfig,
    "noise": NoiseConfig,
    "robustness_noise": NoiseConfig,
}

_SECTION_DEFAULTS = {"robustness_noise": lambda: ROBUSTNESS_NOISE}


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    orbit: OrbitConfig = field(default_factory=OrbitConfig)
    spacecraft: SpacecraftParams = field(default_factory=SpacecraftParams)
    target: TargetState = field(default_factory=TargetState)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    pid: PidConfig = field(default_factory=PidConfig)
    bc: BcConfig = field(default_factory=BcConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    robustness_noise: NoiseConfig = field(default_factory=_SECTION_DEFAULTS["robustness_noise"])

    def to_dict(self) -> dict:
        """JSON/YAML-serializable view of the fully resolved configuration."""
        def clean(x):
            if isinstance(x, np.ndarray):
                return x.tolist()
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [clean(v) for v in x]
            if isinstance(x, (np.integer, np.floating)):
                return x.item()
            return x
        out = {}
        for section, cls in _SECTIONS.items():
            obj = getattr(self, section)
            out[section] = {f.name: clean(getattr(obj, f.name)) for f in fields(cls)}
        return out


def _section_values(section: str, obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(_SECTIONS[section])}


def _build_section(section: str, overrides: dict):
    cls = _SECTIONS[section]
    valid = {f.name for f in fields(cls)}
    unknown = set(overrides) - valid
    if unknown:
        raise ValueError(
            f"unknown key(s) {sorted(unknown)} in section {section!r}; "
            f"valid keys: {sorted(valid)}")
    base = _SECTION_DEFAULTS.get(section, cls)()
    merged = {**_section_values(section, base), **overrides}
    return cls(**merged)


def parse_override(text: str):
    """Parse one `section.field=value` override; values use YAML scalars."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form section.field=value")
    key, _, raw = text.partition("=")
    if "." not in key:
        raise ValueError(f"override key {key!r} needs a dotted section.field form")
    section, _, name = key.partition(".")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ValueError(f"cannot parse override value {raw!r}: {exc}") from exc
    return section.strip(), name.strip(), value


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Build a validated RunConfig from an optional YAML file plus overrides.

    The file maps section names to key/value tables; overrides are
    `section.field=value` strings applied on top of the file.
    """
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {path} must contain a mapping at top level")
        data = loaded
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ValueError(
            f"unknown config section(s) {sorted(unknown)}; "
            f"valid sections: {sorted(_SECTIONS)}")
    per_section: dict[str, dict] = {s: dict(v or {}) for s, v in data.items()}
    for s, v in per_section.items():
        if not isinstance(v, dict):
            raise ValueError(f"section {s!r} must be a key/value table")
    for text in overrides or []:
        section, name, value = parse_override(text)
        if section not in _SECTIONS:
            raise ValueError(
                f"unknown config section {section!r}; valid sections: {sorted(_SECTIONS)}")
        per_section.setdefault(section, {})[name] = value
    sections = {s: _build_section(s, per_section.get(s, {})) for s in _SECTIONS}
    return RunConfig(**sections)


def dump_config(config: RunConfig, path) -> Path:
    """Write the resolved configuration next to a run's outputs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    return path
