"""One flat run configuration with full defaulting.

Every hyperparameter in the lab lives here; a YAML file overrides any
subset of fields and unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"

    # dataset sizes and mixture weights
    train_count: int = 5000
    pref_count: int = 500          # per preference style
    eval_count: int = 200          # normal retention split
    w_normal: float = 0.8
    w_aggressive: float = 0.1
    w_defensive: float = 0.1
    eval_frac: float = 0.2         # held-out share of the mined set

    # diffusion model
    diffusion_steps: int = 10      # T
    beta_start: float = 1e-4
    beta_end: float = 0.35
    hidden: list = field(default_factory=lambda: [256, 256])
    action_scale: float = 3.0
    sigma_min: float = 1e-3

    # pretraining
    pretrain_steps: int = 4000
    pretrain_batch: int = 128
    pretrain_lr: float = 1e-3

    # preference mining
    mining_threshold: float = 0.2
    mining_samples: int = 8
    ade_reject: float = 0.5
    keyframe_speed_jump: float = 1.0
    keyframe_heading_jump_deg: float = 5.0

    # pair synthesis / style autoencoder
    pair_q: int = 3
    style_delta: float = 0.3
    ae_epochs: int = 100
    ae_lr: float = 1e-3
    ae_batch: int = 32
    ae_subset: int = 200           # raw pairs used to fit the autoencoder

    # reward model
    margin: float = 1.0
    reward_lr: float = 1e-3
    reward_epochs: int = 30
    reward_batch: int = 32
    reward_patience: int = 5

    # finetuning
    group_size: int = 8            # K
    gamma: float = 0.99
    bc_weight: float = 1e-1        # alpha
    rl_lr: float = 5e-5
    rl_epochs: int = 20
    refresh_epochs: int = 100
    refresh_lr: float = 3e-4
    refresh_batch: int = 16
    checkpoint_every: int = 5

    # evaluation
    eval_samples: int = 8
    em_radius: float = 4.0
    em_iters: int = 25
    boe_tie_band: float = 0.05

    # sweeps
    sweep_alphas: list = field(default_factory=lambda: [1.0, 0.5, 1e-1, 1e-2, 1e-3])
    sweep_fractions: list = field(default_factory=lambda: [0.1, 0.5, 1.0])

    # annotation service
    annotation_pairs: int = 20
    host: str = "127.0.0.1"
    port: int = 8731

    def __post_init__(self):
        weights = (self.w_normal, self.w_aggressive, self.w_defensive)
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights must be a distribution, got {weights}")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError("gamma must be in [0, 1]")
        if self.bc_weight < 0:
            raise ConfigError("bc_weight must be >= 0")

    def to_dict(self):
        return dataclasses.asdict(self)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, overlaid with the YAML file (if any), then `overrides`."""
    data = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        data.update(loaded)
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**data)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
