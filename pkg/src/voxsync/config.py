"""Experiment configuration: one YAML file with a section per module.

Every section is a dataclass; unknown keys are rejected so typos surface
early.  ``load_config`` merges a file over the defaults, ``dump_config``
writes the fully resolved result.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .losses import LossWeights


@dataclass
class DataConfig:
    N: int = 16
    V: int = 64
    complexity: int = 5
    train_seeds: list = field(default_factory=lambda: list(range(4)))
    eval_seeds: list = field(default_factory=list)
    workers: int = 1
    root: str = "data"


@dataclass
class DualBranchConfig:
    latent_channels: int = 4
    token_patch: int = 2  # latent cells per token side; tokens live on an (N / token_patch)^3 grid
    d_u: int = 64
    unet_channels: list = field(default_factory=lambda: [32, 48, 64])
    image_patch: int = 2
    heads: int = 4
    voxel_blocks: int = 8
    sync_after: list = field(default_factory=lambda: [4, 8])  # 3D blocks followed by a sync exchange
    sync_attention: bool = True
    cond_patch: int = 8
    d_c: int = 64
    cond_dropout: float = 0.05
    lr: float = 1e-3
    batch_size: int = 4
    steps: int = 3000
    grad_clip: float = 1.0
    sample_steps: int = 25
    cfg_scale: float = 1.0
    ae_steps: int = 400
    ae_lr: float = 3e-3
    log_every: int = 50


@dataclass
class DecoderConfig:
    d_z: int = 16
    feat_dim: int = 32
    upsample: int = 2
    encoder_channels: list = field(default_factory=lambda: [16, 32, 32, 32])
    gaussians_per_voxel: int = 4
    width: int = 64
    blocks: int = 4
    heads: int = 4
    injection: bool = True
    lr: float = 2e-3
    steps: int = 600
    latent_blocks: int = 4
    latent_width: int = 64
    latent_steps: int = 1500
    latent_lr: float = 1e-3
    sample_steps: int = 25
    cfg_scale: float = 1.0
    log_every: int = 50


@dataclass
class MetricsConfig:
    n_samples: int = 10000
    icp: bool = False
    seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    device: str = "cpu"
    threads: int = 0  # 0 keeps torch's default


@dataclass
class Config:
    synthetic_data: DataConfig = field(default_factory=DataConfig)
    dual_branch: DualBranchConfig = field(default_factory=DualBranchConfig)
    mv_decoder: DecoderConfig = field(default_factory=DecoderConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, values, where):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigurationError(f"section {where!r} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(names)
    if unknown:
        raise ConfigurationError(f"unknown keys in {where!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"bad section {where!r}: {exc}") from exc


_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(Config)}


def config_from_dict(values: dict | None) -> Config:
    values = values or {}
    if not isinstance(values, dict):
        raise ConfigurationError("configuration root must be a mapping")
    unknown = set(values) - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for name, factory in _SECTIONS.items():
        sections[name] = _build(type(factory()), values.get(name), name)
    cfg = Config(**sections)
    validate(cfg)
    return cfg


def validate(cfg: Config) -> None:
    d, b = cfg.synthetic_data, cfg.dual_branch
    if d.N < 2 or d.V < d.N or d.V % d.N:
        raise ConfigurationError("synthetic_data: need V a multiple of N and N >= 2")
    if d.N % b.token_patch:
        raise ConfigurationError("dual_branch.token_patch must divide N")
    deep = d.V // (4 * b.image_patch)
    if d.V % (4 * b.image_patch) or deep % (d.N // b.token_patch):
        raise ConfigurationError("dual_branch: V / (4 image_patch) must be a multiple of N / token_patch")
    if len(b.unet_channels) != 3:
        raise ConfigurationError("dual_branch.unet_channels needs three widths (full, half, quarter resolution)")
    if len(b.sync_after) != 2 or not all(1 <= k <= b.voxel_blocks for k in b.sync_after):
        raise ConfigurationError("dual_branch.sync_after needs two block indices within the 3D depth")
    if list(b.sync_after) != sorted(b.sync_after):
        raise ConfigurationError("dual_branch.sync_after must be increasing")
    if not 0 <= b.cond_dropout <= 1:
        raise ConfigurationError("dual_branch.cond_dropout must lie in [0, 1]")
    if b.cfg_scale < 0 or cfg.mv_decoder.cfg_scale < 0:
        raise ConfigurationError("cfg_scale must be non-negative")
    if d.V % b.cond_patch:
        raise ConfigurationError("dual_branch.cond_patch must divide V")
    if cfg.metrics.n_samples < 1000:
        raise ConfigurationError("metrics.n_samples must be at least 1000")


def load_config(path=None, overrides: dict | None = None) -> Config:
    values = {}
    if path is not None:
        try:
            values = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from exc
    for dotted, val in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        values.setdefault(section, {})
        if values[section] is None:
            values[section] = {}
        values[section][key] = val
    return config_from_dict(values)


def dump_config(cfg: Config, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
