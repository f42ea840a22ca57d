"""Run configuration: a YAML file validated by pydantic.

Grammar (every section optional except ``modalities``)::

    seed: 0
    modalities:                      # ordered; order fixes the joint latent layout
      - {name: m0, data_dim: 8, latent_dim: 4}
    data:       {n_classes, noise_scale, samples_per_class, hard_modalities,
                 hard_noise_factor, nuisance_dims, nuisance_scale, n_test}
    autoencoder: {hidden, epochs, lr, batch_size, linear}
    diffusion:  {beta_min, beta_max, T, d, t_eps}
    score:      {width, n_blocks, embed_dim, time_scale, lr, steps, batch_size, ema_momentum}
    sampler:    {n_steps, repaint: {r, j}}
    classifier: {hidden, epochs, lr}
    eval:       {n_samples, t_grid, robustness_samples}
    paths:      {workdir}

``MLD_SEED`` and ``MLD_WORKDIR`` in the environment override ``seed`` and
``paths.workdir``.
"""

from __future__ import annotations

import os
from pathlib import Path
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import SyntheticConfig
from .diffusion import DiffusionConfig
from .errors import ConfigError, MLDError
from .latent import ModalityLayout, ModalitySpec
from .sampler import SamplerConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModalityCfg(_Section):
    name: str = Field(min_length=1)
    data_dim: int = Field(ge=1)
    latent_dim: int = Field(ge=1)


class DataCfg(_Section):
    n_classes: int = Field(4, ge=1)
    noise_scale: float = Field(0.1, ge=0)
    samples_per_class: int = Field(500, ge=1)
    hard_modalities: list[int] = []
    hard_noise_factor: float = Field(2.5, gt=0)
    nuisance_dims: int = Field(4, ge=0)
    nuisance_scale: float = Field(1.0, ge=0)
    n_test: int = Field(400, ge=0)


class AutoencoderCfg(_Section):
    hidden: list[int] = [64]
    epochs: int = Field(60, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(128, ge=2)
    linear: bool = False


class DiffusionCfg(_Section):
    beta_min: float = 0.1
    beta_max: float = 20.0
    T: float = 1.0
    d: float = Field(0.5, ge=0, le=1)
    t_eps: float = 1e-5


class ScoreCfg(_Section):
    width: int = Field(256, ge=1)
    n_blocks: int = Field(2, ge=0)
    embed_dim: int = Field(16, ge=2, multiple_of=2)
    time_scale: float = Field(100.0, gt=0)
    lr: float = Field(1e-3, gt=0)
    steps: int = Field(30000, ge=1)
    batch_size: int = Field(128, ge=1)
    ema_momentum: float = Field(0.999, gt=0, lt=1)


class RepaintCfg(_Section):
    r: int = Field(10, ge=1)
    j: int = Field(10, ge=1)


class SamplerCfg(_Section):
    n_steps: int = Field(250, ge=1)
    repaint: RepaintCfg = RepaintCfg()


class ClassifierCfg(_Section):
    hidden: list[int] = [32, 32]
    epochs: int = Field(30, ge=1)
    lr: float = Field(3e-3, gt=0)


class EvalCfg(_Section):
    n_samples: int = Field(1000, ge=2)
    t_grid: list[float] = [round(0.1 * k, 1) for k in range(11)]
    robustness_samples: int = Field(1000, ge=1)


class PathsCfg(_Section):
    workdir: str = "."


class RunConfig(_Section):
    seed: int = 0
    modalities: list[ModalityCfg] = Field(min_length=1)
    data: DataCfg = DataCfg()
    autoencoder: AutoencoderCfg = AutoencoderCfg()
    diffusion: DiffusionCfg = DiffusionCfg()
    score: ScoreCfg = ScoreCfg()
    sampler: SamplerCfg = SamplerCfg()
    classifier: ClassifierCfg = ClassifierCfg()
    eval: EvalCfg = EvalCfg()
    paths: PathsCfg = PathsCfg()

    @model_validator(mode="after")
    def _cross_checks(self):
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality names {names}")
        for h in self.data.hard_modalities:
            if not 0 <= h < len(self.modalities):
                raise ValueError(f"data.hard_modalities: index {h} out of range")
        if self.sampler.repaint.j > self.sampler.n_steps:
            raise ValueError("sampler.repaint.j must not exceed sampler.n_steps")
        return self

    # conversions to the domain types; their own invariants are checked on construction

    def layout(self) -> ModalityLayout:
        return ModalityLayout(tuple(ModalitySpec(m.name, m.data_dim, m.latent_dim) for m in self.modalities))

    def diffusion_config(self, d: float | None = None) -> DiffusionConfig:
        c = self.diffusion
        return DiffusionConfig(c.beta_min, c.beta_max, c.T, self.sampler.n_steps, c.d if d is None else d, c.t_eps)

    def sampler_config(self, repaint: bool = False, seed: int | None = None) -> SamplerConfig:
        rp = (self.sampler.repaint.r, self.sampler.repaint.j) if repaint else None
        return SamplerConfig(self.sampler.n_steps, rp, self.seed if seed is None else seed)

    def synthetic_config(self) -> SyntheticConfig:
        d = self.data
        return SyntheticConfig(d.n_classes, tuple(m.data_dim for m in self.modalities), d.noise_scale,
                               d.samples_per_class, self.seed, tuple(d.hard_modalities), d.hard_noise_factor,
                               d.nuisance_dims, d.nuisance_scale, tuple(m.name for m in self.modalities))

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(raw: dict, env=None) -> RunConfig:
    env = os.environ if env is None else env
    raw = dict(raw or {})
    if "MLD_SEED" in env:
        raw["seed"] = int(env["MLD_SEED"])
    if "MLD_WORKDIR" in env:
        raw["paths"] = {**(raw.get("paths") or {}), "workdir": env["MLD_WORKDIR"]}
    try:
        cfg = RunConfig.model_validate(raw)
        # re-run the domain-type invariants so bad combinations fail at load time
        cfg.layout()
        cfg.diffusion_config()
        cfg.sampler_config(repaint=True)
        cfg.synthetic_config()
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_errors(exc)}") from None
    except MLDError as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return cfg


def load_config(path, env=None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(raw, env)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(), sort_keys=False)


def default_config(**overrides) -> RunConfig:
    """The three-modality demo setup (one hard modality) used by the examples."""
    raw = {
        "modalities": [
            {"name": "m0", "data_dim": 8, "latent_dim": 4},
            {"name": "m1", "data_dim": 8, "latent_dim": 4},
            {"name": "m2", "data_dim": 12, "latent_dim": 8},
        ],
        "data": {"hard_modalities": [2]},
    }
    raw.update(overrides)
    return parse_config(raw, env={})

