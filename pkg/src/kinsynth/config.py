"""Experiment configuration: a validated YAML tree."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    pairs: Path
    attributes: Path
    image_side: int = Field(128, ge=8)
    val_count: int = Field(0, ge=0)
    hflip: bool = False
    workers: int = Field(0, ge=0)
    # real faces behind the discriminator-side gender loss
    aux_real_source: Literal["attributes", "attributes+children"] = "attributes"


class EncoderConfig(_Section):
    weights: Optional[Path] = None
    init: Literal["pretrained", "random"] = "pretrained"
    tap_layers: Optional[list[str]] = None
    share_content_encoder: bool = True
    # used only when no weight file supplies the architecture
    widths: list[int] = Field(default_factory=lambda: [16, 32, 64, 64], min_length=2)
    embed_dim: int = Field(64, ge=1)


class NetsConfig(_Section):
    decoder_widths: Optional[list[int]] = None
    skip_taps: Optional[list[str]] = None
    parent_conditioned: bool = False
    disc_width: int = Field(16, ge=1)
    disc_hidden: int = Field(64, ge=1)
    cls_width: int = Field(16, ge=1)


class LossConfig(_Section):
    lambda_gan: float = Field(10.0, ge=0)
    lambda_c: float = Field(0.1, ge=0)
    lambda_p: float = Field(0.001, ge=0)
    lambda_aux: float = Field(0.1, ge=0)
    # which generated faces the generator-side gender loss sees
    aux_gen_streams: Literal["both", "kin", "reg"] = "both"


class EquilibriumConfig(_Section):
    gamma: float = Field(0.7, gt=0)
    lambda_k: float = Field(0.001, ge=0)
    k0: float = Field(0.0, ge=0, le=1)


class OptimConfig(_Section):
    learning_rate: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    batch_size: int = Field(32, ge=1)
    max_steps: int = Field(100_000, ge=0)


class EvalConfig(_Section):
    k: int = Field(100, ge=1)
    gallery: Literal["per_image", "per_identity"] = "per_image"
    encoder_weights: Optional[Path] = None


class ExperimentConfig(_Section):
    name: str = "run"
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = Field(1000, ge=1)
    log_every: int = Field(1, ge=1)
    data: DataConfig
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    nets: NetsConfig = Field(default_factory=NetsConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    equilibrium: EquilibriumConfig = Field(default_factory=EquilibriumConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _consistent(self):
        if self.encoder.init == "pretrained" and self.encoder.weights is None:
            raise ValueError("encoder.weights is required when encoder.init is 'pretrained'")
        return self

    def resolve_paths(self, base: Path) -> "ExperimentConfig":
        def fix(p):
            return p if p is None or p.is_absolute() else (base / p)

        cfg = self.model_copy(deep=True)
        cfg.data.pairs = fix(cfg.data.pairs)
        cfg.data.attributes = fix(cfg.data.attributes)
        cfg.encoder.weights = fix(cfg.encoder.weights)
        cfg.eval.encoder_weights = fix(cfg.eval.encoder_weights)
        return cfg

    def check_paths(self) -> None:
        missing = [f"{name}: {p}" for name, p in (
            ("data.pairs", self.data.pairs),
            ("data.attributes", self.data.attributes),
            ("encoder.weights", self.encoder.weights),
            ("eval.encoder_weights", self.eval.encoder_weights),
        ) if p is not None and not Path(p).exists()]
        if missing:
            raise ConfigError("missing path(s): " + "; ".join(missing))

    def snapshot(self) -> dict:
        return self.model_dump(mode="json")


def _format(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(tree: dict, base: Path | None = None) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None
    return cfg.resolve_paths(base) if base is not None else cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        tree = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(tree, path.parent.resolve())


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.snapshot(), sort_keys=False), encoding="utf-8")
