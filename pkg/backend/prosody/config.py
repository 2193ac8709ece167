"""
Configuration models

TOML config file with sections [model], [train.stage1], [train.stage2],
[ablation] and [eval], validated by pydantic. Defaults are the published
training settings; PROSO_SEED in the environment overrides the seed.
"""

import hashlib
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, field_validator

from .errors import ValidationFailure

RECURRENT_CONTEXT = "bidirectional-recurrent"
ContextMode = Literal["bag", "bidirectional-recurrent"]


def normalize_context(value):
    """The shorthand "recurrent" means "bidirectional-recurrent"."""
    return RECURRENT_CONTEXT if value == "recurrent" else value


ABLATION_FLAGS = ("no_word", "no_phn", "no_pe")


class AdapterSpec(BaseModel):
    """External pretrained word encoder (optional)."""
    provider: str
    model_id: str
    trainable: bool = False
    lr_override: Optional[PositiveFloat] = None


class ModelConfig(BaseModel):
    """Widths and wiring shared by stage 1 and stage 2."""
    model_config = ConfigDict(extra="forbid")

    d: PositiveInt = 32
    r: PositiveInt = 32
    context: ContextMode = RECURRENT_CONTEXT
    predictor_hidden: Optional[PositiveInt] = None
    predictor_layers: PositiveInt = 2
    classifier_hidden: PositiveInt = 32
    normalize_acoustics: bool = False
    use_style_embedding: bool = False
    dtype: Literal["float32", "float64"] = "float32"
    adapter: Optional[AdapterSpec] = None

    @field_validator("context", mode="before")
    @classmethod
    def _recurrent_shorthand(cls, value):
        return normalize_context(value)

    @property
    def hidden(self) -> int:
        return self.predictor_hidden or self.d


class Stage1Config(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr_encoder: PositiveFloat = 1e-5
    lr_rest: PositiveFloat = 1e-3
    batch_size: PositiveInt = 16
    epochs: int = Field(default=40, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: PositiveFloat = 1e-8
    lambda_pitch: float = 0.05
    lambda_energy: float = 0.0025
    lambda_lpe: float = 1.0
    lambda_gse: float = 1.0
    clip_grad_norm: Optional[PositiveFloat] = None


class Stage2Config(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr_stage2: PositiveFloat = 2e-4
    batch_size: PositiveInt = 32
    epochs: int = Field(default=40, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: PositiveFloat = 1e-8
    lambda_lpe: float = 1.0
    lambda_gse: float = 1.0
    clip_grad_norm: Optional[PositiveFloat] = None
    cache_stage1: bool = False


class TrainSection(BaseModel):
    stage1: Stage1Config = Stage1Config()
    stage2: Stage2Config = Stage2Config()


class AblationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    flags: List[str] = Field(default_factory=list)

    @field_validator("flags")
    @classmethod
    def _known_flags(cls, flags: List[str]) -> List[str]:
        unknown = [flag for flag in flags if flag not in ABLATION_FLAGS]
        if unknown:
            raise ValueError(f"unknown ablation flag(s) {unknown}; expected a subset of {list(ABLATION_FLAGS)}")
        return sorted(set(flags))


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # predicted separators with energy above this are written as pauses by infer
    pause_energy_threshold: float = 0.1


class TrainConfig(BaseModel):
    """Flattened view of the settings one training stage needs."""
    stage: Literal[1, 2]
    lr_encoder: PositiveFloat = 1e-5
    lr_rest: PositiveFloat = 1e-3
    lr_stage2: PositiveFloat = 2e-4
    batch_size: PositiveInt = 16
    epochs: int = Field(default=40, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: PositiveFloat = 1e-8
    lambdas: Tuple[float, ...] = (0.05, 0.0025, 1.0, 1.0)
    seed: int = 1234
    ablation: List[str] = Field(default_factory=list)
    clip_grad_norm: Optional[PositiveFloat] = None
    cache_stage1: bool = False


class ProsodyConfig(BaseModel):
    """Root configuration object."""
    model_config = ConfigDict(extra="forbid")

    seed: int = 1234
    model: ModelConfig = ModelConfig()
    train: TrainSection = TrainSection()
    ablation: AblationConfig = AblationConfig()
    eval: EvalConfig = EvalConfig()

    def train_config(self, stage: int) -> TrainConfig:
        if stage == 1:
            s1 = self.train.stage1
            return TrainConfig(
                stage=1,
                lr_encoder=s1.lr_encoder,
                lr_rest=s1.lr_rest,
                batch_size=s1.batch_size,
                epochs=s1.epochs,
                betas=s1.betas,
                eps=s1.eps,
                lambdas=(s1.lambda_pitch, s1.lambda_energy, s1.lambda_lpe, s1.lambda_gse),
                seed=self.seed,
                ablation=list(self.ablation.flags),
                clip_grad_norm=s1.clip_grad_norm,
            )
        if stage == 2:
            s2 = self.train.stage2
            return TrainConfig(
                stage=2,
                lr_stage2=s2.lr_stage2,
                batch_size=s2.batch_size,
                epochs=s2.epochs,
                betas=s2.betas,
                eps=s2.eps,
                lambdas=(s2.lambda_lpe, s2.lambda_gse),
                seed=self.seed,
                ablation=list(self.ablation.flags),
                clip_grad_norm=s2.clip_grad_norm,
                cache_stage1=s2.cache_stage1,
            )
        raise ValidationFailure(f"stage must be 1 or 2, got {stage}")

    def config_hash(self) -> str:
        """Digest of everything that changes the stage-1 tensor layout or wiring."""
        payload = {
            "model": self.model.model_dump(mode="json", exclude={"adapter"}),
            "adapter": None if self.model.adapter is None else {
                "provider": self.model.adapter.provider,
                "model_id": self.model.adapter.model_id,
            },
            "ablation": list(self.ablation.flags),
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def load_config(path: Optional[Path] = None) -> ProsodyConfig:
    """Load a TOML config (all defaults when path is None) and apply PROSO_SEED."""
    data: dict = {}
    if path is not None:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    config = ProsodyConfig.model_validate(data)

    env_seed = os.getenv("PROSO_SEED")
    if env_seed:
        try:
            config = config.model_copy(update={"seed": int(env_seed)})
        except ValueError as exc:
            raise ValidationFailure(f"PROSO_SEED must be an integer, got {env_seed!r}") from exc
    return config
