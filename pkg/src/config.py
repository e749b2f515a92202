"""
Configuration models for the GVS pipeline.

All science parameters live here as pydantic models. Config files are JSON;
the command line adds flat `key.sub=value` overrides on top. Every resolved
configuration is content-addressed by `config_hash`, which is stable under
key reordering.
"""

import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Type, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import InvalidConfigError

load_dotenv()

logger = logging.getLogger(__name__)

T = TypeVar("T", bound=BaseModel)


class _StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class GeneratorSpec(_StrictModel):
    """Encoder-decoder generator with residual blocks at the bottleneck."""
    base_channels: int = Field(32, ge=1)
    n_downsampling: int = Field(2, ge=0)
    n_residual_blocks: int = Field(4, ge=0)
    norm: Literal["instance", "batch", "none"] = "instance"
    # Predict x + residual instead of the image directly.
    residual_head: bool = False


class SegmentorSpec(_StrictModel):
    """U-Net segmentor producing two-class (no-tumor, tumor) probabilities."""
    depth: int = Field(4, ge=1)
    base_channels: int = Field(32, ge=1)
    skip_connections: bool = True
    num_classes: Literal[2] = 2
    norm: Literal["batch", "instance", "none"] = "batch"


class TrainConfig(_StrictModel):
    """Hyperparameters of the alternating generator/segmentor optimization."""
    lambda_: float = 10.0
    lr: float = 0.001
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = Field(8, ge=1)
    epochs: int = 20
    use_difference_aware: bool = True
    wce_mode: Literal["two_class", "literal"] = "two_class"
    weight_floor: float = Field(0.1, ge=0.1, le=1.0)
    a_steps: int = Field(1, ge=1)
    b_steps: int = Field(1, ge=1)
    train_fraction: float = Field(1.0, gt=0.0, le=1.0)
    shuffle: bool = True
    seed: int = 0
    generator: GeneratorSpec = Field(default_factory=GeneratorSpec)
    segmentor: SegmentorSpec = Field(default_factory=SegmentorSpec)

    @field_validator("lambda_")
    @classmethod
    def _lambda_positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("lambda_ must be > 0")
        return value

    @field_validator("lr")
    @classmethod
    def _lr_positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("lr must be > 0")
        return value

    @field_validator("epochs")
    @classmethod
    def _epochs_positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("epochs must be >= 1")
        return value


class EnhanceConfig(_StrictModel):
    """Lesion-contrast enhancement settings."""
    alpha_grid: List[float] = Field(default_factory=lambda: [0.0, 0.3, 0.5, 0.7, 1.0])
    sign_mode: Literal["paper_literal", "pathological_residue"] = "pathological_residue"
    clamp_output: bool = True

    @field_validator("alpha_grid")
    @classmethod
    def _grid_valid(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("alpha_grid must not be empty")
        if any(alpha < 0 for alpha in value):
            raise ValueError("every alpha must be >= 0")
        return value


class ADiceConfig(_StrictModel):
    """Evaluation-segmentor training used by the A-Dice healthiness metric."""
    eval_lr: float = 0.1
    epochs: int = 20
    optimizer: Literal["adam", "sgd"] = "sgd"
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    grad_clip: Optional[float] = Field(1.0, gt=0.0)
    batch_size: int = Field(8, ge=1)
    repeats: int = Field(3, ge=1)
    seeds: Optional[List[int]] = None
    segmentor: SegmentorSpec = Field(default_factory=SegmentorSpec)

    @field_validator("eval_lr")
    @classmethod
    def _lr_positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("eval_lr must be > 0")
        return value

    @field_validator("epochs")
    @classmethod
    def _epochs_positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("epochs must be >= 1")
        return value

    @model_validator(mode="after")
    def _seeds_cover_repeats(self) -> "ADiceConfig":
        if self.seeds is not None and len(self.seeds) < self.repeats:
            raise ValueError(f"seeds lists {len(self.seeds)} entries for {self.repeats} repeats")
        return self

    def repeat_seeds(self) -> List[int]:
        if self.seeds is not None:
            return list(self.seeds[: self.repeats])
        return list(range(self.repeats))


class PhantomConfig(_StrictModel):
    """Recipe parameters of the synthetic phantom dataset."""
    seed: int = 0
    height: int = Field(64, ge=32)
    width: int = Field(64, ge=32)
    count: int = Field(200, ge=1)
    lesion_amp: float = Field(0.3, ge=0.0, le=1.0)
    lesion_sign: Literal[1, -1] = 1
    max_lesions: int = Field(2, ge=1)
    noise_std: float = Field(0.0, ge=0.0)
    test_fraction: float = Field(0.2, ge=0.0, lt=1.0)


class RunConfig(_StrictModel):
    """Everything needed to reproduce one CLI invocation."""
    subcommand: str
    seed: int = 0
    out_dir: str
    arguments: Dict[str, Any] = Field(default_factory=dict)
    configs: Dict[str, Dict[str, Any]] = Field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.model_dump(mode="json"))


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(config: Any) -> str:
    """SHA-256 of the canonical JSON form; accepts a model or a plain mapping."""
    if isinstance(config, BaseModel):
        config = config.model_dump(mode="json")
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def build_config(model_cls: Type[T], data: Optional[Dict[str, Any]] = None) -> T:
    """Validate `data` into `model_cls`, reporting violations as InvalidConfigError."""
    try:
        return model_cls.model_validate(data or {})
    except ValidationError as e:
        raise InvalidConfigError(
            f"Invalid {model_cls.__name__}: {e.errors()[0]['msg']}",
            model=model_cls.__name__,
            details=[f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors()],
        ) from e


def _parse_override_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply `a.b.c=value` overrides to a nested dict (returns a new dict)."""
    result = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise InvalidConfigError(f"Override must look like key=value: {item!r}", override=item)
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise InvalidConfigError(f"Empty override key: {item!r}", override=item)
        node = result
        for part in parts[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            node = child
        node[parts[-1]] = _parse_override_value(raw)
    return result


def load_config(model_cls: Type[T], path: Optional[str] = None, overrides: Sequence[str] = ()) -> T:
    """Load a JSON config file (optional), apply overrides, validate."""
    data: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise InvalidConfigError(f"Config file not found: {path}", path=path) from e
        except json.JSONDecodeError as e:
            raise InvalidConfigError(f"Config file is not valid JSON: {path} ({e})", path=path) from e
    if overrides:
        data = apply_overrides(data, overrides)
    return build_config(model_cls, data)


def log_level_from_env(default: str = "INFO") -> int:
    """Output verbosity is the only setting taken from the environment (GVS_LOG_LEVEL)."""
    name = os.getenv("GVS_LOG_LEVEL", default).upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        logger.warning(f"⚠️  Unknown GVS_LOG_LEVEL={name!r}, falling back to {default}")
        return logging.getLevelName(default)
    return level
