import json

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Type, TypeVar

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from ..core.errors import ConfigError

ModelT = TypeVar("ModelT", bound=BaseModel)

CONV_LEARNING_RATE = 0.001
FC_LEARNING_RATE = 0.0001

# Full-scale white-noise corpus; desk-scale defaults stay far below these caps.
FULL_SCALE_WHITE_NOISE_COUNT = 1_200_000
FULL_SCALE_WHITE_NOISE_CLASSES = 1001


class NetKind(str, Enum):
    CONV = "conv"
    FULLY_CONNECTED = "fully_connected"


class Head(str, Enum):
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


class StimulusConfig(BaseModel):
    image_size: int = 150
    vertex_distance: float = 116.0
    stroke_width: float = Field(default=4.0, gt=0)
    # Subsamples per pixel side used for coverage anti-aliasing.
    antialias_samples: int = Field(default=4, ge=1, le=16)
    offset: float = -8.0


class NetConfig(BaseModel):
    kind: NetKind = NetKind.CONV
    n_layers: int = 3
    n_classes: int = 3
    base_width: int = Field(default=16, gt=0)
    width_step: int = Field(default=16, ge=0)
    penultimate_width: int = 512
    head: Optional[Head] = None
    activation: Literal["relu", "tanh"] = "relu"
    input_shape: Tuple[int, int, int] = (150, 150, 3)
    precision: Literal["float32", "float64"] = "float32"

    @field_validator("n_layers")
    @classmethod
    def _check_layers(cls, v: int) -> int:
        if v not in (3, 5, 7):
            raise ValueError("n_layers must be one of 3, 5, 7")
        return v

    @field_validator("n_classes")
    @classmethod
    def _check_classes(cls, v: int) -> int:
        if v not in (2, 3, 6, 9):
            raise ValueError("n_classes must be one of 2, 3, 6, 9")
        return v

    @field_validator("penultimate_width")
    @classmethod
    def _check_penultimate(cls, v: int) -> int:
        if v != 512:
            raise ValueError("penultimate layer must have exactly 512 units")
        return v

    @model_validator(mode="after")
    def _resolve_head(self) -> "NetConfig":
        if self.head is None:
            self.head = Head.SIGMOID if self.n_classes == 2 else Head.SOFTMAX
        if self.head == Head.SIGMOID and self.n_classes != 2:
            raise ValueError("a single sigmoid unit can only encode 2 classes")
        if self.kind == NetKind.CONV:
            h, w, _ = self.input_shape
            if min(h, w) // (2 ** self.n_layers) < 1:
                raise ValueError(
                    f"input {h}x{w} is too small for {self.n_layers} pooling stages"
                )
        return self

    @property
    def widths(self) -> List[int]:
        return [self.base_width + i * self.width_step for i in range(self.n_layers)]

    @property
    def output_units(self) -> int:
        return 1 if self.head == Head.SIGMOID else self.n_classes

    def default_learning_rate(self) -> float:
        return CONV_LEARNING_RATE if self.kind == NetKind.CONV else FC_LEARNING_RATE


class AugmentationConfig(BaseModel):
    horizontal_flip: bool = True
    translation_range: float = 0.02
    featurewise_normalization: bool = True

    @field_validator("translation_range")
    @classmethod
    def _check_range(cls, v: float) -> float:
        if not 0.0 <= v < 0.5:
            raise ValueError("translation_range must lie in [0, 0.5)")
        return v

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(horizontal_flip=False, translation_range=0.0, featurewise_normalization=False)


class TrainingConfig(BaseModel):
    epochs: int = Field(default=100, ge=0)
    learning_rate: Optional[float] = Field(default=None, gt=0)
    batch_size: int = Field(default=32, gt=0)
    rho: float = Field(default=0.9, gt=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)
    checkpoint_epochs: List[int] = Field(default_factory=lambda: [0])
    early_stop_val_accuracy: Optional[float] = Field(default=None, gt=0, le=1)
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    # CD/BD stimulus training ignores `augmentation` unless this is set.
    augment_stimuli: bool = False

    def augmentation_for(self, dataset_kind: str) -> AugmentationConfig:
        if dataset_kind in ("cd", "bd") and not self.augment_stimuli:
            return AugmentationConfig.disabled()
        return self.augmentation


class DatasetConfig(BaseModel):
    kind: Literal["natural", "white_noise", "cd", "bd"] = "natural"
    root: Optional[Path] = None
    classes: int = Field(default=3, gt=0, le=FULL_SCALE_WHITE_NOISE_CLASSES)
    per_class: int = Field(default=100, gt=0)
    image_size: int = 150
    val_fraction: float = Field(default=0.25, ge=0, lt=1)
    white_noise_count: int = Field(default=900, gt=0, le=FULL_SCALE_WHITE_NOISE_COUNT)
    on_decode_error: Literal["skip", "fail"] = "fail"
    transform: Literal["none", "shuffled_pixels", "shuffled_labels"] = "none"
    per_image_shuffle: bool = False
    brightness: float = Field(default=1.0, gt=0)


class TrainRunConfig(BaseModel):
    """Schema of the file given to `gestaltclosure train --config`."""

    seed: int = 0
    net: NetConfig = Field(default_factory=NetConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    stimulus: StimulusConfig = Field(default_factory=StimulusConfig)
    triple_seed: int = 0
    split_seed: int = 0


class PlanKind(str, Enum):
    SANITY = "SanityCD_BD"
    WHITE_NOISE = "WhiteNoise"
    SHUFFLED_PIXELS = "ShuffledPixels"
    UNTRAINED = "Untrained"
    SHUFFLED_LABELS = "ShuffledLabels"
    CONV_VS_FC = "ConvVsFC"
    LAYER_WISE = "LayerWise"
    TRAJECTORY = "Trajectory"
    BRIGHTNESS = "Brightness"


class ExperimentPlan(BaseModel):
    name: PlanKind
    replications: int = Field(default=5, gt=0)
    base_seed: int = 0
    triple_seed: int = 0
    split_seed: int = 0
    strict_position: bool = False
    net: NetConfig = Field(default_factory=NetConfig)
    fc_net: Optional[NetConfig] = None
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    fc_training: Optional[TrainingConfig] = None
    stimulus: StimulusConfig = Field(default_factory=StimulusConfig)
    # None: every hidden layer for LayerWise, the penultimate layer otherwise.
    layers: Optional[List[str]] = None
    flatness_threshold: float = Field(default=0.1, gt=0)
    # Sanity check: C at the longest edge must exceed C at the shortest by more than this.
    min_rise: float = Field(default=0.2, ge=0)
    bootstrap_samples: int = Field(default=1000, gt=0)
    confidence: float = Field(default=0.95, gt=0, lt=1)
    alpha: float = Field(default=0.01, gt=0, lt=1)
    match_tolerance: float = Field(default=0.03, ge=0)
    match_attempts: int = Field(default=3, gt=0)
    match_lr_scales: List[float] = Field(default_factory=lambda: [1.0, 0.5, 2.0])
    checkpoint: Optional[Path] = None
    trajectory_epochs: List[int] = Field(default_factory=lambda: [0, 1, 2, 5, 10])
    trajectory_condition: PlanKind = PlanKind.SHUFFLED_PIXELS
    brightness_factors: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    sweep_classes: List[int] = Field(default_factory=list)
    sweep_layers: List[int] = Field(default_factory=list)
    jobs: Optional[int] = Field(default=None, gt=0)

    @field_validator("brightness_factors")
    @classmethod
    def _check_factors(cls, v: List[float]) -> List[float]:
        if any(f <= 0 for f in v):
            raise ValueError("brightness factors must be positive")
        return v

    def expand_sweeps(self) -> List["ExperimentPlan"]:
        """One plan per (n_classes, n_layers) combination listed in the sweeps."""
        classes = self.sweep_classes or [self.net.n_classes]
        layers = self.sweep_layers or [self.net.n_layers]
        plans = []
        for n_c in classes:
            for n_l in layers:
                net = self.net.model_copy(update={"n_classes": n_c, "n_layers": n_l, "head": None})
                net = NetConfig.model_validate(net.model_dump())
                dataset = self.dataset.model_copy(update={"classes": n_c})
                plans.append(
                    self.model_copy(
                        update={"net": net, "dataset": dataset, "sweep_classes": [], "sweep_layers": []}
                    )
                )
        return plans


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="GCL_", env_file=".env", extra="ignore")

    data_dir: Optional[Path] = Field(default=None)
    # Used when a run or plan file leaves `net.precision` unset.
    precision: Literal["float32", "float64"] = Field(default="float32")
    debug: bool = Field(default=False)
    log_level: str = Field(default="INFO")
    log_json: bool = Field(default=True)
    jobs: int = Field(default=1, gt=0)
    stroke_width: float = Field(default=4.0, gt=0)
    antialias_samples: int = Field(default=4, ge=1, le=16)

    def stimulus_config(self) -> StimulusConfig:
        return self.with_stimulus(StimulusConfig())

    def with_precision(self, net: NetConfig) -> NetConfig:
        if "precision" in net.model_fields_set:
            return net
        return net.model_copy(update={"precision": self.precision})

    def with_stimulus(self, stimulus: StimulusConfig) -> StimulusConfig:
        """Fill the stroke fields a run or plan file leaves unset from GCL_ settings."""
        update = {
            name: getattr(self, name)
            for name in ("stroke_width", "antialias_samples")
            if name not in stimulus.model_fields_set
        }
        return stimulus.model_copy(update=update)


def read_config_data(path: Path) -> dict:
    """Read a TOML, JSON or YAML file into a plain dict, chosen by suffix."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Configuration file not found: {path}")
    suffix = path.suffix.lower()
    try:
        if suffix == ".toml":
            with open(path, "rb") as f:
                return tomllib.load(f)
        if suffix == ".json":
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        if suffix in (".yaml", ".yml"):
            with open(path, "r", encoding="utf-8") as f:
                return yaml.safe_load(f) or {}
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"Cannot parse {path}: {e}") from e
    raise ConfigError(f"Unsupported configuration format '{suffix}' for {path}")


def load_config_file(path: Path, model: Type[ModelT]) -> ModelT:
    """Load and validate a configuration file, reporting field paths on failure."""
    data = read_config_data(path)
    try:
        return model.model_validate(data)
    except ValidationError as e:
        paths = [".".join(str(p) for p in err["loc"]) for err in e.errors()]
        details = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"Invalid configuration in {path}: {details}", paths) from e


# Global settings instance
settings = Settings()
