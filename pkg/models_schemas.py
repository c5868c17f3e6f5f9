import math
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from config import DEFAULT_CHECKPOINT_EVERY, DEFAULT_IMAGE_SIZE

# Every convolution in both networks uses this kernel and zero padding
KERNEL_SIZE = 4
PADDING = 1


class Task(str, Enum):
    """Training regimes"""
    CGAN = "cgan"
    CYCLEGAN = "cyclegan"


class Direction(str, Enum):
    """Translation directions: A = source images, B = masks"""
    A2B = "a2b"
    B2A = "b2a"


class GeneratorConfig(BaseModel):
    """U-Net generator architecture"""
    in_channels: int = Field(..., ge=1)
    out_channels: int = Field(..., ge=1)
    base_channels: int = Field(default=8, ge=1)
    depth: int = Field(default=3, ge=1)
    image_size: int = Field(default=DEFAULT_IMAGE_SIZE, ge=1)

    @field_validator("image_size")
    @classmethod
    def validate_power_of_two(cls, v):
        if v & (v - 1) != 0:
            raise ValueError(f"image_size must be a power of two, got {v}")
        return v

    @model_validator(mode="after")
    def validate_bottleneck(self):
        if self.image_size < 2 ** self.depth:
            raise ValueError(
                f"image_size {self.image_size} cannot be halved {self.depth} times (needs >= {2 ** self.depth})"
            )
        return self


class DiscriminatorConfig(BaseModel):
    """Patch discriminator architecture"""
    in_channels: int = Field(..., ge=1)
    base_channels: int = Field(default=8, ge=1)
    n_stride2_layers: int = Field(default=2, ge=1)

    def patch_grid_size(self, image_size: int) -> int:
        """Side of the logit grid for a square input; ValueError if a layer runs out of pixels."""
        size = image_size
        for stride in [2] * self.n_stride2_layers + [1, 1]:
            if size + 2 * PADDING < KERNEL_SIZE:
                raise ValueError(
                    f"image_size {image_size} is too small for {self.n_stride2_layers} stride-2 discriminator layers"
                )
            size = (size + 2 * PADDING - KERNEL_SIZE) // stride + 1
        return size


class SplitSpec(BaseModel):
    """Train/test partition request"""
    n_train: int = Field(..., ge=1)
    n_test: int = Field(..., ge=1)
    seed: int = 0

    @property
    def total(self) -> int:
        return self.n_train + self.n_test


class TrainConfig(BaseModel):
    """All hyperparameters of one training run"""
    task: Task
    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=1, ge=1)
    learning_rate: float = Field(default=2e-4, gt=0)
    adam_beta1: float = Field(default=0.5, gt=0, lt=1)
    adam_beta2: float = Field(default=0.999, gt=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    lambda_l1: float = Field(default=100.0, ge=0)
    lambda_cycle: float = Field(default=10.0, ge=0)
    seed: int = 0
    image_size: int = Field(default=DEFAULT_IMAGE_SIZE, ge=1)
    image_channels: int = Field(default=1)
    generator_base_channels: int = Field(default=8, ge=1)
    generator_depth: int = Field(default=3, ge=1)
    discriminator_base_channels: int = Field(default=8, ge=1)
    discriminator_stride2_layers: int = Field(default=2, ge=1)
    checkpoint_every: int = Field(default=DEFAULT_CHECKPOINT_EVERY, ge=1)
    split: Optional[SplitSpec] = None

    @field_validator("image_channels")
    @classmethod
    def validate_channels(cls, v):
        if v not in (1, 3):
            raise ValueError(f"image_channels must be 1 or 3, got {v}")
        return v

    @model_validator(mode="after")
    def validate_architecture(self):
        # Building the configs runs their own invariant checks
        self.generator_config()
        self.discriminator_config(self.image_channels + 1).patch_grid_size(self.image_size)
        return self

    def generator_config(self, direction: Direction = Direction.A2B) -> GeneratorConfig:
        """Generator for A->B (image to mask) or B->A (mask to image)."""
        channels = (self.image_channels, 1) if direction == Direction.A2B else (1, self.image_channels)
        return GeneratorConfig(
            in_channels=channels[0],
            out_channels=channels[1],
            base_channels=self.generator_base_channels,
            depth=self.generator_depth,
            image_size=self.image_size,
        )

    def discriminator_config(self, in_channels: int) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            in_channels=in_channels,
            base_channels=self.discriminator_base_channels,
            n_stride2_layers=self.discriminator_stride2_layers,
        )


class EpochRecord(BaseModel):
    """Mean losses of one epoch; inapplicable components are None"""
    epoch: int = Field(..., ge=1)
    g_loss: float
    d_loss: float
    g_adv: float
    g_l1: Optional[float] = None
    g_cycle: Optional[float] = None

    @model_validator(mode="after")
    def validate_finite(self):
        for name in ("g_loss", "d_loss", "g_adv", "g_l1", "g_cycle"):
            value = getattr(self, name)
            if value is not None and not math.isfinite(value):
                raise ValueError(f"{name} is not finite in epoch {self.epoch}")
        return self


class LossHistory(BaseModel):
    """Per-epoch loss trajectory of a run"""
    records: List[EpochRecord] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def series(self, name: str) -> List[Optional[float]]:
        return [getattr(r, name) for r in self.records]


class SampleMetrics(BaseModel):
    """Segmentation quality of one test sample"""
    name: str
    iou: float = Field(..., ge=0.0, le=1.0)
    dice: float = Field(..., ge=0.0, le=1.0)
    pixel_accuracy: float = Field(..., ge=0.0, le=1.0)


class MetricReport(BaseModel):
    """Per-sample and mean segmentation metrics"""
    samples: List[SampleMetrics] = Field(default_factory=list)
    mean_iou: float = Field(..., ge=0.0, le=1.0)
    mean_dice: float = Field(..., ge=0.0, le=1.0)
    mean_pixel_accuracy: float = Field(..., ge=0.0, le=1.0)
    n_samples: int = Field(..., ge=0)
    threshold: float = 0.0


class RunManifest(BaseModel):
    """Everything needed to re-run a CLI command"""
    command: str
    arguments: Dict[str, Any] = Field(default_factory=dict)
    config: Optional[Dict[str, Any]] = None
    inputs: List[str] = Field(default_factory=list)
    seed: Optional[int] = None
    artifacts: List[str] = Field(default_factory=list)
    duration_seconds: float = 0.0
    version: str = ""


class ModelInfo(BaseModel):
    """Inference service description of the loaded checkpoint"""
    task: Task
    image_size: int
    image_channels: int
    epochs_trained: int
    parameter_counts: Dict[str, int]
    loss_stability: Dict[str, float] = Field(default_factory=dict)


class HealthResponse(BaseModel):
    ok: bool
    service: str
    checkpoint_loaded: bool
    task: Optional[Task] = None
