from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Field, model_validator


class Activation(str, Enum):
    TANH = "tanh"
    SOFTPLUS = "softplus"


class DipNetConfig(BaseModel):
    """Network section: projected low-rank ResNet architecture."""
    breadth: int = Field(25, ge=2)
    depth: int = Field(20, ge=1)
    layer_rank: int = Field(10, ge=1)
    activation: Activation = Activation.TANH
    adaptive: bool = False
    max_depth: Optional[int] = Field(None, ge=1)  # adaptive growth ceiling

    @model_validator(mode="after")
    def check_rank(self) -> "DipNetConfig":
        if self.layer_rank >= self.breadth:
            raise ValueError("layer_rank must be smaller than breadth")
        if self.max_depth is not None and self.max_depth < self.depth:
            raise ValueError("max_depth must be at least depth")
        return self

    @property
    def depth_limit(self) -> int:
        return self.max_depth if self.max_depth is not None else self.depth


class TrainConfig(BaseModel):
    """Training section."""
    epochs: int = Field(500, ge=1)
    batch: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0)
    patience: int = Field(20, ge=1)
    split: float = Field(0.2, gt=0, lt=1)  # validation fraction of the training pool
    min_improvement: float = Field(1e-3, ge=0)
    init_output_bias: bool = True
    log_every: int = Field(50, ge=1)


class TrainReport(BaseModel):
    """Loss curves and best-validation summary of one training run."""
    train_losses: List[float]
    val_losses: List[float]
    best_epoch: int
    best_val_loss: float
    depth_history: List[int] = []  # epochs at which a residual layer was appended
    final_depth: int
    epochs_run: int
    seed: int
