from typing import Literal

from pydantic import BaseModel, ConfigDict, Field


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["dice", "mse"] = "mse"
    sigma2: float = Field(0.05, gt=0)
    dice_eps: float = Field(1e-6, gt=0)
    psnr_peak: float = Field(1.0, gt=0)
    psnr_cap: float = 99.0


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    steps_max: int = Field(5000, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(1e-4, gt=0)
    val_interval: int = Field(100, ge=1)
    patience_epochs: int = Field(25, ge=1)
    sigma2: float = Field(0.05, gt=0)
    grad_clip: float = Field(1.0, gt=0)
    n_val_episodes: int = Field(256, ge=1)
    log_interval: int = Field(50, ge=1)
    baseline_steps_max: int = Field(2000, ge=1)
