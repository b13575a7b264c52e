from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing_extensions import Self


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    channels: int = Field(16, ge=2)
    stages: int = Field(4, ge=1)
    in_channels: int = Field(3, ge=1)
    ctx_pair_channels: int = Field(4, ge=2)
    out_channels: int = Field(1, ge=1)
    image_size: int = Field(32, ge=8)

    @model_validator(mode="after")
    def _check_divisible(self) -> Self:
        factor = 2 ** (self.stages - 1)
        if self.image_size % factor:
            raise ValueError(f"image_size {self.image_size} must be divisible by {factor}")
        if self.ctx_pair_channels != self.in_channels + self.out_channels:
            raise ValueError("ctx_pair_channels must equal in_channels + out_channels")
        return self

    @property
    def block_scales(self) -> list[int]:
        down = list(range(self.stages))
        return down + down[-2::-1]


class BaselineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    width: int = Field(16, ge=1)
    stages: int = Field(4, ge=2)
    in_channels: int = Field(3, ge=1)
    out_channels: int = Field(1, ge=1)
    image_size: int = Field(32, ge=8)

    @model_validator(mode="after")
    def _check_divisible(self) -> Self:
        factor = 2 ** (self.stages - 1)
        if self.image_size % factor:
            raise ValueError(f"image_size {self.image_size} must be divisible by {factor}")
        return self
