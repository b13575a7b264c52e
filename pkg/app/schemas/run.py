from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing_extensions import Self

from app.schemas.augment import AugNode, default_tree
from app.schemas.evaluate import EvalConfig
from app.schemas.model import BaselineConfig, ModelConfig
from app.schemas.sampler import SamplerConfig
from app.schemas.train import TrainConfig


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    run_dir: Path = Path("runs/default")
    pool_cache: Path | None = None


class RunConfig(BaseModel):
    """Полная конфигурация запуска (JSON), неизвестные ключи запрещены."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    model: ModelConfig = Field(default_factory=ModelConfig)
    baseline: BaselineConfig | None = None
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    augment_tree: AugNode = Field(default_factory=default_tree)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    seed: int = 0

    @model_validator(mode="after")
    def _fill_baseline(self) -> Self:
        if self.baseline is None:
            object.__setattr__(self, "baseline", BaselineConfig(image_size=self.model.image_size))
        elif self.baseline.image_size != self.model.image_size:
            raise ValueError("baseline.image_size must match model.image_size")
        return self
