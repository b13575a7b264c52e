from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field

from app.schemas.model import BaselineConfig, ModelConfig
from app.schemas.sampler import Holdout, TaskKind


class HistoryEntry(BaseModel):
    step: int
    train_loss: float
    val_loss: float | None = None


class CheckpointMeta(BaseModel):
    """JSON-блок метаданных чекпоинта NLZ1."""

    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    model_kind: Literal["neuralizer", "baseline"]
    model: ModelConfig | None = None
    baseline: BaselineConfig | None = None
    baseline_task: TaskKind | None = None
    baseline_subjects: int | None = None
    step: int = 0
    best_val: float | None = None
    rng_state: dict[str, Any] | None = None
    adam: dict[str, float] = Field(default_factory=dict)
    history: list[HistoryEntry] = Field(default_factory=list)
    holdout: list[Holdout] = Field(default_factory=list)
    seed: int = 0
    replicate: int = 0
    epochs_since_improve: int = 0
    # фиксированный экземпляр задачи базовой U-Net (классы, модальности, фактор, сила артефакта)
    task_recipe: dict[str, Any] | None = None

    @property
    def image_size(self) -> int:
        config = self.model if self.model_kind == "neuralizer" else self.baseline
        return config.image_size
