from enum import Enum
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing_extensions import Self


class TaskKind(str, Enum):
    SEGMENTATION = "segmentation"
    MODALITY_TRANSFER = "modality_transfer"
    SUPER_RESOLUTION = "super_resolution"
    SKULL_STRIPPING = "skull_stripping"
    MOTION_RECON = "motion_recon"
    UNDERSAMPLED_RECON = "undersampled_recon"
    DENOISE_BIAS = "denoise_bias"
    INPAINTING = "inpainting"

    @property
    def loss_kind(self) -> Literal["dice", "mse"]:
        return "dice" if self in MASK_TASKS else "mse"


MASK_TASKS = frozenset({TaskKind.SEGMENTATION, TaskKind.SKULL_STRIPPING})

# Веса сэмплирования задач: медленно сходящиеся задачи получают больший вес
DEFAULT_TASK_WEIGHTS: dict[TaskKind, float] = {
    TaskKind.SEGMENTATION: 2.0,
    TaskKind.MODALITY_TRANSFER: 2.0,
    TaskKind.SUPER_RESOLUTION: 1.0,
    TaskKind.SKULL_STRIPPING: 0.5,
    TaskKind.MOTION_RECON: 0.5,
    TaskKind.DENOISE_BIAS: 0.5,
    TaskKind.UNDERSAMPLED_RECON: 1.0,
    TaskKind.INPAINTING: 1.0,
}


class Holdout(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["task", "modality", "class"]
    value: str

    @classmethod
    def parse(cls, spec: str) -> "Holdout":
        """
        Разбирает строку вида task:<kind>, modality:<id> или class:<id>.

        Args:
            spec: Строка из командной строки

        Returns:
            Holdout: Описание исключаемого элемента
        """
        kind, sep, value = spec.partition(":")
        if not sep or not value:
            raise ValueError(f"Holdout must look like task:<kind>, modality:<id> or class:<id>, got {spec!r}")
        return cls(kind=kind, value=value)

    @model_validator(mode="after")
    def _check_value(self) -> Self:
        if self.kind == "task":
            TaskKind(self.value)
        elif not self.value.isdigit():
            raise ValueError(f"{self.kind} holdout expects an integer id, got {self.value!r}")
        return self

    def __str__(self) -> str:
        return f"{self.kind}:{self.value}"


class PhantomConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_modalities: int = Field(4, ge=3)
    n_datasets: int = Field(4, ge=1)
    noise_amplitude: float = Field(0.03, ge=0)
    site_bias: float = Field(0.08, ge=0)


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    task_weights: dict[TaskKind, float] = Field(default_factory=lambda: dict(DEFAULT_TASK_WEIGHTS))
    context_size_max: int = Field(8, ge=1)
    # same dataset / random datasets / input dataset excluded
    mixing_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    holdout: list[Holdout] = Field(default_factory=list)
    seg_subset_max: int = Field(3, ge=1)
    sr_factors: list[int] = Field(default_factory=lambda: [2, 4])
    max_input_modalities: int = Field(3, ge=1, le=3)
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)
    n_train_subjects: int = Field(96, ge=4)
    val_fraction: float = Field(0.2, gt=0, lt=1)
    n_test_subjects: int = Field(48, ge=4)

    @field_validator("task_weights")
    def _check_weights(cls, v: dict[TaskKind, float]) -> dict[TaskKind, float]:
        if any(w < 0 for w in v.values()):
            raise ValueError("task weights must be non-negative")
        if not any(w > 0 for w in v.values()):
            raise ValueError("task weights must not be all zero")
        return v

    @field_validator("mixing_probs")
    def _check_mixing(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(p < 0 for p in v) or abs(sum(v) - 1.0) > 1e-6:
            raise ValueError("mixing probabilities must be non-negative and sum to 1")
        return v

    def held_out_tasks(self) -> set[TaskKind]:
        return {TaskKind(h.value) for h in self.holdout if h.kind == "task"}

    def held_out_modalities(self) -> set[int]:
        return {int(h.value) for h in self.holdout if h.kind == "modality"}

    def held_out_classes(self) -> set[int]:
        return {int(h.value) for h in self.holdout if h.kind == "class"}
