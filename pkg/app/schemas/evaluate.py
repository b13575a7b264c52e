from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

from app.schemas.sampler import TaskKind

CSV_COLUMNS = (
    "model_id",
    "task_kind",
    "holdout",
    "n",
    "metric",
    "mean",
    "std",
    "n_episodes",
)


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    sizes: list[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    episodes_per_cell: int = Field(50, ge=20)
    bootstrap: int = Field(8, ge=1)
    tasks: list[TaskKind] = Field(default_factory=lambda: [TaskKind.SEGMENTATION, TaskKind.DENOISE_BIAS])
    seed: int = 1234
    dump_episodes: int = Field(0, ge=0)


class EvalRow(BaseModel):
    model_config = ConfigDict(frozen=True, protected_namespaces=())

    model_id: str
    task_kind: TaskKind
    holdout: bool = False
    n: int
    metric: Literal["dice", "psnr", "dice_rel", "psnr_rel", "dice_gap", "psnr_gap"]
    mean: float
    std: float = Field(ge=0)
    n_episodes: int

    def sort_key(self) -> tuple[str, str, int, str]:
        return self.model_id, self.task_kind.value, self.n, self.metric

    def as_csv(self) -> list[str]:
        return [
            self.model_id,
            self.task_kind.value,
            "1" if self.holdout else "0",
            str(self.n),
            self.metric,
            f"{self.mean:.6f}",
            f"{self.std:.6f}",
            str(self.n_episodes),
        ]


class EvalReport(BaseModel):
    rows: list[EvalRow] = Field(default_factory=list)

    def sorted(self) -> "EvalReport":
        return EvalReport(rows=sorted(self.rows, key=EvalRow.sort_key))

    def cell(self, model_id: str, task: TaskKind, n: int, metric: str | None = None) -> EvalRow:
        for row in self.rows:
            if row.model_id == model_id and row.task_kind == task and row.n == n:
                if metric is None or row.metric == metric:
                    return row
        raise KeyError(f"No report cell for {model_id}/{task.value}/{n}")
