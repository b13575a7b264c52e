"""Типы данных эпизодов: фантомные субъекты, пары изображений, эпизоды."""
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from app.core.exceptions import ShapeError
from app.schemas.sampler import TaskKind

INPUT_CHANNELS = 3


@dataclass(frozen=True)
class PhantomSubject:
    """
    Процедурный двумерный субъект.

    seg_map: метки [H, W] (0 фон, 1 череп, 2.. анатомия)
    modalities: изображения [M, H, W] в [0, 1]
    brain_mask: бинарная маска мозга [H, W]
    """

    subject_id: int
    dataset_id: int
    seg_map: np.ndarray
    modalities: np.ndarray
    brain_mask: np.ndarray

    @property
    def has_skull(self) -> bool:
        return bool((self.seg_map == 1).any())

    @property
    def image_size(self) -> int:
        return int(self.seg_map.shape[-1])

    @property
    def n_modalities(self) -> int:
        return int(self.modalities.shape[0])


@dataclass(frozen=True)
class ImagePair:
    """Пара (вход [3, H, W], цель [1, H, W]) вместе с анатомией субъекта."""

    input: np.ndarray
    target: np.ndarray
    subject_id: int
    dataset_id: int
    seg_map: np.ndarray | None = None
    brain_mask: np.ndarray | None = None

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.input, self.target], axis=0)


@dataclass(frozen=True)
class Episode:
    query: ImagePair
    context: tuple[ImagePair, ...]
    task_kind: TaskKind
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.context:
            raise ShapeError("Episode context must be nonempty")
        shape = self.query.input.shape[-2:]
        for pair in self.pairs:
            if pair.input.shape != (INPUT_CHANNELS, *shape) or pair.target.shape != (1, *shape):
                raise ShapeError(
                    f"Episode pair shapes {pair.input.shape}/{pair.target.shape} do not match {shape}"
                )

    @property
    def input(self) -> np.ndarray:
        return self.query.input

    @property
    def target(self) -> np.ndarray:
        return self.query.target

    @property
    def seg_map(self) -> np.ndarray | None:
        return self.query.seg_map

    @property
    def loss_kind(self) -> str:
        return self.task_kind.loss_kind

    @property
    def context_size(self) -> int:
        return len(self.context)

    @property
    def pairs(self) -> tuple[ImagePair, ...]:
        """Запрос первым, затем контекст."""
        return (self.query, *self.context)

    def with_pairs(self, pairs: list[ImagePair] | tuple[ImagePair, ...], **meta: Any) -> "Episode":
        return replace(self, query=pairs[0], context=tuple(pairs[1:]), meta={**self.meta, **meta})

    def context_array(self) -> np.ndarray:
        """Контекст в виде [N, 4, H, W]."""
        return np.stack([pair.stacked() for pair in self.context])


def collate(episodes: list[Episode]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Собирает батч эпизодов с одинаковым размером контекста.

    Args:
        episodes: Эпизоды одного размера N

    Returns:
        tuple: вход [B, 3, H, W], контекст [N, B, 4, H, W], цель [B, 1, H, W]
    """
    sizes = {ep.context_size for ep in episodes}
    if len(sizes) != 1:
        raise ShapeError(f"Cannot batch episodes with context sizes {sorted(sizes)}")
    x = np.stack([ep.input for ep in episodes]).astype(np.float32)
    y = np.stack([ep.target for ep in episodes]).astype(np.float32)
    ctx = np.stack([ep.context_array() for ep in episodes], axis=1).astype(np.float32)
    return x, ctx, y
