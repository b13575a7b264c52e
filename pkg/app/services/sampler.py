"""Сэмплер эпизодов: выбор задачи, правило смешивания датасетов, построение пар."""
from dataclasses import dataclass, replace
from typing import Any

import numpy as np
from scipy import ndimage

from app.core.exceptions import SamplingError
from app.models.episode import INPUT_CHANNELS, Episode, ImagePair, PhantomSubject
from app.schemas.sampler import MASK_TASKS, SamplerConfig, TaskKind
from app.services.corruptions import corrupt
from app.services.perlin import perlin_mask
from app.services.phantoms import ANATOMY_LABELS
from app.utils.logging import app_logger as logger
from app.utils.rng import child_seed, make_rng

MIXING_MODES = ("same", "random", "exclude")
SEVERITY_RANGE = (0.5, 1.0)
# Маска дыр inpainting всегда в последнем канале
HOLE_CHANNEL = INPUT_CHANNELS - 1

# Для этих задач модальности контекста совпадают с модальностями входа
FIXED_MODALITY_TASKS = frozenset({TaskKind.SEGMENTATION, TaskKind.MODALITY_TRANSFER})
CORRUPTION_BY_TASK = {
    TaskKind.MOTION_RECON: ("motion",),
    TaskKind.UNDERSAMPLED_RECON: ("undersample",),
    TaskKind.DENOISE_BIAS: ("noise", "bias"),
}


def sample_task_kind(
        weights: dict[TaskKind, float],
        rng: np.random.Generator,
        holdout: set[TaskKind] | frozenset[TaskKind] = frozenset(),
) -> TaskKind:
    """
    Категориальный выбор задачи пропорционально весам, исключенные задачи не выбираются.

    Args:
        weights: Веса задач
        rng: Генератор
        holdout: Исключенные задачи

    Returns:
        TaskKind: Выбранная задача
    """
    kinds = [k for k in TaskKind if k not in holdout and weights.get(k, 0.0) > 0]
    if not kinds:
        raise SamplingError("All task weights are zero after applying the holdout")
    p = np.array([weights[k] for k in kinds], dtype=np.float64)
    return kinds[int(rng.choice(len(kinds), p=p / p.sum()))]


def sample_context_size(context_size_max: int, rng: np.random.Generator) -> int:
    return int(rng.integers(1, context_size_max + 1))


@dataclass(frozen=True)
class TaskRecipe:
    """Общие для всего эпизода параметры задачи."""

    kind: TaskKind
    classes: tuple[int, ...] = ()
    input_modalities: tuple[int, ...] = ()
    target_modality: int | None = None
    sr_factor: int = 1
    severity: float = 0.0
    n_modalities: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "n_modalities": self.n_modalities, **self.as_meta()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TaskRecipe":
        return cls(
            kind=TaskKind(data["kind"]),
            classes=tuple(data.get("classes", ())),
            input_modalities=tuple(data.get("input_modalities", ())),
            target_modality=data.get("target_modality"),
            sr_factor=int(data.get("sr_factor", 1)),
            severity=float(data.get("severity", 0.0)),
            n_modalities=int(data.get("n_modalities", 1)),
        )

    def as_meta(self) -> dict[str, Any]:
        return {
            "classes": list(self.classes),
            "input_modalities": list(self.input_modalities),
            "target_modality": self.target_modality,
            "sr_factor": self.sr_factor,
            "severity": self.severity,
        }


def down_up(img: np.ndarray, factor: int) -> np.ndarray:
    """Усреднение блоками factor×factor и билинейное увеличение обратно."""
    if factor == 1:
        return img.copy()
    h, w = img.shape
    low = img.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return ndimage.zoom(low, factor, order=1, mode="nearest", grid_mode=True).astype(img.dtype)


def _available_modalities(n_modalities: int, cfg: SamplerConfig) -> list[int]:
    held = cfg.held_out_modalities()
    return [m for m in range(n_modalities) if m not in held]


def _choose_modalities(available: list[int], k_max: int, rng: np.random.Generator) -> tuple[int, ...]:
    k = int(rng.integers(1, min(k_max, len(available)) + 1))
    return tuple(int(m) for m in rng.choice(available, size=k, replace=False))


def make_recipe(
        kind: TaskKind,
        n_modalities: int,
        cfg: SamplerConfig,
        rng: np.random.Generator,
        seg_classes: list[int] | None = None,
) -> TaskRecipe:
    """
    Выбирает параметры задачи, общие для запроса и всех пар контекста.

    Args:
        kind: Тип задачи
        n_modalities: Число модальностей у субъектов пула
        cfg: Настройки сэмплера
        rng: Генератор
        seg_classes: Явный набор классов для сегментации

    Returns:
        TaskRecipe: Рецепт задачи
    """
    available = _available_modalities(n_modalities, cfg)
    if not available:
        raise SamplingError("Modality holdout leaves no modality to sample")
    k_max = cfg.max_input_modalities
    if kind == TaskKind.INPAINTING:
        # один канал занимает маска дыр
        k_max = min(k_max, INPUT_CHANNELS - 1)

    if kind == TaskKind.SEGMENTATION:
        if seg_classes is None:
            held = cfg.held_out_classes()
            candidates = [c for c in ANATOMY_LABELS if c not in held]
            if not candidates:
                raise SamplingError("Class holdout exhausts all segmentation classes")
            size = int(rng.integers(1, min(cfg.seg_subset_max, len(candidates)) + 1))
            seg_classes = sorted(int(c) for c in rng.choice(candidates, size=size, replace=False))
        return TaskRecipe(
            kind, classes=tuple(seg_classes),
            input_modalities=_choose_modalities(available, k_max, rng), n_modalities=n_modalities,
        )

    if kind == TaskKind.MODALITY_TRANSFER:
        if len(available) < 2:
            raise SamplingError("Modality transfer needs at least two non-held-out modalities")
        target = int(rng.choice(available))
        rest = [m for m in available if m != target]
        return TaskRecipe(
            kind, input_modalities=_choose_modalities(rest, k_max, rng),
            target_modality=target, n_modalities=n_modalities,
        )

    recipe = TaskRecipe(kind, input_modalities=_choose_modalities(available, k_max, rng), n_modalities=n_modalities)
    if kind == TaskKind.SUPER_RESOLUTION:
        return replace(recipe, sr_factor=int(rng.choice(cfg.sr_factors)))
    if kind in CORRUPTION_BY_TASK:
        return replace(recipe, severity=float(rng.uniform(*SEVERITY_RANGE)))
    return recipe


def _pair_modalities(recipe: TaskRecipe, cfg: SamplerConfig, rng: np.random.Generator, is_query: bool) -> tuple[int, ...]:
    """Пары контекста в задачах без фиксированных модальностей получают собственный набор."""
    if is_query or recipe.kind in FIXED_MODALITY_TASKS:
        return recipe.input_modalities
    available = _available_modalities(recipe.n_modalities, cfg)
    k_max = cfg.max_input_modalities
    if recipe.kind == TaskKind.INPAINTING:
        k_max = min(k_max, INPUT_CHANNELS - 1)
    return _choose_modalities(available, k_max, rng)


def build_pair(
        subject: PhantomSubject,
        recipe: TaskRecipe,
        modalities: tuple[int, ...],
        rng: np.random.Generator,
) -> ImagePair:
    """
    Строит пару (вход, цель) для одного субъекта по рецепту задачи.

    Неиспользуемые каналы входа остаются нулевыми.

    Args:
        subject: Субъект
        recipe: Общий рецепт задачи
        modalities: Модальности входа этой пары
        rng: Генератор пары (шум, маски дыр)

    Returns:
        ImagePair: Пара изображений
    """
    size = subject.image_size
    x = np.zeros((INPUT_CHANNELS, size, size), dtype=np.float32)
    images = subject.modalities[list(modalities)]
    kind = recipe.kind

    if kind == TaskKind.SEGMENTATION:
        x[: len(modalities)] = images
        y = np.isin(subject.seg_map, recipe.classes).astype(np.float32)
    elif kind == TaskKind.SKULL_STRIPPING:
        x[: len(modalities)] = images
        y = subject.brain_mask.astype(np.float32)
    elif kind == TaskKind.MODALITY_TRANSFER:
        x[: len(modalities)] = images
        y = subject.modalities[recipe.target_modality].copy()
    elif kind == TaskKind.SUPER_RESOLUTION:
        x[: len(modalities)] = [down_up(img, recipe.sr_factor) for img in images]
        y = images[0].copy()
    elif kind in CORRUPTION_BY_TASK:
        for c, img in enumerate(images):
            out = img
            for corruption in CORRUPTION_BY_TASK[kind]:
                out = corrupt(out, corruption, recipe.severity, child_seed(rng))
            x[c] = out
        y = images[0].copy()
    elif kind == TaskKind.INPAINTING:
        holes = perlin_mask((size, size), cell=max(2, size // 4), seed=child_seed(rng))
        x[: len(modalities)] = images * (1 - holes)
        x[HOLE_CHANNEL] = holes
        y = images[0].copy()
    else:
        raise SamplingError(f"Unknown task kind: {kind}")

    return ImagePair(
        input=x,
        target=y[None].astype(np.float32),
        subject_id=subject.subject_id,
        dataset_id=subject.dataset_id,
        seg_map=subject.seg_map.copy(),
        brain_mask=subject.brain_mask.copy(),
    )


def choose_context(
        query: PhantomSubject,
        candidates: list[PhantomSubject],
        n: int,
        mixing_probs: tuple[float, float, float],
        rng: np.random.Generator,
) -> tuple[list[PhantomSubject], str]:
    """
    Правило смешивания: весь контекст из датасета входа, из случайных датасетов
    или из датасетов, отличных от датасета входа.

    Если выбранный режим нельзя выполнить на данном пуле, используется режим random.

    Returns:
        tuple: (субъекты контекста, режим)
    """
    others = [s for s in candidates if s.subject_id != query.subject_id]
    if len(others) < n:
        raise SamplingError(f"Pool has {len(others)} candidate subjects, context needs {n}")

    mode = MIXING_MODES[int(rng.choice(3, p=np.asarray(mixing_probs)))]
    if mode == "same":
        eligible = [s for s in others if s.dataset_id == query.dataset_id]
    elif mode == "exclude":
        eligible = [s for s in others if s.dataset_id != query.dataset_id]
    else:
        eligible = others
    if len(eligible) < n:
        logger.debug(f"Mixing mode {mode} needs {n} subjects, only {len(eligible)} eligible; using random")
        mode, eligible = "random", others

    idx = rng.choice(len(eligible), size=n, replace=False)
    return [eligible[int(i)] for i in idx], mode


def build_episode(
        kind: TaskKind,
        pool: list[PhantomSubject],
        cfg: SamplerConfig,
        rng: np.random.Generator,
        context_size: int | None = None,
        context_pool: list[PhantomSubject] | None = None,
        seg_classes: list[int] | None = None,
        recipe: TaskRecipe | None = None,
) -> Episode:
    """
    Строит один эпизод задачи kind.

    Args:
        kind: Тип задачи
        pool: Пул субъектов для запроса
        cfg: Настройки сэмплера
        rng: Генератор
        context_size: Размер контекста (по умолчанию ~ U{1..N_max})
        context_pool: Пул кандидатов для контекста (по умолчанию pool)
        seg_classes: Явный набор классов для сегментации
        recipe: Готовый рецепт задачи (для парного сравнения с базовыми U-Net)

    Returns:
        Episode: Эпизод с запросом, контекстом и meta для аудита
    """
    if not pool:
        raise SamplingError("Cannot build an episode from an empty pool")
    n = sample_context_size(cfg.context_size_max, rng) if context_size is None else context_size
    candidates = pool if context_pool is None else context_pool

    query = pool[int(rng.integers(len(pool)))]
    context, mode = choose_context(query, candidates, n, cfg.mixing_probs, rng)
    if recipe is None:
        recipe = make_recipe(kind, query.n_modalities, cfg, rng, seg_classes)
    elif recipe.kind != kind:
        raise SamplingError(f"Recipe for {recipe.kind.value} used to build a {kind.value} episode")

    pairs = [
        build_pair(subject, recipe, _pair_modalities(recipe, cfg, rng, i == 0), make_rng(child_seed(rng)))
        for i, subject in enumerate([query, *context])
    ]
    meta = recipe.as_meta() | {"mixing": mode, "mask_channel": None}
    if kind == TaskKind.INPAINTING:
        meta["mask_channel"] = HOLE_CHANNEL
    return Episode(query=pairs[0], context=tuple(pairs[1:]), task_kind=kind, meta=meta)


def sample_episode(
        pool: list[PhantomSubject],
        cfg: SamplerConfig,
        rng: np.random.Generator,
        context_size: int | None = None,
) -> Episode:
    kind = sample_task_kind(cfg.task_weights, rng, cfg.held_out_tasks())
    return build_episode(kind, pool, cfg, rng, context_size)


def audit_episode(ep: Episode, cfg: SamplerConfig | None = None) -> list[str]:
    """
    Проверяет конструкцию эпизода и возвращает список нарушений (пустой, если все в порядке).

    Args:
        ep: Эпизод до аугментаций
        cfg: Настройки сэмплера для проверки исключений

    Returns:
        list[str]: Описания нарушений
    """
    problems: list[str] = []
    if ep.query.subject_id in {p.subject_id for p in ep.context}:
        problems.append(f"input subject {ep.query.subject_id} appears in its own context")

    for index, pair in enumerate(ep.pairs):
        where = "input" if index == 0 else f"context[{index - 1}]"
        if ep.task_kind in MASK_TASKS and not np.isin(pair.target, (0, 1)).all():
            problems.append(f"{where}: mask target is not binary")
        if ep.task_kind == TaskKind.INPAINTING:
            hole_channel = ep.meta.get("mask_channel")
            if hole_channel is None:
                problems.append(f"{where}: inpainting episode without a hole channel")
                continue
            visible = pair.input[hole_channel] == 0
            if not np.allclose(pair.input[0][visible], pair.target[0][visible]):
                problems.append(f"{where}: target differs from input outside the holes")
        if ep.task_kind == TaskKind.SUPER_RESOLUTION:
            expected = down_up(pair.target[0], ep.meta["sr_factor"])
            if not np.allclose(pair.input[0], expected, atol=1e-6):
                problems.append(f"{where}: input is not the down-up resampled target")
        if ep.task_kind == TaskKind.SEGMENTATION and pair.seg_map is not None:
            expected = np.isin(pair.seg_map, ep.meta["classes"])
            if not np.array_equal(expected, pair.target[0].astype(bool)):
                problems.append(f"{where}: target does not mark classes {ep.meta['classes']}")

    if cfg is not None:
        if ep.task_kind in cfg.held_out_tasks():
            problems.append(f"held-out task {ep.task_kind.value} sampled")
        held_mod = cfg.held_out_modalities()
        if held_mod & set(ep.meta.get("input_modalities", [])):
            problems.append(f"held-out modality in input {ep.meta['input_modalities']}")
        held_cls = cfg.held_out_classes()
        if held_cls & set(ep.meta.get("classes", [])):
            problems.append(f"held-out class in target {ep.meta['classes']}")
    return problems
