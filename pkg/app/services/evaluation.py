"""Инференс с бутстрэпом контекста и оценка: кривые по размеру контекста, сравнение с исключением."""
import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from app.core.exceptions import ConfigError, ShapeError
from app.models.baseline import baseline_forward
from app.models.episode import Episode, PhantomSubject, collate
from app.models.neuralizer import forward
from app.models.params import BaselineUNetParams, NeuralizerParams
from app.schemas.evaluate import CSV_COLUMNS, EvalReport, EvalRow
from app.schemas.run import RunConfig
from app.schemas.sampler import Holdout, SamplerConfig, TaskKind
from app.services.augment_tree import SpatialTransform, random_transform, warp_input
from app.services.losses import dice_coefficient, psnr
from app.services.phantoms import TEST_SUBJECT_OFFSET
from app.services.sampler import TaskRecipe, build_episode
from app.storage.checkpoint import Checkpoint
from app.storage.pool_cache import load_or_generate_pool
from app.utils.images import montage, write_pgm
from app.utils.logging import app_logger as logger
from app.utils.rng import make_rng

BASELINE_ID = "baseline"
GAP_ID = "gap"
EVAL_CHUNK = 16
JITTER_DEGREES = 2.0
JITTER_PIXELS = 2.0
DUMP_CONTEXT_MAX = 8


@dataclass
class InferenceResult:
    # выход модели для MSE-задач, вероятность sigmoid для масок
    prediction: np.ndarray
    mask: np.ndarray | None = None
    logits: np.ndarray | None = None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _finalize(raw: np.ndarray, loss_kind: str) -> InferenceResult:
    if loss_kind == "dice":
        return InferenceResult(prediction=_sigmoid(raw), mask=(raw > 0).astype(np.uint8), logits=raw)
    return InferenceResult(prediction=raw, logits=raw)


def infer(x: np.ndarray, ctx: np.ndarray, params: NeuralizerParams, loss_kind: str = "mse") -> InferenceResult:
    """
    Один прямой проход Neuralizer.

    Args:
        x: Вход [B, 3, H, W]
        ctx: Контекст [N, B, 4, H, W], N ≥ 1
        params: Параметры модели
        loss_kind: "dice" добавляет бинарную маску (порог 0.5)

    Returns:
        InferenceResult: Предсказание и маска
    """
    if ctx.ndim != 5 or ctx.shape[0] == 0:
        raise ShapeError(f"Inference needs a nonempty context [N, B, 4, H, W], got {ctx.shape}")
    return _finalize(forward(x, ctx, params).numpy(), loss_kind)


def jitter_transform(shape: tuple[int, int], rng: np.random.Generator) -> SpatialTransform:
    """Малое аффинное: поворот ±2°, сдвиг ±2 px, без масштаба, отражения и упругой деформации."""
    return random_transform(
        shape, rng, max_rotation=JITTER_DEGREES, max_shift=JITTER_PIXELS,
        scale_range=(1.0, 1.0), p_elastic=0.0, p_flip=0.0,
    )


def bootstrap_context(
        ctx: np.ndarray,
        rng: np.random.Generator,
        loss_kind: str,
        resample: bool = True,
        jitter: bool = True,
        mask_channel: int | None = None,
) -> np.ndarray:
    """
    Контекст того же размера: выборка с возвращением и малые аффинные сдвиги каждой пары.

    Канал mask_channel во входе пары (маска дыр) после сдвига остается бинарным.
    """
    n, b = ctx.shape[:2]
    out = np.empty_like(ctx)
    target_order = 0 if loss_kind == "dice" else 1
    for j in range(b):
        idx = rng.integers(n, size=n) if resample else np.arange(n)
        for i, k in enumerate(idx):
            pair = ctx[k, j]
            if jitter:
                transform = jitter_transform(pair.shape[-2:], rng)
                pair = np.concatenate([
                    warp_input(pair[:-1], transform, mask_channel), transform.apply(pair[-1:], order=target_order)
                ])
            out[i, j] = pair
    return out


def infer_bootstrap(
        x: np.ndarray,
        ctx: np.ndarray,
        params: NeuralizerParams,
        n_bootstrap: int,
        rng: np.random.Generator,
        loss_kind: str = "mse",
        resample: bool = True,
        jitter: bool = True,
        mask_channel: int | None = None,
) -> InferenceResult:
    """
    Усреднение предсказаний по n_bootstrap переcэмплированным и сдвинутым контекстам.

    Для масок усредняются вероятности, порог применяется после усреднения.

    Raises:
        ShapeError: n_bootstrap < 1 или пустой контекст
    """
    if n_bootstrap < 1:
        raise ShapeError(f"Bootstrap needs at least one replicate, got {n_bootstrap}")
    if ctx.ndim != 5 or ctx.shape[0] == 0:
        raise ShapeError(f"Inference needs a nonempty context [N, B, 4, H, W], got {ctx.shape}")
    preds = [
        infer(x, bootstrap_context(ctx, rng, loss_kind, resample, jitter, mask_channel), params, loss_kind).prediction
        for _ in range(n_bootstrap)
    ]
    mean = np.mean(preds, axis=0)
    if loss_kind == "dice":
        return InferenceResult(prediction=mean, mask=(mean > 0.5).astype(np.uint8))
    return InferenceResult(prediction=mean)


def score(result: InferenceResult, target: np.ndarray, loss_kind: str) -> list[float]:
    """Dice по маскам или PSNR по предсказаниям, для каждого элемента батча."""
    if loss_kind == "dice":
        return [dice_coefficient(m, t.astype(np.uint8)) for m, t in zip(result.mask, target)]
    return [psnr(p, t) for p, t in zip(result.prediction, target)]


# --- эпизоды оценки ---------------------------------------------------------

def evaluation_pool(cfg: RunConfig) -> list[PhantomSubject]:
    """Тестовый пул: отдельный диапазон идентификаторов и seed оценки."""
    return load_or_generate_pool(
        cfg.sampler.phantom,
        cfg.model.image_size,
        cfg.sampler.n_test_subjects,
        seed=cfg.eval.seed,
        id_offset=TEST_SUBJECT_OFFSET,
        cache_root=cfg.paths.pool_cache,
    )


def eval_episodes(
        kind: TaskKind,
        pool: list[PhantomSubject],
        sampler: SamplerConfig,
        context_size: int,
        count: int,
        seed: int,
        recipe: TaskRecipe | None = None,
        seg_classes: list[int] | None = None,
) -> list[Episode]:
    """Фиксированный набор эпизодов задачи с максимальным размером контекста."""
    rng = make_rng(np.random.SeedSequence([seed, list(TaskKind).index(kind)]))
    return [
        build_episode(kind, pool, sampler, rng, context_size=context_size, recipe=recipe, seg_classes=seg_classes)
        for _ in range(count)
    ]


def truncate(ep: Episode, n: int) -> Episode:
    """Первые n пар контекста: эпизоды для меньших N вложены в эпизоды для больших."""
    return ep.with_pairs([ep.query, *ep.context[:n]])


def neuralizer_predictions(
        params: NeuralizerParams,
        episodes: list[Episode],
        n: int,
        bootstrap: int,
        seed: int,
) -> tuple[list[float], list[InferenceResult]]:
    scores: list[float] = []
    results: list[InferenceResult] = []
    loss_kind = episodes[0].loss_kind
    mask_channel = episodes[0].meta.get("mask_channel")
    for start in range(0, len(episodes), EVAL_CHUNK):
        x, ctx, y = collate([truncate(ep, n) for ep in episodes[start:start + EVAL_CHUNK]])
        if bootstrap > 1:
            rng = make_rng(np.random.SeedSequence([seed, n, start]))
            result = infer_bootstrap(x, ctx, params, bootstrap, rng, loss_kind, mask_channel=mask_channel)
        else:
            result = infer(x, ctx, params, loss_kind)
        scores += score(result, y, loss_kind)
        results.append(result)
    return scores, results


def baseline_scores(params: BaselineUNetParams, episodes: list[Episode]) -> list[float]:
    scores: list[float] = []
    loss_kind = episodes[0].loss_kind
    for start in range(0, len(episodes), EVAL_CHUNK):
        chunk = episodes[start:start + EVAL_CHUNK]
        x = np.stack([ep.input for ep in chunk]).astype(np.float32)
        y = np.stack([ep.target for ep in chunk]).astype(np.float32)
        scores += score(_finalize(baseline_forward(x, params).numpy(), loss_kind), y, loss_kind)
    return scores


def _row(model_id: str, kind: TaskKind, n: int, values: list[float] | np.ndarray, holdout: bool = False,
         suffix: str = "") -> EvalRow:
    values = np.asarray(values, dtype=np.float64)
    return EvalRow(
        model_id=model_id,
        task_kind=kind,
        holdout=holdout,
        n=n,
        metric=f"{'dice' if kind.loss_kind == 'dice' else 'psnr'}{suffix}",
        mean=float(values.mean()),
        std=float(values.std()),
        n_episodes=len(values),
    )


def is_held_out(meta_holdout: list[Holdout], kind: TaskKind) -> bool:
    """Клетка отмечается, если задача (или класс сегментации) исключалась при обучении."""
    for h in meta_holdout:
        if h.kind == "task" and h.value == kind.value:
            return True
        if h.kind == "class" and kind == TaskKind.SEGMENTATION:
            return True
    return False


def dump_episode(
        directory: Path,
        name: str,
        ep: Episode,
        result: InferenceResult,
        index: int,
) -> Path:
    """Монтаж: запрос (3 канала входа, цель, предсказание), затем входы и цели контекста."""
    pred = result.mask[index, 0] if result.mask is not None else result.prediction[index, 0]
    rows = [
        [*ep.input, ep.target[0], pred],
        [pair.input[0] for pair in ep.context[:DUMP_CONTEXT_MAX]],
        [pair.target[0] for pair in ep.context[:DUMP_CONTEXT_MAX]],
    ]
    return write_pgm(montage(rows), directory / f"{name}.pgm")


def _check_models(models: list[tuple[str, Checkpoint]], cfg: RunConfig) -> None:
    if not models:
        raise ConfigError("Evaluation needs at least one checkpoint")
    for model_id, ckpt in models:
        if ckpt.meta.image_size != cfg.model.image_size:
            raise ConfigError(
                f"Checkpoint {model_id} has image size {ckpt.meta.image_size}, "
                f"config evaluates at {cfg.model.image_size}"
            )


def baseline_recipes(models: list[tuple[str, Checkpoint]]) -> dict[TaskKind, TaskRecipe]:
    """Экземпляр задачи каждой базовой U-Net; все базовые модели одной задачи обязаны его разделять."""
    recipes: dict[TaskKind, TaskRecipe] = {}
    for model_id, ckpt in models:
        if ckpt.meta.model_kind != "baseline":
            continue
        if ckpt.meta.task_recipe is None:
            raise ConfigError(f"Baseline checkpoint {model_id} has no task recipe")
        recipe = TaskRecipe.from_dict(ckpt.meta.task_recipe)
        if recipes.setdefault(recipe.kind, recipe) != recipe:
            raise ConfigError(f"Baselines for {recipe.kind.value} were trained on different task instances")
    return recipes


def eval_curves(
        models: list[tuple[str, Checkpoint]],
        cfg: RunConfig,
        dump_dir: Path | None = None,
) -> EvalReport:
    """
    Метрика в зависимости от размера контекста (Neuralizer) и числа обучающих субъектов (базовые U-Net).

    Все модели видят одни и те же эпизоды. Повторы базовых U-Net с одинаковым числом
    субъектов усредняются поэпизодно.

    Args:
        models: Пары (идентификатор, чекпоинт)
        cfg: Конфигурация (раздел eval задает задачи, размеры и число эпизодов)
        dump_dir: Каталог для PGM-монтажей эпизодов

    Returns:
        EvalReport: Строки в каноническом порядке, с относительными строками при наличии базовых U-Net

    Raises:
        ConfigError: Нет чекпоинтов или размер изображения не совпадает
    """
    _check_models(models, cfg)
    pool = evaluation_pool(cfg)
    sampler = cfg.sampler.model_copy(update={"holdout": []})
    recipes = baseline_recipes(models)
    tasks = list(dict.fromkeys([*cfg.eval.tasks, *recipes]))
    sizes = sorted(cfg.eval.sizes)

    rows: list[EvalRow] = []
    for kind in tasks:
        episodes = eval_episodes(
            kind, pool, sampler, sizes[-1], cfg.eval.episodes_per_cell, cfg.eval.seed, recipe=recipes.get(kind)
        )
        logger.info(f"Evaluating {kind.value} on {len(episodes)} episodes")
        replicates: dict[int, list[list[float]]] = defaultdict(list)
        for model_id, ckpt in models:
            meta = ckpt.meta
            if meta.model_kind == "baseline":
                if meta.baseline_task == kind:
                    replicates[meta.baseline_subjects].append(baseline_scores(ckpt.params, episodes))
                continue
            for n in sizes:
                scores, results = neuralizer_predictions(ckpt.params, episodes, n, cfg.eval.bootstrap, cfg.eval.seed)
                rows.append(_row(model_id, kind, n, scores, holdout=is_held_out(meta.holdout, kind)))
                if dump_dir is not None:
                    for i in range(min(cfg.eval.dump_episodes, len(episodes))):
                        dump_episode(
                            dump_dir, f"{model_id}_{kind.value}_n{n}_ep{i}",
                            truncate(episodes[i], n), results[i // EVAL_CHUNK], i % EVAL_CHUNK,
                        )
        for n_subjects, per_replicate in sorted(replicates.items()):
            rows.append(_row(BASELINE_ID, kind, n_subjects, np.mean(per_replicate, axis=0)))

    report = EvalReport(rows=rows)
    return EvalReport(rows=rows + relative_scores(report)).sorted()


def relative_scores(report: EvalReport) -> list[EvalRow]:
    """
    Метрики относительно базовой U-Net, обученной на наибольшем числе субъектов той же задачи.

    Returns:
        list[EvalRow]: Строки с метрикой *_rel (пусто, если базовых U-Net нет)
    """
    reference: dict[TaskKind, EvalRow] = {}
    for row in report.rows:
        if row.model_id == BASELINE_ID and row.metric in ("dice", "psnr"):
            if row.task_kind not in reference or row.n > reference[row.task_kind].n:
                reference[row.task_kind] = row
    out: list[EvalRow] = []
    for row in report.rows:
        ref = reference.get(row.task_kind)
        if ref is None or row.metric not in ("dice", "psnr"):
            continue
        if ref.mean == 0.0:
            logger.warning(f"Reference baseline for {row.task_kind.value} scores 0; skipping relative rows")
            continue
        out.append(row.model_copy(update={
            "metric": f"{row.metric}_rel",
            "mean": row.mean / ref.mean,
            "std": row.std / abs(ref.mean),
        }))
    return out


def holdout_episodes_config(sampler: SamplerConfig, holdout: Holdout) -> SamplerConfig:
    """Эпизоды только на исключенном элементе: для модальности остальные модальности запрещаются."""
    if holdout.kind != "modality":
        return sampler.model_copy(update={"holdout": []})
    others = [
        Holdout(kind="modality", value=str(m))
        for m in range(sampler.phantom.n_modalities) if m != int(holdout.value)
    ]
    return sampler.model_copy(update={"holdout": others})


def holdout_compare(
        seen: tuple[str, Checkpoint],
        unseen: tuple[str, Checkpoint],
        holdout: Holdout,
        cfg: RunConfig,
        task: TaskKind = TaskKind.SEGMENTATION,
) -> EvalReport:
    """
    Сравнение модели, видевшей исключенный элемент, с моделью, обученной без него.

    Оценка только на эпизодах исключенного элемента; строка gap хранит поэпизодную разность.

    Args:
        seen: Модель, обученная со всеми задачами
        unseen: Модель, обученная с исключением holdout
        holdout: Исключенная задача, модальность или класс
        cfg: Конфигурация оценки
        task: Задача для исключенной модальности

    Raises:
        ConfigError: В метаданных unseen нет такого исключения
    """
    _check_models([seen, unseen], cfg)
    if holdout not in unseen[1].meta.holdout:
        raise ConfigError(
            f"Checkpoint {unseen[0]} was trained with holdout "
            f"{[str(h) for h in unseen[1].meta.holdout] or 'none'}, not {holdout}"
        )
    if seen[1] is not unseen[1] and holdout in seen[1].meta.holdout:
        logger.warning(f"Checkpoint {seen[0]} was also trained without {holdout}")

    seg_classes = None
    if holdout.kind == "task":
        task = TaskKind(holdout.value)
    elif holdout.kind == "class":
        task, seg_classes = TaskKind.SEGMENTATION, [int(holdout.value)]
    sampler = holdout_episodes_config(cfg.sampler, holdout)
    sizes = sorted(cfg.eval.sizes)
    episodes = eval_episodes(
        task, evaluation_pool(cfg), sampler, sizes[-1], cfg.eval.episodes_per_cell, cfg.eval.seed, seg_classes=seg_classes
    )
    logger.info(f"Holdout comparison on {holdout}: {len(episodes)} {task.value} episodes")

    rows: list[EvalRow] = []
    for n in sizes:
        seen_scores, _ = neuralizer_predictions(seen[1].params, episodes, n, cfg.eval.bootstrap, cfg.eval.seed)
        unseen_scores, _ = neuralizer_predictions(unseen[1].params, episodes, n, cfg.eval.bootstrap, cfg.eval.seed)
        rows += [
            _row(seen[0], task, n, seen_scores, holdout=True),
            _row(unseen[0], task, n, unseen_scores, holdout=True),
            _row(GAP_ID, task, n, np.subtract(seen_scores, unseen_scores), holdout=True, suffix="_gap"),
        ]
    return EvalReport(rows=rows).sorted()


def write_report(report: EvalReport, path: str | Path) -> Path:
    """CSV отчета: заголовок, строки в каноническом порядке."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in report.sorted().rows:
            writer.writerow(row.as_csv())
    logger.info(f"Wrote {len(report.rows)} report rows to {path}")
    return path
