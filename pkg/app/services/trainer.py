"""Обучение Neuralizer и базовых U-Net: шаги Adam, валидация, ранняя остановка, чекпоинты."""
import csv
import json
import math
from collections import Counter
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Any

import numpy as np

from app.core.config import materialize, settings
from app.core.exceptions import ConfigError, DivergenceError, NonFiniteError
from app.engine.optim import AdamState, adam_step, clip_grad_norm
from app.engine.tensor import Tape, backward
from app.models.baseline import baseline_forward, init_baseline_params
from app.models.episode import PhantomSubject, collate
from app.models.neuralizer import forward, init_params
from app.models.params import BaselineUNetParams, NeuralizerParams, param_dict, with_tensors
from app.schemas.checkpoint import CheckpointMeta, HistoryEntry
from app.schemas.run import RunConfig
from app.schemas.sampler import TaskKind
from app.schemas.train import LossConfig, TrainConfig
from app.services.augment_tree import NO_FLIP_TASKS, apply_tree, random_transform, warp_pair
from app.services.losses import task_loss
from app.services.phantoms import split_pool
from app.services.sampler import (
    HOLE_CHANNEL,
    TaskRecipe,
    audit_episode,
    build_episode,
    build_pair,
    make_recipe,
    sample_context_size,
    sample_task_kind,
)
from app.storage.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from app.storage.pool_cache import load_or_generate_pool
from app.utils.logging import app_logger as logger
from app.utils.rng import child_seed, make_rng
from app.workers.episode_producer import EpisodeProducer

# Номера потоков seed, чтобы разные подзадачи не делили случайность
VAL_STREAM = 1
BASELINE_SUBSET_STREAM = 2
BASELINE_INIT_STREAM = 3
RECIPE_STREAM = 4

BASELINE_SPATIAL_P = 0.5
NEURALIZER_BEST = "neuralizer_best.nlz"
NEURALIZER_LAST = "neuralizer_last.nlz"


@dataclass
class Batch:
    kind: TaskKind
    x: np.ndarray
    y: np.ndarray
    ctx: np.ndarray | None = None
    violations: int = 0


@dataclass(frozen=True)
class EarlyStopState:
    best_val: float = math.inf
    epochs_since_improve: int = 0
    patience: int = 25


def early_stop_update(state: EarlyStopState, val_loss: float) -> tuple[EarlyStopState, bool]:
    """
    Обновляет состояние ранней остановки; "эпоха" равна val_interval шагам.

    Args:
        state: Текущее состояние
        val_loss: Новая валидационная потеря

    Returns:
        tuple[EarlyStopState, bool]: Новое состояние и флаг остановки
    """
    if not math.isfinite(val_loss):
        raise NonFiniteError(f"Validation loss is not finite: {val_loss}")
    if val_loss < state.best_val:
        state = replace(state, best_val=val_loss, epochs_since_improve=0)
    else:
        state = replace(state, epochs_since_improve=state.epochs_since_improve + 1)
    return state, state.epochs_since_improve >= state.patience


def loss_config(kind: TaskKind, train: TrainConfig) -> LossConfig:
    return LossConfig(kind=kind.loss_kind, sigma2=train.sigma2)


def seed_stream(seed: int, *keys: int) -> np.random.Generator:
    return make_rng(np.random.SeedSequence([seed, *keys]))


@dataclass
class Pools:
    train: list[PhantomSubject]
    val: list[PhantomSubject]


def prepare_pools(cfg: RunConfig) -> Pools:
    """Обучающий пул делится по субъектам на train и val."""
    pool = load_or_generate_pool(
        cfg.sampler.phantom,
        cfg.model.image_size,
        cfg.sampler.n_train_subjects,
        seed=cfg.seed,
        cache_root=cfg.paths.pool_cache,
    )
    train, val = split_pool(pool, cfg.sampler.val_fraction, cfg.seed)
    logger.info(f"Phantom pool: {len(train)} training and {len(val)} validation subjects")
    return Pools(train=train, val=val)


# --- батчи -----------------------------------------------------------------

def make_neuralizer_batch(
        pool: list[PhantomSubject],
        cfg: RunConfig,
        rng: np.random.Generator,
        augment: bool = True,
        context_pool: list[PhantomSubject] | None = None,
) -> Batch:
    """
    Батч эпизодов одной задачи и одного размера контекста N ~ U{1..N_max}.

    Args:
        pool: Пул субъектов запроса
        cfg: Конфигурация запуска
        rng: Генератор
        augment: Применять ли дерево аугментаций
        context_pool: Пул кандидатов для контекста

    Returns:
        Batch: Батч с контекстом [N, B, 4, H, W]
    """
    kind = sample_task_kind(cfg.sampler.task_weights, rng, cfg.sampler.held_out_tasks())
    n = sample_context_size(cfg.sampler.context_size_max, rng)
    episodes = []
    violations = 0
    for _ in range(cfg.train.batch_size):
        ep = build_episode(kind, pool, cfg.sampler, rng, context_size=n, context_pool=context_pool)
        problems = audit_episode(ep, cfg.sampler)
        if problems:
            violations += len(problems)
            logger.warning(f"Episode audit failed: {problems}")
        if augment:
            ep = apply_tree(ep, cfg.augment_tree, child_seed(rng))
        episodes.append(ep)
    x, ctx, y = collate(episodes)
    return Batch(kind=kind, x=x, y=y, ctx=ctx, violations=violations)


def task_instance(kind: TaskKind, cfg: RunConfig) -> TaskRecipe:
    """Фиксированный экземпляр задачи для базовой U-Net (зависит только от seed запуска)."""
    rng = seed_stream(cfg.seed, RECIPE_STREAM, list(TaskKind).index(kind))
    sampler = cfg.sampler.model_copy(update={"holdout": []})
    return make_recipe(kind, cfg.sampler.phantom.n_modalities, sampler, rng)


def make_baseline_batch(
        subjects: list[PhantomSubject],
        recipe: TaskRecipe,
        batch_size: int,
        rng: np.random.Generator,
        augment: bool = True,
) -> Batch:
    """
    Батч пар для базовой U-Net: только геометрические аугментации.
    """
    xs, ys = [], []
    for _ in range(batch_size):
        subject = subjects[int(rng.integers(len(subjects)))]
        pair = build_pair(subject, recipe, recipe.input_modalities, make_rng(child_seed(rng)))
        if augment and rng.random() < BASELINE_SPATIAL_P:
            p_flip = 0.0 if recipe.kind in NO_FLIP_TASKS else 0.5
            transform = random_transform(pair.input.shape[-2:], rng, p_flip=p_flip)
            mask_channel = HOLE_CHANNEL if recipe.kind == TaskKind.INPAINTING else None
            pair = warp_pair(pair, transform, recipe.kind.loss_kind == "dice", mask_channel)
        xs.append(pair.input)
        ys.append(pair.target)
    return Batch(kind=recipe.kind, x=np.stack(xs), y=np.stack(ys))


def make_validation_batches(
        count: int,
        make_batch: Callable[[np.random.Generator], Batch],
        rng: np.random.Generator,
) -> list[Batch]:
    return [make_batch(rng) for _ in range(count)]


# --- шаг оптимизации -----------------------------------------------------------

def predict(params: NeuralizerParams | BaselineUNetParams, batch: Batch):
    if isinstance(params, NeuralizerParams):
        return forward(batch.x, batch.ctx, params)
    return baseline_forward(batch.x, params)


def loss_and_grads(
        params: NeuralizerParams | BaselineUNetParams,
        batch: Batch,
        train: TrainConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    """
    Прямой и обратный проход на одном батче.

    Returns:
        tuple: (значение потерь, градиенты по именам параметров)
    """
    named = param_dict(params)
    with Tape():
        loss = task_loss(predict(params, batch), batch.y, loss_config(batch.kind, train))
        grads = backward(loss)
    return loss.item(), {name: grads[t] for name, t in named.items() if t in grads}


def validation_loss(params: NeuralizerParams | BaselineUNetParams, batches: list[Batch], train: TrainConfig) -> float:
    losses = [task_loss(predict(params, b), b.y, loss_config(b.kind, train)).item() for b in batches]
    return float(np.mean(losses))


def write_history(history: list[HistoryEntry], path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "train_loss", "val_loss"])
        for entry in history:
            val = "" if entry.val_loss is None else f"{entry.val_loss:.6f}"
            writer.writerow([entry.step, f"{entry.train_loss:.6f}", val])


@dataclass
class FitState:
    params: NeuralizerParams | BaselineUNetParams
    adam: AdamState
    step: int = 0
    early: EarlyStopState = field(default_factory=EarlyStopState)
    history: list[HistoryEntry] = field(default_factory=list)
    rng_state: dict[str, Any] | None = None


def _fit(
        state: FitState,
        meta: CheckpointMeta,
        make_batch: Callable[[np.random.Generator], Batch],
        val_batches: list[Batch],
        train: TrainConfig,
        steps_max: int,
        seed: int,
        workers: int,
        best_path: Path,
        last_path: Path,
) -> tuple[Checkpoint, Counter]:
    """
    Общий цикл: батч, потери, backward, обрезка градиента, шаг Adam, валидация.

    Returns:
        tuple: лучший по валидации чекпоинт и счетчики сэмплера
    """
    audit: Counter = Counter()
    interval_losses: list[float] = []
    best: Checkpoint | None = load_checkpoint(best_path) if state.step and best_path.is_file() else None

    def snapshot(rng_state: dict[str, Any] | None) -> Checkpoint:
        return Checkpoint(
            meta=meta.model_copy(update={
                "step": state.step,
                "best_val": None if math.isinf(state.early.best_val) else state.early.best_val,
                "epochs_since_improve": state.early.epochs_since_improve,
                "history": list(state.history),
                "rng_state": rng_state,
            }),
            params=state.params,
            adam=state.adam,
        )

    producer: EpisodeProducer[Batch] = EpisodeProducer(make_batch, seed, workers, state=state.rng_state)
    with producer:
        while state.step < steps_max:
            step = state.step + 1
            batch = producer.get(timeout=600)
            audit[batch.kind.value] += 1
            audit["violations"] += batch.violations
            try:
                loss, grads = loss_and_grads(state.params, batch, train)
            except NonFiniteError as e:
                logger.error(f"Non-finite values at step {step} ({batch.kind.value}): {e}")
                raise DivergenceError(step, batch.kind.value, math.nan) from e
            if not math.isfinite(loss):
                logger.error(f"Loss diverged at step {step} ({batch.kind.value}): {loss}")
                raise DivergenceError(step, batch.kind.value, loss)

            grads, norm = clip_grad_norm(grads, train.grad_clip)
            new_params, state.adam = adam_step(param_dict(state.params), grads, state.adam)
            state.params = with_tensors(state.params, new_params)
            state.step = step
            interval_losses.append(loss)

            if step % train.log_interval == 0:
                logger.info(f"Step {step}: loss {loss:.4f} ({batch.kind.value}), grad norm {norm:.3f}")

            if step % train.val_interval == 0 or step == steps_max:
                val = validation_loss(state.params, val_batches, train)
                state.history.append(HistoryEntry(step=step, train_loss=float(np.mean(interval_losses)), val_loss=val))
                interval_losses = []
                state.early, stop = early_stop_update(state.early, val)
                logger.info(f"Step {step}: validation loss {val:.4f} (best {state.early.best_val:.4f})")
                if state.early.epochs_since_improve == 0:
                    best = snapshot(producer.rng_state())
                    save_checkpoint(best, best_path)
                if stop:
                    logger.warning(
                        f"Early stop at step {step}: no improvement in {state.early.patience} validation rounds"
                    )
                    break

        last = snapshot(producer.rng_state())
    save_checkpoint(last, last_path)
    return (best or last), audit


# --- Neuralizer ------------------------------------------------------------

def train_neuralizer(
        cfg: RunConfig,
        run_dir: Path | None = None,
        workers: int | None = None,
        resume: Path | None = None,
) -> Checkpoint:
    """
    Обучает Neuralizer на потоке эпизодов.

    Args:
        cfg: Конфигурация запуска
        run_dir: Каталог запуска (по умолчанию cfg.paths.run_dir)
        workers: Число воркеров генерации (1: детерминированный режим)
        resume: Чекпоинт для продолжения обучения

    Returns:
        Checkpoint: Лучший по валидации чекпоинт

    Raises:
        DivergenceError: Потери стали нечисловыми
    """
    run_dir = Path(run_dir or cfg.paths.run_dir)
    workers = settings.WORKERS if workers is None else workers
    materialize(cfg, run_dir)
    pools = prepare_pools(cfg)

    meta = CheckpointMeta(model_kind="neuralizer", model=cfg.model, holdout=cfg.sampler.holdout, seed=cfg.seed)
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.meta.model_kind != "neuralizer" or ckpt.meta.model != cfg.model:
            raise ConfigError(f"Checkpoint {resume} does not match the configured model")
        state = FitState(
            params=ckpt.params,
            adam=replace(ckpt.adam, lr=cfg.train.lr),
            step=ckpt.meta.step,
            early=EarlyStopState(
                best_val=math.inf if ckpt.meta.best_val is None else ckpt.meta.best_val,
                epochs_since_improve=ckpt.meta.epochs_since_improve,
                patience=cfg.train.patience_epochs,
            ),
            history=list(ckpt.meta.history),
            rng_state=ckpt.meta.rng_state,
        )
        logger.info(f"Resuming Neuralizer training from step {state.step}")
    else:
        state = FitState(
            params=init_params(cfg.model, seed=cfg.seed),
            adam=AdamState(lr=cfg.train.lr),
            early=EarlyStopState(patience=cfg.train.patience_epochs),
        )

    n_val = math.ceil(cfg.train.n_val_episodes / cfg.train.batch_size)
    val_batches = make_validation_batches(
        n_val,
        partial(make_neuralizer_batch, pools.val, cfg, augment=False, context_pool=pools.train),
        seed_stream(cfg.seed, VAL_STREAM),
    )
    logger.info(
        f"Training Neuralizer c={cfg.model.channels} on {cfg.model.image_size}px, "
        f"{cfg.train.steps_max} steps, holdout {[str(h) for h in cfg.sampler.holdout] or 'none'}"
    )
    best, audit = _fit(
        state,
        meta,
        partial(make_neuralizer_batch, pools.train, cfg),
        val_batches,
        cfg.train,
        cfg.train.steps_max,
        cfg.seed,
        workers,
        run_dir / NEURALIZER_BEST,
        run_dir / NEURALIZER_LAST,
    )
    write_history(state.history, run_dir / "history.csv")
    write_audit(audit, cfg, run_dir / "sampler_audit.json")
    return best


def write_audit(audit: Counter, cfg: RunConfig, path: Path) -> None:
    """Счетчики задач по батчам и число нарушений конструкции эпизодов."""
    report = {
        "batches_per_task": {k.value: audit.get(k.value, 0) for k in TaskKind},
        "violations": audit.get("violations", 0),
        "holdout": [str(h) for h in cfg.sampler.holdout],
    }
    path.write_text(json.dumps(report, indent=2), encoding="utf-8")


# --- базовые U-Net ---------------------------------------------------------

def baseline_replicates(n_subjects: int) -> int:
    """Число повторов с разными seed: 3 для n=1, 2 для n=2, иначе 1."""
    return {1: 3, 2: 2}.get(n_subjects, 1)


def baseline_subset(train: list[PhantomSubject], n_subjects: int | None, seed: int, replicate: int) -> list[PhantomSubject]:
    if n_subjects is None or n_subjects >= len(train):
        return list(train)
    rng = seed_stream(seed, BASELINE_SUBSET_STREAM, n_subjects, replicate)
    return [train[int(i)] for i in rng.choice(len(train), size=n_subjects, replace=False)]


def baseline_name(task: TaskKind, n_subjects: int, replicate: int) -> str:
    return f"baseline_{task.value}_n{n_subjects}_r{replicate}"


def train_baseline(
        cfg: RunConfig,
        task: TaskKind,
        n_subjects: int | None,
        replicate: int = 0,
        run_dir: Path | None = None,
) -> Checkpoint:
    """
    Обучает U-Net для одного фиксированного экземпляра задачи на n субъектах.

    Args:
        cfg: Конфигурация запуска
        task: Тип задачи
        n_subjects: Размер обучающего набора (None: все субъекты)
        replicate: Номер повтора (меняет подмножество и инициализацию)
        run_dir: Каталог запуска

    Returns:
        Checkpoint: Лучший по валидации чекпоинт
    """
    run_dir = Path(run_dir or cfg.paths.run_dir)
    materialize(cfg, run_dir)
    pools = prepare_pools(cfg)
    subjects = baseline_subset(pools.train, n_subjects, cfg.seed, replicate)
    recipe = task_instance(task, cfg)
    name = baseline_name(task, len(subjects), replicate)
    logger.info(f"Training {name} on subjects {[s.subject_id for s in subjects][:8]}")

    init_seed = child_seed(seed_stream(cfg.seed, BASELINE_INIT_STREAM, replicate))
    state = FitState(
        params=init_baseline_params(cfg.baseline, seed=init_seed),
        adam=AdamState(lr=cfg.train.lr),
        early=EarlyStopState(patience=cfg.train.patience_epochs),
    )
    meta = CheckpointMeta(
        model_kind="baseline",
        baseline=cfg.baseline,
        baseline_task=task,
        baseline_subjects=len(subjects),
        seed=cfg.seed,
        replicate=replicate,
        task_recipe=recipe.to_dict(),
    )
    n_val = math.ceil(cfg.train.n_val_episodes / cfg.train.batch_size)
    val_batches = make_validation_batches(
        n_val,
        partial(make_baseline_batch, pools.val, recipe, cfg.train.batch_size, augment=False),
        seed_stream(cfg.seed, VAL_STREAM, replicate),
    )
    best, _ = _fit(
        state,
        meta,
        partial(make_baseline_batch, subjects, recipe, cfg.train.batch_size),
        val_batches,
        cfg.train,
        cfg.train.baseline_steps_max,
        child_seed(seed_stream(cfg.seed, BASELINE_SUBSET_STREAM, replicate)),
        1,
        run_dir / f"{name}.nlz",
        run_dir / f"{name}_last.nlz",
    )
    write_history(state.history, run_dir / f"history_{name}.csv")
    return best
