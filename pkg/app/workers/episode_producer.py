import queue
import threading
from collections.abc import Callable
from typing import Any, Generic, TypeVar

import numpy as np

from app.utils.logging import app_logger as logger
from app.utils.rng import make_rng, restore_rng, rng_state, seed_streams

T = TypeVar("T")


class _Failure:
    def __init__(self, error: BaseException):
        self.error = error


class EpisodeProducer(Generic[T]):
    """
    Производитель батчей эпизодов для цикла обучения.

    С одним воркером батчи строятся синхронно из одного генератора, и последовательность
    полностью детерминирована (а состояние генератора можно сохранить в чекпоинт).
    С несколькими воркерами каждый поток получает свой поток seed и кладет батчи
    в ограниченную очередь: распределение то же, порядок не гарантирован.
    """

    def __init__(
            self,
            make_batch: Callable[[np.random.Generator], T],
            seed: int,
            workers: int = 1,
            queue_size: int = 8,
            state: dict[str, Any] | None = None,
    ):
        self.make_batch = make_batch
        self.seed = seed
        self.workers = max(1, workers)
        self.queue: queue.Queue[T | _Failure] = queue.Queue(maxsize=queue_size)
        self.stop_event = threading.Event()
        self.threads: list[threading.Thread] = []
        self.rng = restore_rng(state) if state is not None else make_rng(seed_streams(seed, 1)[0])

    @property
    def deterministic(self) -> bool:
        return self.workers == 1

    def rng_state(self) -> dict[str, Any] | None:
        return rng_state(self.rng) if self.deterministic else None

    def start(self) -> "EpisodeProducer[T]":
        """
        Запускает потоки-воркеры (в однопоточном режиме ничего не делает).
        """
        if self.deterministic or self.threads:
            return self
        logger.info(f"Starting {self.workers} episode workers")
        for index, stream in enumerate(seed_streams(self.seed, self.workers)):
            thread = threading.Thread(
                target=self._run, args=(make_rng(stream),), name=f"episode-worker-{index}", daemon=True
            )
            thread.start()
            self.threads.append(thread)
        return self

    def _run(self, rng: np.random.Generator) -> None:
        while not self.stop_event.is_set():
            try:
                item: T | _Failure = self.make_batch(rng)
            except Exception as e:
                logger.error(f"Episode worker failed: {e}")
                item = _Failure(e)
            while not self.stop_event.is_set():
                try:
                    self.queue.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if isinstance(item, _Failure):
                return

    def get(self, timeout: float | None = None) -> T:
        """
        Возвращает следующий батч.

        Args:
            timeout: Время ожидания батча из очереди в секундах

        Returns:
            Батч, построенный make_batch
        """
        if self.deterministic:
            return self.make_batch(self.rng)
        item = self.queue.get(timeout=timeout)
        if isinstance(item, _Failure):
            raise item.error
        return item

    def close(self) -> None:
        if not self.threads:
            return
        self.stop_event.set()
        for thread in self.threads:
            thread.join(timeout=5.0)
        self.threads.clear()
        logger.info("Episode workers stopped")

    def __enter__(self) -> "EpisodeProducer[T]":
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.close()
