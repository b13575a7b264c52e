from typing import Any

import numpy as np


def make_rng(seed: int | np.random.SeedSequence | np.random.Generator) -> np.random.Generator:
    """Генератор из seed; готовый генератор возвращается как есть."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def seed_streams(seed: int, n: int) -> list[np.random.SeedSequence]:
    """
    Непересекающиеся потоки seed для параллельных генераторов эпизодов.

    Args:
        seed: Базовый seed запуска
        n: Количество потоков

    Returns:
        list[np.random.SeedSequence]: Независимые последовательности
    """
    return np.random.SeedSequence(seed).spawn(n)


def child_seed(rng: np.random.Generator) -> int:
    """Новый 63-битный seed из генератора (для детерминированных подзадач)."""
    return int(rng.integers(0, 2**63 - 1))


def rng_state(rng: np.random.Generator) -> dict[str, Any]:
    return rng.bit_generator.state


def restore_rng(state: dict[str, Any]) -> np.random.Generator:
    bit_generator = getattr(np.random, state["bit_generator"])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)
