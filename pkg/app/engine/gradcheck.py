from collections.abc import Callable, Sequence

import numpy as np

from app.core.exceptions import NonFiniteError, ShapeError
from app.engine.tensor import Tape, Tensor


def grad_check(
        f: Callable[..., Tensor],
        inputs: Sequence[Tensor | np.ndarray],
        eps: float = 1e-5,
        max_coords: int | None = None,
        seed: int = 0,
) -> float:
    """
    Сравнивает аналитический градиент с центральными разностями (float64).

    Args:
        f: Скалярная функция от тензоров
        inputs: Точка, в которой проверяется градиент
        eps: Шаг центральной разности
        max_coords: Проверять не более стольких координат на вход (случайная выборка)
        seed: Seed выборки координат

    Returns:
        float: max |analytic - numeric| / max(1, |numeric|)
    """
    leaves = [Tensor(x, requires_grad=True, dtype=np.float64) for x in inputs]
    with Tape() as tape:
        out = f(*leaves)
        if out.ndim != 0:
            raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
        grads = tape.backward(out)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = grads.get(leaf, np.zeros(leaf.shape))
        coords = np.arange(leaf.size)
        if max_coords is not None and leaf.size > max_coords:
            coords = rng.choice(leaf.size, size=max_coords, replace=False)
        base = leaf.data.copy().ravel()
        for j in coords:
            values = []
            for sign in (1.0, -1.0):
                shifted = base.copy()
                shifted[j] += sign * eps
                args = list(leaves)
                args[i] = Tensor(shifted.reshape(leaf.shape), dtype=np.float64)
                values.append(f(*args).item())
            numeric = (values[0] - values[1]) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise NonFiniteError(f"grad_check: non-finite difference at input {i}, coordinate {j}")
            err = abs(float(analytic.ravel()[j]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
