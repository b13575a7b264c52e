"""Градиентный шум Перлина и маски для задачи inpainting."""
import numpy as np

from app.core.exceptions import ShapeError
from app.utils.rng import make_rng

MASK_FRACTION_RANGE = (0.1, 0.4)


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


def perlin_noise(shape: tuple[int, int], cell: int, rng: np.random.Generator) -> np.ndarray:
    """
    Классический градиентный шум: единичные градиенты в узлах решетки с шагом cell.

    Args:
        shape: (H, W), кратные cell
        cell: Шаг решетки в пикселях
        rng: Генератор

    Returns:
        np.ndarray: Поле шума [H, W] примерно в [-1, 1]
    """
    h, w = shape
    if cell < 2 or h % cell or w % cell:
        raise ShapeError(f"Perlin cell {cell} must be >= 2 and divide image shape {shape}")

    angles = rng.uniform(0.0, 2 * np.pi, size=(h // cell + 1, w // cell + 1))
    gy, gx = np.sin(angles), np.cos(angles)

    ys = (np.arange(h) + 0.5) / cell
    xs = (np.arange(w) + 0.5) / cell
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    y0, x0 = y0[:, None], x0[None, :]

    def corner(dy: int, dx: int) -> np.ndarray:
        return gy[y0 + dy, x0 + dx] * (fy - dy) + gx[y0 + dy, x0 + dx] * (fx - dx)

    u, v = _fade(fx), _fade(fy)
    top = corner(0, 0) * (1 - u) + corner(0, 1) * u
    bottom = corner(1, 0) * (1 - u) + corner(1, 1) * u
    return top * (1 - v) + bottom * v


def perlin_mask(
        shape: tuple[int, int],
        cell: int = 8,
        threshold: float | None = None,
        seed: int | np.random.Generator = 0,
) -> np.ndarray:
    """
    Бинарная маска дыр из шума Перлина; доля закрытых пикселей лежит в [0.1, 0.4].

    Без threshold целевая доля выбирается равномерно из [0.1, 0.4]; явный порог,
    выводящий долю за эти границы, сдвигается к ближайшей границе.

    Args:
        shape: (H, W)
        cell: Шаг решетки
        threshold: Порог по значению шума
        seed: Seed или генератор

    Returns:
        np.ndarray: Маска uint8 [H, W]
    """
    rng = make_rng(seed)
    noise = perlin_noise(shape, cell, rng)
    low, high = MASK_FRACTION_RANGE
    if threshold is None:
        fraction = rng.uniform(low, high)
    else:
        fraction = float(np.clip((noise > threshold).mean(), low, high))
    n = noise.size
    count = int(np.clip(round(fraction * n), np.ceil(low * n), np.floor(high * n)))
    mask = np.zeros(n, dtype=np.uint8)
    mask[np.argsort(noise, axis=None, kind="stable")[n - count:]] = 1
    return mask.reshape(shape)
