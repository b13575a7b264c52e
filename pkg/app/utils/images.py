from pathlib import Path

import numpy as np

from app.core.exceptions import ShapeError


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Интенсивности [0, 1] в байты 0..255 (значения вне диапазона обрезаются)."""
    arr = np.nan_to_num(np.asarray(img, dtype=np.float64), nan=0.0)
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(img: np.ndarray, path: str | Path) -> Path:
    """
    Записывает 2D изображение как бинарный PGM (P5, maxval 255).

    Args:
        img: Массив [H, W] со значениями в [0, 1]
        path: Путь к файлу

    Returns:
        Path: Путь к записанному файлу
    """
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ShapeError(f"PGM expects a 2D image, got shape {arr.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = arr.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + to_uint8(arr).tobytes())
    return path


def montage(rows: list[list[np.ndarray]], pad: int = 1, pad_value: float = 1.0) -> np.ndarray:
    """
    Склеивает ряды 2D изображений одного размера в одну таблицу.

    Короткие ряды дополняются пустыми клетками справа.
    """
    cells = [img for row in rows for img in row]
    if not cells:
        raise ShapeError("Montage needs at least one image")
    shapes = {np.asarray(c).shape for c in cells}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise ShapeError(f"Montage cells must be 2D images of one shape, got {sorted(shapes)}")
    h, w = next(iter(shapes))
    n_cols = max(len(row) for row in rows)
    out = np.full(
        (len(rows) * (h + pad) - pad, n_cols * (w + pad) - pad), pad_value, dtype=np.float32
    )
    for r, row in enumerate(rows):
        for c in range(n_cols):
            y, x = r * (h + pad), c * (w + pad)
            out[y:y + h, x:x + w] = row[c] if c < len(row) else 0.0
    return out
