"""Задачные аугментации: интенсивности, маски и каналы."""
from collections.abc import Sequence

import numpy as np
from scipy import ndimage

from app.core.exceptions import AugmentationError, BinaryMaskError
from app.utils.rng import make_rng

SQUARE = np.ones((3, 3), dtype=bool)
CROSS = ndimage.generate_binary_structure(2, 1)
SYNTHETIC_MEAN_RANGE = (0.05, 0.95)
SYNTHETIC_STD_RANGE = (0.01, 0.1)


def _as_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise BinaryMaskError("Mask augmentations require a binary mask")
    return mask.astype(bool)


def sobel_filter(img: np.ndarray) -> np.ndarray:
    """
    Модуль градиента Собеля с отражением на границах, нормированный на максимум.

    Args:
        img: Изображение [H, W]

    Returns:
        np.ndarray: Изображение в [0, 1], нули для константного входа
    """
    x = np.asarray(img, dtype=np.float64)
    gy = ndimage.sobel(x, axis=0, mode="reflect")
    gx = ndimage.sobel(x, axis=1, mode="reflect")
    magnitude = np.hypot(gx, gy)
    peak = magnitude.max()
    out = magnitude / peak if peak > 0 else np.zeros_like(magnitude)
    return out.astype(np.asarray(img).dtype)


def intensity_targets(n_bins: int, seed: int | np.random.Generator) -> np.ndarray:
    if n_bins < 2:
        raise AugmentationError(f"intensity_mapping needs at least 2 bins, got {n_bins}")
    return make_rng(seed).uniform(0.0, 1.0, size=n_bins)


def intensity_mapping(
        img: np.ndarray,
        n_bins: int = 8,
        seed: int | np.random.Generator = 0,
        targets: np.ndarray | None = None,
) -> np.ndarray:
    """
    Переназначает интенсивности: каждому центру бина случайная целевая интенсивность,
    между центрами линейная интерполяция.

    За крайними центрами продолжаются крайние отрезки, результат обрезается в [0, 1].

    Args:
        img: Изображение в [0, 1]
        n_bins: Число бинов
        seed: Seed для целевых интенсивностей
        targets: Явные целевые интенсивности [n_bins]

    Returns:
        np.ndarray: Изображение той же формы
    """
    if n_bins < 2:
        raise AugmentationError(f"intensity_mapping needs at least 2 bins, got {n_bins}")
    if targets is None:
        targets = intensity_targets(n_bins, seed)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (n_bins,):
        raise AugmentationError(f"Expected {n_bins} bin targets, got shape {targets.shape}")

    centers = (np.arange(n_bins) + 0.5) / n_bins
    left = targets[0] - (targets[1] - targets[0]) * centers[0] / (centers[1] - centers[0])
    right = targets[-1] + (targets[-1] - targets[-2]) * (1.0 - centers[-1]) / (centers[-1] - centers[-2])
    knots = np.concatenate([[0.0], centers, [1.0]])
    values = np.concatenate([[left], targets, [right]])

    x = np.asarray(img, dtype=np.float64)
    out = np.clip(np.interp(np.clip(x, 0.0, 1.0), knots, values), 0.0, 1.0)
    return out.astype(np.asarray(img).dtype)


def has_skull(img: np.ndarray, brain_mask: np.ndarray) -> bool:
    """Есть ли ненулевая интенсивность вне маски мозга."""
    return bool(((np.asarray(img) > 0) & (np.asarray(brain_mask) == 0)).any())


def synthetic_modality(
        seg_map: np.ndarray | None,
        orig_img: np.ndarray,
        brain_mask: np.ndarray,
        seed: int | np.random.Generator,
        std_range: tuple[float, float] = SYNTHETIC_STD_RANGE,
        noise_seed: int | np.random.Generator | None = None,
) -> np.ndarray:
    """
    Синтетическая модальность по карте меток: классу k среднее μ_k и σ_k, пиксели ~ N(μ, σ).

    Фон (метка 0) остается нулевым. Если исходное изображение содержит череп,
    синтетический мозг накладывается на исходник, а вне маски мозга остаются исходные значения.

    Args:
        seg_map: Карта меток [H, W]
        orig_img: Исходное изображение [H, W]
        brain_mask: Маска мозга [H, W]
        seed: Seed для параметров классов
        std_range: Диапазон σ_k
        noise_seed: Seed пиксельного шума (по умолчанию тот же генератор)

    Returns:
        np.ndarray: Изображение в [0, 1]
    """
    if seg_map is None:
        raise AugmentationError("synthetic_modality requires a segmentation map")
    labels = np.asarray(seg_map)
    rng = make_rng(seed)
    n_classes = int(labels.max()) + 1
    means = rng.uniform(*SYNTHETIC_MEAN_RANGE, size=n_classes)
    stds = rng.uniform(*std_range, size=n_classes)
    noise_rng = rng if noise_seed is None else make_rng(noise_seed)

    synth = noise_rng.normal(means[labels], stds[labels])
    synth = np.where(labels > 0, np.clip(synth, 0.0, 1.0), 0.0)
    brain = np.asarray(brain_mask).astype(bool)
    if has_skull(orig_img, brain_mask):
        synth = np.where(brain, synth, orig_img)
    return synth.astype(np.asarray(orig_img).dtype)


def mask_contour(mask: np.ndarray) -> np.ndarray:
    """
    Контур маски шириной 3 пикселя.

    Граница: пиксели маски с 4-соседом из фона; край изображения фоном не считается,
    так что у полной маски контур пуст.
    """
    m = _as_binary(mask)
    boundary = m & ~ndimage.binary_erosion(m, structure=CROSS, border_value=1)
    return ndimage.binary_dilation(boundary, structure=SQUARE).astype(np.asarray(mask).dtype)


def mask_dilate(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    m = _as_binary(mask)
    if radius < 1:
        return np.asarray(mask).copy()
    return ndimage.binary_dilation(m, structure=SQUARE, iterations=radius).astype(np.asarray(mask).dtype)


def mask_invert(mask: np.ndarray) -> np.ndarray:
    m = _as_binary(mask)
    return (~m).astype(np.asarray(mask).dtype)


def permute_channels(x: np.ndarray, perm: Sequence[int]) -> np.ndarray:
    """
    Переставляет каналы: out[i] = x[perm[i]].

    Args:
        x: Изображение [3, H, W]
        perm: Перестановка {0, 1, 2}

    Returns:
        np.ndarray: Изображение с переставленными каналами
    """
    perm = [int(i) for i in perm]
    if sorted(perm) != list(range(x.shape[0])):
        raise AugmentationError(f"Invalid channel permutation {perm} for {x.shape[0]} channels")
    return x[perm].copy()


def nonzero_channels(x: np.ndarray, exclude: Sequence[int] = ()) -> list[int]:
    return [c for c in range(x.shape[0]) if c not in exclude and np.any(x[c])]


def duplicate_channels(
        x: np.ndarray,
        p: float = 0.5,
        seed: int | np.random.Generator = 0,
        exclude: Sequence[int] = (),
) -> np.ndarray:
    """
    Пустые каналы с вероятностью p заменяются копией случайного ненулевого канала.

    Args:
        x: Изображение [3, H, W]
        p: Вероятность замены для каждого пустого канала
        seed: Seed или генератор
        exclude: Каналы, которые не копируются и не перезаписываются

    Returns:
        np.ndarray: Новое изображение
    """
    rng = make_rng(seed)
    sources = nonzero_channels(x, exclude)
    out = x.copy()
    if not sources:
        return out
    for c in range(x.shape[0]):
        if c in exclude or np.any(x[c]):
            continue
        if rng.random() < p:
            out[c] = x[sources[int(rng.integers(len(sources)))]]
    return out
