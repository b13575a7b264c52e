"""Симуляция артефактов: шум, поле неоднородности, движение и недовыборка k-пространства."""
from typing import Literal

import numpy as np

from app.core.exceptions import SamplingError, ShapeError
from app.utils.rng import make_rng

CorruptionKind = Literal["noise", "bias", "motion", "undersample"]
CORRUPTION_KINDS: tuple[str, ...] = ("noise", "bias", "motion", "undersample")

NOISE_SIGMA_RANGE = (0.02, 0.2)
MOTION_ROW_FRACTION = 0.3
MOTION_MAX_SHIFT = 3.0
UNDERSAMPLE_MAX_FRACTION = 0.6
CENTER_FRACTION = 0.125


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def fft2(x: np.ndarray, direction: Literal["forward", "inverse"] = "forward") -> np.ndarray:
    """
    Двумерное БПФ по последним двум осям; обратное нормировано на H·W.

    Args:
        x: Изображение [..., H, W]
        direction: forward или inverse

    Returns:
        np.ndarray: Комплексный спектр или изображение
    """
    h, w = x.shape[-2:]
    if not (_is_power_of_two(h) and _is_power_of_two(w)):
        raise ShapeError(f"fft2 requires power-of-two extents, got {h}x{w}")
    if direction == "forward":
        return np.fft.fft2(x)
    if direction == "inverse":
        return np.fft.ifft2(x)
    raise ValueError(f"Unknown FFT direction: {direction}")


def _central_rows(h: int) -> np.ndarray:
    """Строки k-пространства с наименьшими по модулю частотами."""
    n_center = max(1, int(round(h * CENTER_FRACTION)))
    order = np.argsort(np.abs(np.fft.fftfreq(h)), kind="stable")
    return np.sort(order[:n_center])


def add_noise(img: np.ndarray, sigma: float, rng: np.random.Generator, clip: bool = True) -> np.ndarray:
    out = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(out, 0.0, 1.0) if clip else out


def bias_field(shape: tuple[int, int], severity: float, rng: np.random.Generator) -> np.ndarray:
    """exp от полинома второй степени по нормированным координатам."""
    h, w = shape
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    terms = (xx, yy, xx * yy, xx ** 2, yy ** 2)
    coeffs = rng.uniform(-0.5, 0.5, size=len(terms))
    return np.exp(severity * sum(c * t for c, t in zip(coeffs, terms)))


def _motion(img: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape
    k = fft2(img)
    n_rows = max(1, int(round(h * MOTION_ROW_FRACTION)))
    rows = rng.choice(h, size=n_rows, replace=False)
    shifts = rng.uniform(-1.0, 1.0, size=(n_rows, 2)) * MOTION_MAX_SHIFT * severity
    ky = np.fft.fftfreq(h)[rows][:, None]
    kx = np.fft.fftfreq(w)[None, :]
    k[rows] *= np.exp(-2j * np.pi * (ky * shifts[:, :1] + kx * shifts[:, 1:]))
    return np.clip(np.abs(fft2(k, "inverse")), 0.0, 1.0)


def _undersample(img: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    h = img.shape[0]
    center = _central_rows(h)
    outer = np.setdiff1d(np.arange(h), center)
    # порядок строк фиксирован seed, так что множество вырезанных строк растет с severity
    order = rng.permutation(outer)
    fraction = rng.uniform(0.0, UNDERSAMPLE_MAX_FRACTION) * severity
    dropped = order[: int(round(fraction * len(outer)))]
    k = fft2(img)
    k[dropped] = 0.0
    return np.clip(np.abs(fft2(k, "inverse")), 0.0, 1.0)


def corrupt(
        img: np.ndarray,
        kind: CorruptionKind,
        severity: float,
        seed: int | np.random.Generator,
        sigma: float | None = None,
) -> np.ndarray:
    """
    Применяет артефакт к изображению в [0, 1].

    Args:
        img: Изображение [H, W]
        kind: noise, bias, motion или undersample
        severity: Сила артефакта, 0 дает исходное изображение
        seed: Seed или генератор
        sigma: Для noise: базовое σ (по умолчанию случайное из [0.02, 0.2])

    Returns:
        np.ndarray: Искаженное изображение того же типа
    """
    if kind not in CORRUPTION_KINDS:
        raise SamplingError(f"Unknown corruption kind: {kind}")
    if img.ndim != 2:
        raise ShapeError(f"corrupt expects a 2D image, got shape {img.shape}")
    if severity == 0:
        return img.copy()

    rng = make_rng(seed)
    x = img.astype(np.float64)
    if kind == "noise":
        base = rng.uniform(*NOISE_SIGMA_RANGE) if sigma is None else sigma
        out = add_noise(x, base * severity, rng)
    elif kind == "bias":
        out = x * bias_field(x.shape, severity, rng)
        peak = out.max()
        if peak > 0:
            out *= x.max() / peak
    elif kind == "motion":
        out = _motion(x, severity, rng)
    else:
        out = _undersample(x, severity, rng)
    return out.astype(img.dtype)
