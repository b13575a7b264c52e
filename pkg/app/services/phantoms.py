"""Генерация фантомных субъектов: голова, череп, анатомия, модальности."""
import numpy as np
from scipy import ndimage

from app.core.exceptions import SamplingError, ShapeError
from app.models.episode import PhantomSubject
from app.schemas.sampler import PhantomConfig
from app.utils.logging import app_logger as logger

MIN_IMAGE_SIZE = 16

BACKGROUND = 0
SKULL = 1
WHITE_MATTER = 2
CORTEX = 3
VENTRICLES = 4
THALAMUS = 5
HIPPOCAMPUS = 6

ANATOMY_LABELS = (WHITE_MATTER, CORTEX, VENTRICLES, THALAMUS, HIPPOCAMPUS)
N_LABELS = HIPPOCAMPUS + 1

# Смещение seed для таблиц интенсивностей модальностей и сайтов
MODALITY_SEED_BASE = 1000
SITE_SEED_BASE = 2000
TEST_SUBJECT_OFFSET = 1_000_000


def _ellipse(
        yy: np.ndarray,
        xx: np.ndarray,
        center: tuple[float, float],
        radii: tuple[float, float],
        angle: float = 0.0,
) -> np.ndarray:
    cy, cx = center
    ry, rx = radii
    dy, dx = yy - cy, xx - cx
    cos, sin = np.cos(angle), np.sin(angle)
    u = dx * cos + dy * sin
    v = -dx * sin + dy * cos
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def modality_intensities(modality: int) -> np.ndarray:
    """
    Фиксированная таблица класс → интенсивность для модальности.

    Одинакова для всех субъектов, так что задача "перенос в модальность m" согласована.

    Args:
        modality: Номер модальности

    Returns:
        np.ndarray: Интенсивности [N_LABELS], фон равен 0
    """
    rng = np.random.default_rng(MODALITY_SEED_BASE + modality)
    table = np.zeros(N_LABELS)
    table[1:] = rng.uniform(0.15, 0.95, size=N_LABELS - 1)
    return table


def _site_gains(dataset_id: int, n_modalities: int, site_bias: float) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(SITE_SEED_BASE + dataset_id)
    gain = 1.0 + rng.uniform(-site_bias, site_bias, size=n_modalities)
    offset = rng.uniform(-site_bias / 2, site_bias / 2, size=n_modalities)
    return gain, offset


def _label_map(rng: np.random.Generator, size: int, with_skull: bool) -> tuple[np.ndarray, np.ndarray]:
    grid = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(grid, grid, indexing="ij")

    center = tuple(rng.uniform(-0.04, 0.04, size=2))
    radii = (rng.uniform(0.80, 0.90), rng.uniform(0.70, 0.80))
    angle = rng.uniform(-0.15, 0.15)

    head = _ellipse(yy, xx, center, radii, angle)
    inner_radii = (radii[0] * 0.86, radii[1] * 0.86)
    brain = _ellipse(yy, xx, center, inner_radii, angle) if with_skull else head

    seg = np.zeros((size, size), dtype=np.int64)
    if with_skull:
        seg[head & ~brain] = SKULL
    seg[brain] = CORTEX
    wm_scale = rng.uniform(0.72, 0.80)
    seg[_ellipse(yy, xx, center, (inner_radii[0] * wm_scale, inner_radii[1] * wm_scale), angle) & brain] = WHITE_MATTER

    cy, cx = center
    structures = (
        # (метка, смещение центра, полуоси), парные структуры симметричны
        (VENTRICLES, (-0.12, 0.11), (rng.uniform(0.20, 0.26), rng.uniform(0.07, 0.09))),
        (THALAMUS, (0.08, 0.13), (rng.uniform(0.10, 0.13), rng.uniform(0.09, 0.12))),
        (HIPPOCAMPUS, (0.36, 0.30), (rng.uniform(0.08, 0.10), rng.uniform(0.13, 0.17))),
    )
    single_ventricle = rng.random() < 0.5
    for label, (oy, ox), axes in structures:
        jitter = rng.uniform(-0.03, 0.03, size=2)
        if label == VENTRICLES and single_ventricle:
            blob = _ellipse(yy, xx, (cy + oy + jitter[0], cx + jitter[1]), (axes[0], axes[1] * 1.6), angle)
            # серповидная форма: срезаем нижнюю часть
            blob &= ~_ellipse(yy, xx, (cy + oy + jitter[0] + axes[0] * 0.9, cx + jitter[1]), axes, angle)
        else:
            blob = np.zeros_like(brain)
            for side in (-1.0, 1.0):
                blob |= _ellipse(
                    yy, xx, (cy + oy + jitter[0], cx + side * (ox + jitter[1])), axes, angle + side * 0.2,
                )
        seg[blob & brain] = label

    return seg, brain.astype(np.uint8)


def _smooth_noise(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=max(1.0, size / 16))
    peak = np.abs(field).max()
    return field * (amplitude / peak) if peak > 0 else field


def generate_phantom(
        seed: int,
        config: PhantomConfig,
        image_size: int,
        subject_id: int | None = None,
) -> PhantomSubject:
    """
    Детерминированно по seed строит фантомного субъекта.

    Сайты с четным dataset_id сохраняют череп, с нечетным отдают уже очищенные изображения.

    Args:
        seed: Seed генерации
        config: Параметры генератора
        image_size: Размер изображения H = W
        subject_id: Идентификатор субъекта (по умолчанию seed)

    Returns:
        PhantomSubject: Субъект с картой меток, модальностями и маской мозга
    """
    if image_size < MIN_IMAGE_SIZE:
        raise ShapeError(f"Image size {image_size} is too small for phantom structures (< {MIN_IMAGE_SIZE})")

    rng = np.random.default_rng(seed)
    dataset_id = int(rng.integers(config.n_datasets))
    seg, brain = _label_map(rng, image_size, with_skull=dataset_id % 2 == 0)
    gain, offset = _site_gains(dataset_id, config.n_modalities, config.site_bias)

    head = seg > BACKGROUND
    modalities = np.zeros((config.n_modalities, image_size, image_size), dtype=np.float32)
    for m in range(config.n_modalities):
        table = modality_intensities(m)
        table[1:] += rng.normal(0.0, 0.03, size=N_LABELS - 1)
        img = table[seg] * gain[m] + offset[m]
        img = ndimage.gaussian_filter(img, sigma=0.5)
        img += _smooth_noise(rng, image_size, config.noise_amplitude)
        modalities[m] = np.where(head, np.clip(img, 0.0, 1.0), 0.0)

    return PhantomSubject(
        subject_id=seed if subject_id is None else subject_id,
        dataset_id=dataset_id,
        seg_map=seg,
        modalities=modalities,
        brain_mask=brain,
    )


def subject_seed(seed: int, subject_id: int) -> int:
    return int(np.random.SeedSequence([seed, subject_id]).generate_state(1)[0])


def generate_pool(
        config: PhantomConfig,
        image_size: int,
        n_subjects: int,
        seed: int,
        id_offset: int = 0,
) -> list[PhantomSubject]:
    """
    Пул субъектов с идентификаторами id_offset .. id_offset + n - 1.

    Тестовый пул строится со смещением TEST_SUBJECT_OFFSET и не пересекается с обучающим.
    """
    pool = [
        generate_phantom(subject_seed(seed, sid), config, image_size, subject_id=sid)
        for sid in range(id_offset, id_offset + n_subjects)
    ]
    logger.debug(f"Generated {n_subjects} phantom subjects (offset {id_offset}, {image_size}px)")
    return pool


def split_pool(
        pool: list[PhantomSubject],
        val_fraction: float,
        seed: int,
) -> tuple[list[PhantomSubject], list[PhantomSubject]]:
    """
    Делит пул на обучающую и валидационную части по субъектам.

    Args:
        pool: Пул субъектов
        val_fraction: Доля валидационных субъектов
        seed: Seed перестановки

    Returns:
        tuple: (train, val) без общих субъектов
    """
    if len(pool) < 2:
        raise SamplingError(f"Cannot split a pool of {len(pool)} subjects")
    n_val = min(len(pool) - 1, max(1, round(len(pool) * val_fraction)))
    order = np.random.default_rng(seed).permutation(len(pool))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(pool) if i not in val_idx]
    val = [s for i, s in enumerate(pool) if i in val_idx]
    return train, val
