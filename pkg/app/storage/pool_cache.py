"""Дисковый кэш пулов фантомов: тензоры NTF1 и JSON-индекс."""
import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

from app.core.exceptions import FormatError
from app.models.episode import PhantomSubject
from app.schemas.sampler import PhantomConfig
from app.services.phantoms import generate_pool
from app.storage.ntf import ntf_load, ntf_save
from app.utils.logging import app_logger as logger

INDEX_FILE = "index.json"


def cache_key(config: PhantomConfig, image_size: int, n_subjects: int, seed: int, id_offset: int) -> str:
    """Ключ кэша: хэш от всех параметров генерации."""
    payload = json.dumps(
        {
            "phantom": config.model_dump(),
            "image_size": image_size,
            "n_subjects": n_subjects,
            "seed": seed,
            "id_offset": id_offset,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def get_cache(root: Path, key: str) -> list[PhantomSubject] | None:
    """
    Читает пул из кэша по ключу.

    Args:
        root: Каталог кэша
        key: Ключ кэша

    Returns:
        list[PhantomSubject] | None: Пул или None, если записи нет или она повреждена
    """
    directory = root / key
    index_path = directory / INDEX_FILE
    if not index_path.is_file():
        return None
    try:
        index: dict[str, Any] = json.loads(index_path.read_text(encoding="utf-8"))
        pool = [
            PhantomSubject(
                subject_id=int(entry["subject_id"]),
                dataset_id=int(entry["dataset_id"]),
                seg_map=ntf_load(directory / entry["seg_map"]).astype(np.int64),
                modalities=ntf_load(directory / entry["modalities"]),
                brain_mask=ntf_load(directory / entry["brain_mask"]).astype(np.uint8),
            )
            for entry in index["subjects"]
        ]
    except (OSError, KeyError, json.JSONDecodeError, FormatError) as e:
        logger.warning(f"Ignoring damaged pool cache {directory}: {e}")
        return None
    return pool


def set_cache(root: Path, key: str, pool: list[PhantomSubject]) -> bool:
    """
    Записывает пул в кэш.

    Returns:
        bool: True если успешно, иначе False
    """
    directory = root / key
    try:
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for subject in pool:
            stem = f"subject_{subject.subject_id}"
            files = {
                "seg_map": f"{stem}_seg.ntf",
                "modalities": f"{stem}_mod.ntf",
                "brain_mask": f"{stem}_brain.ntf",
            }
            ntf_save(subject.seg_map.astype(np.float32), directory / files["seg_map"])
            ntf_save(subject.modalities.astype(np.float32), directory / files["modalities"])
            ntf_save(subject.brain_mask.astype(np.float32), directory / files["brain_mask"])
            entries.append({"subject_id": subject.subject_id, "dataset_id": subject.dataset_id, **files})
        # индекс пишется последним: его наличие означает полную запись
        (directory / INDEX_FILE).write_text(json.dumps({"subjects": entries}, indent=2), encoding="utf-8")
        return True
    except OSError as e:
        logger.warning(f"Failed to write pool cache {directory}: {e}")
        return False


def load_or_generate_pool(
        config: PhantomConfig,
        image_size: int,
        n_subjects: int,
        seed: int,
        id_offset: int = 0,
        cache_root: Path | None = None,
) -> list[PhantomSubject]:
    """Пул из кэша, если он есть, иначе генерация (и запись в кэш при заданном каталоге)."""
    if cache_root is None:
        return generate_pool(config, image_size, n_subjects, seed, id_offset)
    key = cache_key(config, image_size, n_subjects, seed, id_offset)
    pool = get_cache(cache_root, key)
    if pool is not None:
        logger.info(f"Loaded {len(pool)} phantom subjects from cache {key}")
        return pool
    pool = generate_pool(config, image_size, n_subjects, seed, id_offset)
    if set_cache(cache_root, key, pool):
        logger.info(f"Cached {len(pool)} phantom subjects as {key}")
    return pool
