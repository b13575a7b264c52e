"""
Формат чекпоинтов NLZ1.

magic "NLZ1" | u16 version | u32 длина метаданных | JSON метаданных |
u32 число тензоров | (u16 длина имени, имя UTF-8, запись NTF1) × число тензоров.
Все поля little-endian.
"""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from app.core.exceptions import FormatError
from app.engine.optim import AdamState
from app.engine.tensor import Tensor
from app.models.baseline import init_baseline_params
from app.models.neuralizer import init_params
from app.models.params import BaselineUNetParams, NeuralizerParams, param_dict, with_tensors
from app.schemas.checkpoint import CheckpointMeta
from app.storage.ntf import ntf_dumps, ntf_loads
from app.utils.logging import app_logger as logger

MAGIC = b"NLZ1"
VERSION = 1

PARAM_PREFIX = "param/"
ADAM_M_PREFIX = "adam.m/"
ADAM_V_PREFIX = "adam.v/"


@dataclass
class Checkpoint:
    meta: CheckpointMeta
    params: NeuralizerParams | BaselineUNetParams
    adam: AdamState


def _template(meta: CheckpointMeta) -> NeuralizerParams | BaselineUNetParams:
    if meta.model_kind == "neuralizer":
        if meta.model is None:
            raise FormatError("Neuralizer checkpoint without model config")
        return init_params(meta.model, seed=0)
    if meta.baseline is None:
        raise FormatError("Baseline checkpoint without baseline config")
    return init_baseline_params(meta.baseline, seed=0)


def checkpoint_dumps(ckpt: Checkpoint) -> bytes:
    adam = ckpt.adam
    meta = ckpt.meta.model_copy(update={
        "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step},
    })
    meta_bytes = meta.model_dump_json().encode("utf-8")

    tensors: list[tuple[str, np.ndarray]] = [
        (PARAM_PREFIX + name, t.data) for name, t in param_dict(ckpt.params).items()
    ]
    tensors += [(ADAM_M_PREFIX + name, m) for name, m in sorted(adam.m.items())]
    tensors += [(ADAM_V_PREFIX + name, v) for name, v in sorted(adam.v.items())]

    chunks = [MAGIC, struct.pack("<HI", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        encoded = name.encode("utf-8")
        chunks += [struct.pack("<H", len(encoded)), encoded, ntf_dumps(arr)]
    return b"".join(chunks)


def checkpoint_loads(buf: bytes) -> Checkpoint:
    """
    Разбирает чекпоинт NLZ1.

    Args:
        buf: Содержимое файла

    Returns:
        Checkpoint: Метаданные, параметры и состояние Adam

    Raises:
        FormatError: Чужая сигнатура, неподдерживаемая версия, обрезанный или поврежденный файл
    """
    if len(buf) < 10:
        raise FormatError("Truncated NLZ1 header")
    if buf[:4] != MAGIC:
        raise FormatError(f"Bad NLZ1 magic {bytes(buf[:4])!r}")
    version, meta_len = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise FormatError(f"Unsupported NLZ1 version {version} (expected {VERSION})")
    pos = 10
    if len(buf) < pos + meta_len + 4:
        raise FormatError("Truncated NLZ1 metadata")
    try:
        meta = CheckpointMeta.model_validate_json(buf[pos:pos + meta_len])
    except ValidationError as e:
        raise FormatError(f"Corrupt NLZ1 metadata: {e}") from e
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4

    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise FormatError("Truncated NLZ1 tensor table")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) < pos + name_len:
            raise FormatError("Truncated NLZ1 tensor name")
        try:
            name = buf[pos:pos + name_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"Corrupt NLZ1 tensor name: {e}") from e
        arrays[name], pos = ntf_loads(buf, pos + name_len)
    if pos != len(buf):
        raise FormatError(f"Trailing {len(buf) - pos} bytes after NLZ1 tensor table")

    template = _template(meta)
    try:
        params = with_tensors(template, {
            name: Tensor(arrays[PARAM_PREFIX + name], requires_grad=True, name=name)
            for name, _ in param_dict(template).items()
        })
    except (KeyError, ValueError) as e:
        raise FormatError(f"NLZ1 parameters do not match the model config: {e}") from e

    adam = AdamState(
        lr=meta.adam.get("lr", 1e-4),
        beta1=meta.adam.get("beta1", 0.9),
        beta2=meta.adam.get("beta2", 0.999),
        eps=meta.adam.get("eps", 1e-8),
        step=int(meta.adam.get("step", 0)),
        m={k[len(ADAM_M_PREFIX):]: v for k, v in arrays.items() if k.startswith(ADAM_M_PREFIX)},
        v={k[len(ADAM_V_PREFIX):]: v for k, v in arrays.items() if k.startswith(ADAM_V_PREFIX)},
    )
    return Checkpoint(meta=meta, params=params, adam=adam)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_dumps(ckpt))
    tmp.replace(path)
    logger.info(f"Saved {ckpt.meta.model_kind} checkpoint at step {ckpt.meta.step} to {path}")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise FormatError(f"Cannot read checkpoint {path}: {e}") from e
    try:
        return checkpoint_loads(buf)
    except FormatError as e:
        logger.error(f"Corrupt checkpoint {path}: {e}")
        raise
