"""
Формат тензорных файлов NTF1.

magic "NTF1" | u8 dtype (0=f32, 1=f64) | u8 rank | rank × u32 extents | raw values.
Все поля little-endian.
"""
import struct
from pathlib import Path

import numpy as np

from app.core.exceptions import FormatError
from app.engine.tensor import Tensor

MAGIC = b"NTF1"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODE_BY_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def ntf_dumps(value: Tensor | np.ndarray) -> bytes:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if arr.dtype not in CODE_BY_DTYPE:
        arr = arr.astype(np.float32)
    code = CODE_BY_DTYPE[arr.dtype]
    if arr.ndim > 255:
        raise FormatError(f"Rank {arr.ndim} does not fit NTF1")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def ntf_loads(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """
    Читает один тензор NTF1 из буфера.

    Args:
        buf: Байты
        offset: Смещение начала записи

    Returns:
        tuple[np.ndarray, int]: Массив и смещение сразу за записью

    Raises:
        FormatError: Неверная сигнатура, неизвестный dtype или обрезанные данные
    """
    if len(buf) < offset + 6:
        raise FormatError("Truncated NTF1 header")
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"Bad NTF1 magic {bytes(buf[offset:offset + 4])!r}")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"Unknown NTF1 dtype code {code}")
    pos = offset + 6
    if len(buf) < pos + 4 * rank:
        raise FormatError("Truncated NTF1 extents")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"Truncated NTF1 payload: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    return arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def ntf_save(value: Tensor | np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(ntf_dumps(value))


def ntf_load(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise FormatError(f"Cannot read tensor file {path}: {e}") from e
    arr, end = ntf_loads(buf)
    if end != len(buf):
        raise FormatError(f"Trailing bytes in tensor file {path}")
    return arr
