"""Дифференцируемые операции над Tensor."""
import math
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.core.exceptions import ShapeError
from app.engine.tensor import Tensor, make_output

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

SUPPORTED_KERNELS = (1, 3)


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _correlate(x: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    kh, kw = w.shape[2:]
    if kh == 1 and kw == 1 and padding == 0:
        out = np.tensordot(x, w[:, :, 0, 0], axes=([1], [1]))
        return out.transpose(0, 3, 1, 2)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """
    Взаимная корреляция (свертка без отражения ядра) с нулевым дополнением.

    Args:
        x: Вход [B, Cin, H, W]
        kernel: Ядро [Cout, Cin, kh, kw], kh, kw из {1, 3}
        bias: Смещение [Cout] или None
        padding: Ширина нулевого дополнения

    Returns:
        Tensor: Выход [B, Cout, H', W']
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: channel mismatch, input has {cin}, kernel expects {kcin}")
    if kh != kw or kh not in SUPPORTED_KERNELS:
        raise ShapeError(f"conv2d: unsupported kernel size {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if not 0 <= padding <= kh - 1:
        raise ShapeError(f"conv2d: padding {padding} outside [0, {kh - 1}]")
    out_h, out_w = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if h <= 0 or w <= 0 or out_h <= 0 or out_w <= 0:
        raise ShapeError(f"conv2d: non-positive spatial extent for input {x.shape}")

    xd, wd = x.data, kernel.data
    out = _correlate(xd, wd, padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        flipped = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        grad_x = _correlate(g, np.ascontiguousarray(flipped), kh - 1 - padding)
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = g.sum(axis=(0, 2, 3))
        return grad_x, grad_w, grad_b

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_output("conv2d", out, inputs, backward)


def gelu(x: Tensor) -> Tensor:
    """GELU в tanh-приближении: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    xd = x.data
    inner = GELU_C * (xd + GELU_A * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        d_inner = GELU_C * (1.0 + 3.0 * GELU_A * xd ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * d_inner
        return (g * local,)

    return make_output("gelu", out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # устойчивая форма для больших |x|
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * out * (1.0 - out),)

    return make_output("sigmoid", out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """
    Конкатенация по оси каналов (третья с конца: [..., C, H, W]).

    Args:
        a: Тензор [..., Ca, H, W]
        b: Тензор [..., Cb, H, W]

    Returns:
        Tensor: [..., Ca + Cb, H, W], каналы a идут первыми
    """
    if a.ndim < 3 or a.ndim != b.ndim:
        raise ShapeError(f"concat_channels: rank mismatch {a.shape} vs {b.shape}")
    if a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[-3]
    out = np.concatenate([a.data, b.data], axis=-3)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g[..., :ca, :, :], g[..., ca:, :, :]

    return make_output("concat_channels", out, (a, b), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[-3]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels: bad range [{start}, {stop}) for {c} channels")
    out = x.data[..., start:stop, :, :]

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., start:stop, :, :] = g
        return (full,)

    return make_output("slice_channels", out, (x,), backward)


def resize2(x: Tensor, direction: Literal["down", "up"]) -> Tensor:
    """
    Масштабирование в 2 раза по двум последним осям.

    down: усреднение блоков 2×2, up: повтор ближайшего соседа.

    Args:
        x: Тензор [..., H, W]
        direction: "down" или "up"

    Returns:
        Tensor: [..., H/2, W/2] или [..., 2H, 2W]
    """
    *lead, h, w = x.shape
    if direction == "down":
        if h % 2 or w % 2:
            raise ShapeError(f"resize2 down requires even extents, got {h}x{w}")
        out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    elif direction == "up":
        out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    else:
        raise ShapeError(f"resize2: unknown direction {direction!r}")
    return make_output(f"resize2_{direction}", out, (x,), backward)


def mean_over_set(x: Tensor) -> Tensor:
    """
    Среднее по первой оси (элементы контекстного множества).

    Среднее накапливается поэлементно (m_k = m_{k-1} + (x_k - m_{k-1}) / k),
    поэтому для k одинаковых копий результат совпадает с копией точно.

    Args:
        x: Тензор [N, ...], N >= 1

    Returns:
        Tensor: [...]
    """
    if x.ndim < 1 or x.shape[0] == 0:
        raise ShapeError("mean_over_set requires N >= 1")
    n = x.shape[0]
    xd = x.data
    out = xd[0].copy()
    for k in range(1, n):
        out += (xd[k] - out) / (k + 1)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return make_output("mean_over_set", out, (x,), backward)


def repeat_set(x: Tensor, n: int) -> Tensor:
    """Повторяет тензор n раз по новой первой оси: [...] -> [n, ...]."""
    if n < 1:
        raise ShapeError(f"repeat_set requires n >= 1, got {n}")
    out = np.broadcast_to(x.data, (n, *x.shape)).copy()

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.sum(axis=0),)

    return make_output("repeat_set", out, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(x.shape),)

    return make_output("reshape", out, (x,), backward)


def elementwise(a: Tensor, b: Tensor, kind: Literal["add", "sub", "mul"]) -> Tensor:
    """
    Поэлементная операция над тензорами одинаковой формы.

    Args:
        a: Левый операнд
        b: Правый операнд
        kind: "add", "sub" или "mul"

    Returns:
        Tensor: Результат той же формы
    """
    _require_same_shape(a, b, kind)
    ad, bd = a.data, b.data
    if kind == "add":
        out = ad + bd

        def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            return g, g

    elif kind == "sub":
        out = ad - bd

        def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            return g, -g

    elif kind == "mul":
        out = ad * bd

        def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            return g * bd, g * ad

    else:
        raise ShapeError(f"elementwise: unknown kind {kind!r}")
    return make_output(kind, out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g / bd, -g * ad / (bd * bd)

    return make_output("div", out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * x.dtype.type(factor)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * factor,)

    return make_output("scale", out, (x,), backward)


def shift(x: Tensor, offset: float) -> Tensor:
    out = x.data + x.dtype.type(offset)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g,)

    return make_output("shift", out, (x,), backward)


def total(x: Tensor) -> Tensor:
    """Сумма всех элементов -> 0-мерный тензор."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.full(x.shape, g, dtype=x.dtype),)

    return make_output("sum", out, (x,), backward)


def sum_per_sample(x: Tensor) -> Tensor:
    """Сумма по всем осям, кроме первой: [B, ...] -> [B]."""
    axes = tuple(range(1, x.ndim))
    out = x.data.sum(axis=axes)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(g.reshape(-1, *([1] * len(axes))), x.shape).copy(),)

    return make_output("sum_per_sample", out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / x.size)
