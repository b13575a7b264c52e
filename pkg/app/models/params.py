"""Структуры параметров и их обход по именам."""
import dataclasses
import math
from collections.abc import Iterator
from typing import Any, TypeVar

import numpy as np

from app.engine.tensor import Tensor

P = TypeVar("P")


@dataclasses.dataclass(frozen=True)
class ConvParams:
    kernel: Tensor
    bias: Tensor


@dataclasses.dataclass(frozen=True)
class ResUnitParams:
    conv1: ConvParams
    conv2: ConvParams


@dataclasses.dataclass(frozen=True)
class BlockParams:
    res_x: ResUnitParams
    res_C: ResUnitParams
    k_x: ConvParams
    k_C: ConvParams


@dataclasses.dataclass(frozen=True)
class NeuralizerParams:
    e_x: ConvParams
    e_C: ConvParams
    blocks: tuple[BlockParams, ...]
    head_res: ResUnitParams
    head_out: ConvParams


@dataclasses.dataclass(frozen=True)
class BaselineUNetParams:
    stem: ConvParams
    encoder: tuple[ResUnitParams, ...]
    merge: tuple[ConvParams, ...]
    decoder: tuple[ResUnitParams, ...]
    head: ConvParams


class ConvFactory:
    """
    Создает свертки с He-инициализацией: U(-a, a), a = sqrt(6 / fan_in).

    Дисперсия такого распределения равна 2 / fan_in, смещения нулевые.
    """

    def __init__(self, seed: int, dtype: type = np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def __call__(self, cout: int, cin: int, k: int) -> ConvParams:
        fan_in = cin * k * k
        bound = math.sqrt(6.0 / fan_in)
        kernel = self.rng.uniform(-bound, bound, size=(cout, cin, k, k))
        return ConvParams(
            kernel=Tensor(kernel, requires_grad=True, dtype=self.dtype),
            bias=Tensor(np.zeros(cout), requires_grad=True, dtype=self.dtype),
        )

    def residual_unit(self, width: int) -> ResUnitParams:
        return ResUnitParams(conv1=self(width, width, 3), conv2=self(width, width, 3))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def named_tensors(params: Any, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Обходит структуру параметров в фиксированном порядке: (имя, тензор)."""
    if isinstance(params, Tensor):
        yield prefix, params
    elif dataclasses.is_dataclass(params):
        for f in dataclasses.fields(params):
            yield from named_tensors(getattr(params, f.name), _join(prefix, f.name))
    elif isinstance(params, tuple):
        for i, item in enumerate(params):
            yield from named_tensors(item, _join(prefix, str(i)))
    else:
        raise TypeError(f"Unexpected parameter node {type(params).__name__}")


def param_dict(params: Any) -> dict[str, Tensor]:
    return dict(named_tensors(params))


def with_tensors(params: P, tensors: dict[str, Tensor] | list[Tensor]) -> P:
    """
    Собирает структуру той же формы с новыми тензорами.

    Args:
        params: Образец структуры
        tensors: Тензоры по именам или списком в порядке named_tensors

    Returns:
        Структура того же типа
    """
    if isinstance(tensors, list):
        names = [name for name, _ in named_tensors(params)]
        tensors = dict(zip(names, tensors, strict=True))

    def rebuild(node: Any, prefix: str) -> Any:
        if isinstance(node, Tensor):
            if prefix not in tensors:
                raise KeyError(f"Missing parameter {prefix}")
            new = tensors[prefix]
            if new.shape != node.shape:
                raise ValueError(f"Parameter {prefix} has shape {new.shape}, expected {node.shape}")
            return new
        if dataclasses.is_dataclass(node):
            return dataclasses.replace(node, **{
                f.name: rebuild(getattr(node, f.name), _join(prefix, f.name)) for f in dataclasses.fields(node)
            })
        if isinstance(node, tuple):
            return tuple(rebuild(item, _join(prefix, str(i))) for i, item in enumerate(node))
        raise TypeError(f"Unexpected parameter node {type(node).__name__}")

    return rebuild(params, "")


def cast_params(params: P, dtype: type) -> P:
    return with_tensors(params, {name: t.astype(dtype) for name, t in param_dict(params).items()})


def count_params(params: Any) -> int:
    return sum(t.size for _, t in named_tensors(params))
