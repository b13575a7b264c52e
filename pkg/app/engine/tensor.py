"""
Плотные тензоры с обратным автоматическим дифференцированием.

Каждый прямой проход записывается на ленту (Tape). Лента заполняется
только операциями, у которых хотя бы один вход требует градиент, и
расходуется ровно одним вызовом backward.
"""
import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from app.core.config import settings
from app.core.exceptions import NonFiniteError, ShapeError, TapeError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """
    Неизменяемый n-мерный массив float32/float64 с привязкой к ленте.

    Args:
        data: Значения (любая форма, приводимая к numpy)
        requires_grad: Накапливать ли градиент для этого листа
        dtype: float32 (обучение) или float64 (проверка градиентов)
    """

    __slots__ = ("data", "requires_grad", "tape_node", "grad", "name", "__weakref__")

    def __init__(
            self,
            data: Any,
            requires_grad: bool = False,
            dtype: np.dtype | type | None = None,
            name: str | None = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES else np.float32
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in FLOAT_DTYPES:
            raise ShapeError(f"Unsupported dtype {arr.dtype}")
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.tape_node: Node | None = None
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.tape_node = None
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype: np.dtype | type) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __add__(self, other: "Tensor") -> "Tensor":
        from app.engine.ops import add
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from app.engine.ops import sub
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from app.engine.ops import mul
        return mul(self, other)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn
    tape: "Tape"
    index: int


@dataclass(eq=False)
class Tape:
    """
    Лента одного прямого прохода.

    Узлы добавляются только в конец, поэтому их порядок уже топологический.
    Лента активна внутри `with Tape():` (на поток своя), после backward
    она считается израсходованной.
    """

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op: str, output: Tensor, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> None:
        if self.consumed:
            raise TapeError("Cannot record on a consumed tape")
        node = Node(op, inputs, output, backward_fn, self, len(self.nodes))
        self.nodes.append(node)
        output.tape_node = node
        output.requires_grad = True

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """
        Обратный проход от скалярной функции потерь.

        Args:
            loss: 0-мерный тензор, записанный на эту ленту

        Returns:
            dict[Tensor, np.ndarray]: Градиенты всех листьев с requires_grad

        Raises:
            TapeError: Не скаляр, лента уже израсходована или loss не с этой ленты
        """
        if loss.ndim != 0:
            raise TapeError(f"backward() requires a 0-dim loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward() called twice on a consumed tape")
        if loss.tape_node is None or loss.tape_node.tape is not self:
            raise TapeError("Loss is not recorded on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: loss.tape_node.index + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for tensor, tensor_grad in zip(node.inputs, input_grads):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                if check_finite_enabled() and not np.isfinite(tensor_grad).all():
                    raise NonFiniteError(f"Non-finite gradient in backward of {node.op}")
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + tensor_grad
                else:
                    grads[key] = tensor_grad
                if tensor.tape_node is None or tensor.tape_node.tape is not self:
                    leaves[key] = tensor

        result: dict[Tensor, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            result[leaf] = g
        self.nodes.clear()
        return result


_local = threading.local()


def _tape_stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def check_finite_enabled() -> bool:
    return getattr(_local, "check_finite", settings.CHECK_FINITE)


def set_check_finite(enabled: bool) -> None:
    _local.check_finite = enabled


def make_output(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    """Оборачивает результат операции и записывает узел на активную ленту."""
    if check_finite_enabled() and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor._wrap(np.ascontiguousarray(data))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """
    Вычисляет градиенты по ленте, на которой записан loss.

    Args:
        loss: Скалярная функция потерь

    Returns:
        dict[Tensor, np.ndarray]: Градиенты листьев
    """
    if loss.tape_node is None:
        raise TapeError("Loss has no tape linkage (was it computed inside `with Tape()`?)")
    return loss.tape_node.tape.backward(loss)


def as_tensor(value: Tensor | np.ndarray | float, dtype: np.dtype | None = None) -> Tensor:
    if isinstance(value, Tensor):
        if dtype is not None and value.dtype != dtype:
            return Tensor._wrap(value.data.astype(dtype))
        return value
    return Tensor(value, dtype=dtype)
