from dataclasses import dataclass, field, replace

import numpy as np

from app.core.exceptions import NonFiniteError, ShapeError
from app.engine.tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
        params: dict[str, Tensor],
        grads: dict[str, np.ndarray],
        state: AdamState,
) -> tuple[dict[str, Tensor], AdamState]:
    """
    Один шаг Adam с поправкой смещения моментов.

    Параметры без градиента считаются имеющими нулевой градиент.

    Args:
        params: Именованные параметры
        grads: Градиенты по тем же именам
        state: Текущее состояние оптимизатора

    Returns:
        tuple[dict[str, Tensor], AdamState]: Новые параметры и новое состояние

    Raises:
        ShapeError: Форма градиента не совпадает с параметром
        NonFiniteError: Градиент содержит NaN/Inf
    """
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t

    new_params: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(param.shape, dtype=param.dtype)
        if g.shape != param.shape:
            raise ShapeError(f"Gradient for {name} has shape {g.shape}, parameter has {param.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"Non-finite gradient for {name}")

        m = state.m.get(name, np.zeros_like(param.data))
        v = state.v.get(name, np.zeros_like(param.data))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        update = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)

        new_params[name] = Tensor(
            (param.data - update).astype(param.dtype), requires_grad=param.requires_grad, name=name
        )
        new_m[name] = m.astype(param.dtype)
        new_v[name] = v.astype(param.dtype)

    return new_params, replace(state, step=t, m=new_m, v=new_v)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """
    Масштабирует градиенты так, чтобы их общая L2-норма не превышала max_norm.

    Returns:
        tuple[dict[str, np.ndarray], float]: Градиенты и норма до обрезки
    """
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    factor = max_norm / norm
    return {name: g * g.dtype.type(factor) for name, g in grads.items()}, norm
