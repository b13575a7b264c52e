import numpy as np

from app.core.exceptions import ShapeError
from app.engine import ops
from app.engine.tensor import Tensor, as_tensor
from app.models.neuralizer import conv, residual_unit
from app.models.params import BaselineUNetParams, ConvFactory
from app.schemas.model import BaselineConfig


def init_baseline_params(config: BaselineConfig, seed: int, dtype: type = np.float32) -> BaselineUNetParams:
    """
    Параметры U-Net для одной задачи: по одному residual-блоку на уровень.

    Args:
        config: Конфигурация U-Net
        seed: Seed генератора
        dtype: Тип значений

    Returns:
        BaselineUNetParams: Параметры
    """
    make = ConvFactory(seed, dtype)
    w = config.width
    return BaselineUNetParams(
        stem=make(w, config.in_channels, 1),
        encoder=tuple(make.residual_unit(w) for _ in range(config.stages)),
        merge=tuple(make(w, 2 * w, 1) for _ in range(config.stages - 1)),
        decoder=tuple(make.residual_unit(w) for _ in range(config.stages - 1)),
        head=make(config.out_channels, w, 1),
    )


def baseline_forward(x: Tensor | np.ndarray, params: BaselineUNetParams) -> Tensor:
    """
    Классический U-Net со склейкой skip-соединений, без контекста.

    Args:
        x: Вход [B, 3, H, W]
        params: Параметры U-Net

    Returns:
        Tensor: Линейный выход [B, 1, H, W]
    """
    x = as_tensor(x, params.stem.kernel.dtype)
    stages = len(params.encoder)
    factor = 2 ** (stages - 1)
    if x.ndim != 4 or x.shape[-1] % factor or x.shape[-2] % factor:
        raise ShapeError(f"baseline_forward: image size {x.shape[-2:]} not divisible by {factor}")

    h = conv(x, params.stem)
    skips: list[Tensor] = []
    for s, unit in enumerate(params.encoder):
        h = residual_unit(h, unit)
        if s < stages - 1:
            skips.append(h)
            h = ops.resize2(h, "down")
    for merge, unit, skip in zip(params.merge, params.decoder, reversed(skips), strict=True):
        h = ops.concat_channels(ops.resize2(h, "up"), skip)
        h = residual_unit(conv(h, merge), unit)
    return conv(h, params.head)
