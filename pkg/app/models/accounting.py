"""Число параметров и оценка FLOP для одного прямого прохода."""
from dataclasses import dataclass

from app.models.baseline import init_baseline_params
from app.models.neuralizer import init_params
from app.models.params import count_params
from app.schemas.model import BaselineConfig, ModelConfig


@dataclass(frozen=True)
class ModelCost:
    name: str
    context_size: int | None
    param_count: int
    flops: float


def _pixels(image_size: int, scale: int) -> int:
    return (image_size >> scale) ** 2


def _conv_macs(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k


def count_params_flops(config: ModelConfig, n: int) -> tuple[int, float]:
    """
    Параметры сети и FLOP = 2 · MAC по всем сверткам прямого прохода.

    Работа контекстной ветви растет линейно по N, число параметров от N не зависит.

    Args:
        config: Конфигурация Neuralizer
        n: Размер контекстного множества

    Returns:
        tuple[int, float]: (число параметров, FLOP)
    """
    c = config.channels
    size = config.image_size
    res_unit = 2 * _conv_macs(c, c, 3)
    pair_update = _conv_macs(2 * c, c, 1)

    macs = _pixels(size, 0) * (_conv_macs(config.in_channels, c, 1) + n * _conv_macs(config.ctx_pair_channels, c, 1))
    for s in config.block_scales:
        per_pixel = res_unit + n * res_unit + n * pair_update * 2
        macs += _pixels(size, s) * per_pixel
    macs += _pixels(size, 0) * (res_unit + _conv_macs(c, config.out_channels, 1))

    return count_params(init_params(config, seed=0)), 2.0 * macs


def count_baseline_params_flops(config: BaselineConfig) -> tuple[int, float]:
    w = config.width
    size = config.image_size
    res_unit = 2 * _conv_macs(w, w, 3)

    macs = _pixels(size, 0) * _conv_macs(config.in_channels, w, 1)
    for s in range(config.stages):
        macs += _pixels(size, s) * res_unit
    for s in range(config.stages - 1):
        macs += _pixels(size, s) * (_conv_macs(2 * w, w, 1) + res_unit)
    macs += _pixels(size, 0) * _conv_macs(w, config.out_channels, 1)

    return count_params(init_baseline_params(config, seed=0)), 2.0 * macs


def cost_table(config: ModelConfig, baseline: BaselineConfig, n: int, wide_factor: int = 4) -> list[ModelCost]:
    """Строки таблицы стоимости: Neuralizer при N=1 и N=n, U-Net заданной ширины и в wide_factor раз шире."""
    rows = []
    for size in sorted({1, n}):
        params, flops = count_params_flops(config, size)
        rows.append(ModelCost(f"neuralizer c={config.channels}", size, params, flops))
    for width in sorted({baseline.width, baseline.width * wide_factor}):
        params, flops = count_baseline_params_flops(baseline.model_copy(update={"width": width}))
        rows.append(ModelCost(f"baseline w={width}", None, params, flops))
    return rows
