from app.models.accounting import count_baseline_params_flops, count_params_flops
from app.models.baseline import baseline_forward, init_baseline_params
from app.models.neuralizer import embed, forward, init_params, pairwise_conv_avg_block, residual_unit
from app.models.params import (
    BaselineUNetParams,
    BlockParams,
    ConvParams,
    NeuralizerParams,
    ResUnitParams,
    cast_params,
    count_params,
    param_dict,
    with_tensors,
)

__all__ = [
    "BaselineUNetParams",
    "BlockParams",
    "ConvParams",
    "NeuralizerParams",
    "ResUnitParams",
    "baseline_forward",
    "cast_params",
    "count_baseline_params_flops",
    "count_params",
    "count_params_flops",
    "embed",
    "forward",
    "init_baseline_params",
    "init_params",
    "pairwise_conv_avg_block",
    "param_dict",
    "residual_unit",
    "with_tensors",
]
