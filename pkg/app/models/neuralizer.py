"""
Сеть Neuralizer: эмбеддинг, блоки Pairwise-Conv-Avg в U-образной схеме и голова.

Контекст хранится тензором [N, B, C, H, W]; все блоки работают с любым N >= 1
одними и теми же весами.
"""
import numpy as np

from app.core.exceptions import ShapeError
from app.engine import ops
from app.engine.tensor import Tensor, as_tensor
from app.models.params import BlockParams, ConvFactory, ConvParams, NeuralizerParams, ResUnitParams
from app.schemas.model import ModelConfig


def init_params(config: ModelConfig, seed: int, dtype: type = np.float32) -> NeuralizerParams:
    """
    Инициализирует параметры Neuralizer (детерминированно по seed).

    Args:
        config: Конфигурация модели
        seed: Seed генератора
        dtype: float32 для обучения, float64 для проверки градиентов

    Returns:
        NeuralizerParams: Параметры сети
    """
    make = ConvFactory(seed, dtype)
    c = config.channels
    e_x = make(c, config.in_channels, 1)
    e_C = make(c, config.ctx_pair_channels, 1)
    blocks = tuple(
        BlockParams(
            res_x=make.residual_unit(c),
            res_C=make.residual_unit(c),
            k_x=make(c, 2 * c, 1),
            k_C=make(c, 2 * c, 1),
        )
        for _ in config.block_scales
    )
    return NeuralizerParams(
        e_x=e_x,
        e_C=e_C,
        blocks=blocks,
        head_res=make.residual_unit(c),
        head_out=make(config.out_channels, c, 1),
    )


def conv(x: Tensor, p: ConvParams) -> Tensor:
    k = p.kernel.shape[-1]
    return ops.conv2d(x, p.kernel, p.bias, padding=(k - 1) // 2)


def residual_unit(x: Tensor, weights: ResUnitParams) -> Tensor:
    """gelu(x + conv3(gelu(conv3(x)))); форма сохраняется."""
    width = weights.conv1.kernel.shape[1]
    if x.ndim != 4 or x.shape[1] != width or weights.conv2.kernel.shape[0] != width:
        raise ShapeError(f"residual_unit: input {x.shape} does not match width {width}")
    h = ops.gelu(conv(x, weights.conv1))
    h = conv(h, weights.conv2)
    return ops.gelu(ops.add(x, h))


def _per_member(fn, r_C: Tensor) -> Tensor:
    n, b, *rest = r_C.shape
    out = fn(ops.reshape(r_C, (n * b, *rest)))
    return ops.reshape(out, (n, b, *out.shape[1:]))


def embed(x: Tensor, ctx: Tensor, params: NeuralizerParams) -> tuple[Tensor, Tensor]:
    """
    Эмбеддинг 1×1: r_x = x * e_x, r_Ci = concat(x_i, y_i) * e_C.

    Args:
        x: Входное изображение [B, 3, H, W]
        ctx: Пары контекста, уже склеенные по каналам [N, B, 4, H, W]
        params: Параметры сети

    Returns:
        tuple[Tensor, Tensor]: r_x [B, c, H, W] и r_C [N, B, c, H, W]
    """
    if x.ndim != 4 or x.shape[1] != params.e_x.kernel.shape[1]:
        raise ShapeError(f"embed: input must be [B, {params.e_x.kernel.shape[1]}, H, W], got {x.shape}")
    if ctx.ndim != 5 or ctx.shape[2] != params.e_C.kernel.shape[1]:
        raise ShapeError(f"embed: context must be [N, B, {params.e_C.kernel.shape[1]}, H, W], got {ctx.shape}")
    r_x = conv(x, params.e_x)
    r_C = _per_member(lambda t: conv(t, params.e_C), ctx)
    return r_x, r_C


def pairwise_conv_avg_block(r_x: Tensor, r_C: Tensor, params: BlockParams) -> tuple[Tensor, Tensor]:
    """
    Блок Pairwise-Conv-Avg.

    r_int_x = res_x(r_x), r_int_Ci = res_C(r_Ci), p_i = concat(r_int_x, r_int_Ci);
    r_out_x = r_int_x + mean_i(p_i * k_x), r_out_Ci = r_int_Ci + p_i * k_C.

    Args:
        r_x: Представление входа [B, c, H, W]
        r_C: Представления контекста [N, B, c, H, W]
        params: Веса блока

    Returns:
        tuple[Tensor, Tensor]: Новые r_x и r_C тех же форм
    """
    if r_C.ndim != 5 or r_C.shape[0] == 0:
        raise ShapeError("pairwise_conv_avg_block requires a non-empty context set")
    n = r_C.shape[0]
    r_int_x = residual_unit(r_x, params.res_x)
    r_int_C = _per_member(lambda t: residual_unit(t, params.res_C), r_C)

    pairs = ops.concat_channels(ops.repeat_set(r_int_x, n), r_int_C)
    r_out_x = ops.add(r_int_x, ops.mean_over_set(_per_member(lambda t: conv(t, params.k_x), pairs)))
    r_out_C = ops.add(r_int_C, _per_member(lambda t: conv(t, params.k_C), pairs))
    return r_out_x, r_out_C


def forward(x: Tensor | np.ndarray, ctx: Tensor | np.ndarray, params: NeuralizerParams) -> Tensor:
    """
    Прямой проход Neuralizer.

    Блоки идут по масштабам [0, 1, ..., S-1, ..., 1, 0]: после каждого блока
    кодировщика оба потока уменьшаются в 2 раза, после узкого места и блоков
    декодера (кроме последнего) увеличиваются; выходы кодировщика прибавляются
    к входам декодера того же масштаба в обоих потоках.

    Args:
        x: Входное изображение [B, 3, H, W]
        ctx: Контекст [N, B, 4, H, W]
        params: Параметры сети

    Returns:
        Tensor: Линейный выход [B, 1, H, W]
    """
    dtype = params.e_x.kernel.dtype
    x, ctx = as_tensor(x, dtype), as_tensor(ctx, dtype)
    stages = (len(params.blocks) + 1) // 2
    if ctx.ndim != 5 or ctx.shape[0] == 0:
        raise ShapeError(f"forward: context must be a non-empty [N, B, C, H, W] tensor, got {ctx.shape}")
    if x.ndim != 4 or ctx.shape[1] != x.shape[0] or ctx.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"forward: input {x.shape} and context {ctx.shape} disagree on batch or size")
    factor = 2 ** (stages - 1)
    if x.shape[-1] % factor or x.shape[-2] % factor:
        raise ShapeError(f"forward: image size {x.shape[-2:]} not divisible by {factor}")

    scales = list(range(stages)) + list(range(stages - 2, -1, -1))
    r_x, r_C = embed(x, ctx, params)
    skips: dict[int, tuple[Tensor, Tensor]] = {}
    for i, (block, s) in enumerate(zip(params.blocks, scales, strict=True)):
        if i >= stages:
            skip_x, skip_C = skips[s]
            r_x, r_C = ops.add(r_x, skip_x), ops.add(r_C, skip_C)
        r_x, r_C = pairwise_conv_avg_block(r_x, r_C, block)
        if i < stages - 1:
            skips[s] = (r_x, r_C)
            r_x, r_C = ops.resize2(r_x, "down"), ops.resize2(r_C, "down")
        elif i < len(scales) - 1:
            r_x, r_C = ops.resize2(r_x, "up"), ops.resize2(r_C, "up")

    h = residual_unit(r_x, params.head_res)
    return conv(h, params.head_out)
