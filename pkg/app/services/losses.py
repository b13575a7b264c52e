"""Функции потерь обучения и метрики оценки."""
import numpy as np

from app.core.exceptions import BinaryMaskError, ShapeError
from app.engine import ops
from app.engine.tensor import Tensor, as_tensor
from app.schemas.train import LossConfig

PSNR_CAP = 99.0
MSE_FLOOR = 1e-12


def _require_binary(mask: np.ndarray, what: str) -> None:
    if not np.isin(mask, (0, 1)).all():
        raise BinaryMaskError(f"{what} must be binary (values in {{0, 1}})")


def soft_dice_loss(pred_logits: Tensor, target: Tensor | np.ndarray, eps: float = 1e-6) -> Tensor:
    """
    Soft Dice по вероятностям sigmoid(logits), усредненный по батчу.

    loss = 1 - (2·Σp·t + ε) / (Σp + Σt + ε)

    Args:
        pred_logits: Логиты [B, 1, H, W]
        target: Бинарная маска той же формы
        eps: Сглаживание для пустых масок

    Returns:
        Tensor: Скаляр в [0, 1]
    """
    t = as_tensor(target, pred_logits.dtype)
    if t.shape != pred_logits.shape:
        raise ShapeError(f"soft_dice_loss: shape mismatch {pred_logits.shape} vs {t.shape}")
    _require_binary(t.data, "Dice target")

    p = ops.sigmoid(pred_logits)
    numerator = ops.shift(ops.scale(ops.sum_per_sample(ops.mul(p, t)), 2.0), eps)
    denominator = ops.shift(ops.add(ops.sum_per_sample(p), ops.sum_per_sample(t)), eps)
    return ops.shift(ops.scale(ops.mean(ops.div(numerator, denominator)), -1.0), 1.0)


def weighted_mse_loss(pred: Tensor, target: Tensor | np.ndarray, sigma2: float = 0.05) -> Tensor:
    """
    (1 / 2σ²) · Σ_p (y_p - ŷ_p)², усредненная по батчу.

    Args:
        pred: Предсказание [B, ...]
        target: Цель той же формы
        sigma2: Балансирующий параметр σ²

    Returns:
        Tensor: Скаляр >= 0
    """
    t = as_tensor(target, pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"weighted_mse_loss: shape mismatch {pred.shape} vs {t.shape}")
    diff = ops.sub(pred, t)
    per_sample = ops.sum_per_sample(ops.mul(diff, diff))
    return ops.scale(ops.mean(per_sample), 1.0 / (2.0 * sigma2))


def task_loss(pred: Tensor, target: Tensor | np.ndarray, config: LossConfig) -> Tensor:
    if config.kind == "dice":
        return soft_dice_loss(pred, target, config.dice_eps)
    return weighted_mse_loss(pred, target, config.sigma2)


def mask_from_logits(logits: np.ndarray) -> np.ndarray:
    """Порог 0.5 по sigmoid, то есть логит > 0."""
    return (np.asarray(logits) > 0).astype(np.uint8)


def dice_coefficient(pred_mask: np.ndarray, target_mask: np.ndarray) -> float:
    """
    Жесткий Dice 2|A∩B| / (|A| + |B|); для двух пустых масок равен 1.

    Args:
        pred_mask: Бинарная маска предсказания
        target_mask: Бинарная маска цели

    Returns:
        float: Значение в [0, 1]
    """
    a, b = np.asarray(pred_mask), np.asarray(target_mask)
    if a.shape != b.shape:
        raise ShapeError(f"dice_coefficient: shape mismatch {a.shape} vs {b.shape}")
    _require_binary(a, "Predicted mask")
    _require_binary(b, "Target mask")
    a, b = a.astype(bool), b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def psnr(pred: np.ndarray, target: np.ndarray, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    """
    PSNR = 10 · log10(peak² / mse) по значениям, обрезанным в [0, 1].

    Args:
        pred: Предсказание
        target: Цель
        peak: Пиковое значение сигнала
        cap: Значение при mse < 1e-12

    Returns:
        float: PSNR в дБ
    """
    a, b = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((np.clip(a, 0.0, 1.0) - np.clip(b, 0.0, 1.0)) ** 2))
    if mse < MSE_FLOOR:
        return cap
    return min(cap, 10.0 * np.log10(peak ** 2 / mse))


def batch_metric(pred: np.ndarray, target: np.ndarray, loss_kind: str) -> list[float]:
    """Метрика по каждому изображению батча: Dice для масок, PSNR для изображений."""
    if loss_kind == "dice":
        return [dice_coefficient(mask_from_logits(p), t.astype(np.uint8)) for p, t in zip(pred, target)]
    return [psnr(p, t) for p, t in zip(pred, target)]
