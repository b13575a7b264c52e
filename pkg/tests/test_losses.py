import numpy as np
import pytest

from app.core.exceptions import BinaryMaskError, ShapeError
from app.engine.gradcheck import grad_check
from app.engine.tensor import Tensor
from app.schemas.train import LossConfig
from app.services.losses import (
    PSNR_CAP,
    batch_metric,
    dice_coefficient,
    psnr,
    soft_dice_loss,
    task_loss,
    weighted_mse_loss,
)

CASES = range(100)


def _loop_soft_dice(logits, target, eps=1e-6):
    ratios = []
    for b in range(logits.shape[0]):
        inter = sum_p = sum_t = 0.0
        for value, t in zip(logits[b].ravel(), target[b].ravel()):
            p = 1.0 / (1.0 + np.exp(-value))
            inter += p * t
            sum_p += p
            sum_t += t
        ratios.append((2.0 * inter + eps) / (sum_p + sum_t + eps))
    return 1.0 - sum(ratios) / len(ratios)


def _loop_mse(pred, target, sigma2):
    totals = []
    for b in range(pred.shape[0]):
        totals.append(sum((y - p) ** 2 for p, y in zip(pred[b].ravel(), target[b].ravel())))
    return sum(totals) / len(totals) / (2.0 * sigma2)


@pytest.mark.parametrize("case", CASES)
def test_soft_dice_matches_scalar_loop(case):
    rng = np.random.default_rng(case)
    logits = rng.normal(scale=3.0, size=(2, 1, 4, 4))
    target = (rng.random((2, 1, 4, 4)) < 0.4).astype(np.float64)
    value = soft_dice_loss(Tensor(logits, dtype=np.float64), target).item()
    assert value == pytest.approx(_loop_soft_dice(logits, target), abs=1e-9)
    assert 0.0 <= value <= 1.0


@pytest.mark.parametrize("case", CASES)
def test_weighted_mse_matches_scalar_loop(case):
    rng = np.random.default_rng(case)
    pred, target = rng.random((3, 1, 4, 4)), rng.random((3, 1, 4, 4))
    value = weighted_mse_loss(Tensor(pred, dtype=np.float64), target, sigma2=0.05).item()
    assert value == pytest.approx(_loop_mse(pred, target, 0.05), rel=1e-9)


def test_default_sigma_scales_squared_error_by_ten():
    pred = Tensor(np.zeros((1, 1, 1, 2)), dtype=np.float64)
    target = np.array([[[[1.0, 2.0]]]])
    assert weighted_mse_loss(pred, target).item() == pytest.approx(50.0)


def test_soft_dice_of_empty_masks_is_near_zero_loss():
    logits = Tensor(np.full((1, 1, 4, 4), -50.0), dtype=np.float64)
    assert soft_dice_loss(logits, np.zeros((1, 1, 4, 4))).item() == pytest.approx(0.0, abs=1e-6)


def test_soft_dice_rejects_non_binary_target():
    with pytest.raises(BinaryMaskError):
        soft_dice_loss(Tensor(np.zeros((1, 1, 2, 2))), np.full((1, 1, 2, 2), 0.5))


def test_losses_reject_shape_mismatch():
    with pytest.raises(ShapeError):
        soft_dice_loss(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))
    with pytest.raises(ShapeError):
        weighted_mse_loss(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((2, 1, 2, 2)))


@pytest.mark.parametrize("seed", range(10))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    target = (rng.random((2, 1, 3, 3)) < 0.5).astype(np.float64)
    ref = rng.random((2, 1, 3, 3))
    logits = rng.normal(size=(2, 1, 3, 3))
    assert grad_check(lambda t: soft_dice_loss(t, target), [logits]) < 1e-4
    assert grad_check(lambda t: weighted_mse_loss(t, ref), [logits]) < 1e-4


def test_task_loss_dispatches_on_kind():
    pred = Tensor(np.zeros((1, 1, 2, 2)), dtype=np.float64)
    target = np.ones((1, 1, 2, 2))
    assert task_loss(pred, target, LossConfig(kind="mse")).item() == pytest.approx(40.0)
    assert task_loss(pred, target, LossConfig(kind="dice")).item() == pytest.approx(1.0 / 3.0, abs=1e-6)


def test_dice_of_two_empty_masks_is_one():
    empty = np.zeros((4, 4), dtype=np.uint8)
    assert dice_coefficient(empty, empty) == 1.0


def test_dice_values():
    a = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    b = np.array([[1, 0], [1, 0]], dtype=np.uint8)
    assert dice_coefficient(a, a) == 1.0
    assert dice_coefficient(a, b) == pytest.approx(0.5)
    assert dice_coefficient(a, 1 - a) == 0.0


def test_dice_rejects_non_binary():
    with pytest.raises(BinaryMaskError):
        dice_coefficient(np.array([0, 2]), np.array([0, 1]))


def test_psnr_is_capped_for_identical_images():
    img = np.random.default_rng(0).random((8, 8))
    assert psnr(img, img) == PSNR_CAP


def test_psnr_value_and_clipping():
    target = np.zeros((4, 4))
    assert psnr(np.full((4, 4), 0.1), target) == pytest.approx(20.0)
    # значения вне [0, 1] обрезаются до сравнения
    assert psnr(np.full((4, 4), 5.0), np.ones((4, 4))) == PSNR_CAP


def test_batch_metric_thresholds_logits():
    logits = np.array([[[[3.0, -3.0]]], [[[-1.0, -1.0]]]])
    target = np.array([[[[1, 0]]], [[[0, 0]]]], dtype=np.float32)
    assert batch_metric(logits, target, "dice") == [1.0, 1.0]
