class NeuralizerError(Exception):
    """Базовое исключение приложения."""

    exit_code: int = 1


class ConfigError(NeuralizerError):
    exit_code = 2


class ShapeError(NeuralizerError, ValueError):
    exit_code = 2


class NonFiniteError(NeuralizerError, ArithmeticError):
    exit_code = 3


class TapeError(NeuralizerError, RuntimeError):
    pass


class FormatError(NeuralizerError):
    exit_code = 2


class AugmentationError(NeuralizerError, ValueError):
    exit_code = 2


class BinaryMaskError(NeuralizerError, ValueError):
    exit_code = 2


class SamplingError(NeuralizerError, ValueError):
    exit_code = 2


class DivergenceError(NeuralizerError):
    """
    Функция потерь стала нечисловой во время обучения.

    Args:
        step: Номер шага оптимизатора
        task_kind: Тип задачи эпизода, на котором произошел сбой
        loss: Значение потерь
    """

    exit_code = 3

    def __init__(self, step: int, task_kind: str, loss: float):
        self.step = step
        self.task_kind = task_kind
        self.loss = loss
        super().__init__(
            f"Training diverged at step {step} (task {task_kind}, loss {loss})"
        )
