import logging
import sys
from pathlib import Path

from loguru import logger

LOG_FILE_NAME = "neuralizer.log"
WARNINGS_LOGGER = "py.warnings"

CONSOLE_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss.SSS}</green> | "
    "<level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - "
    "<level>{message}</level>"
)
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <8} | {name}:{function}:{line} - {message}"


class WarningsHandler(logging.Handler):
    """
    Переправляет предупреждения numpy/scipy (logger py.warnings) в loguru.

    Уровень берется по имени, неизвестные уровни передаются числом.
    """

    def emit(self, record: logging.LogRecord) -> None:
        try:
            level: str | int = logger.level(record.levelname).name
        except ValueError:
            level = record.levelno
        logger.opt(exception=record.exc_info).log(level, record.getMessage().strip())


def setup_logging(log_level: str = "INFO", log_dir: Path | None = None) -> None:
    """
    Настраивает логирование запуска: консоль и, при наличии каталога, файл с ротацией.

    Args:
        log_level: Уровень логирования
        log_dir: Каталог для файла логов; без него пишем только в stderr
    """
    logger.remove()
    logger.add(sys.stderr, format=CONSOLE_FORMAT, level=log_level, colorize=True)

    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        logger.add(
            log_dir / LOG_FILE_NAME,
            rotation="10 MB",  # Ротация по размеру
            retention="7 days",  # Хранение логов - неделя
            format=FILE_FORMAT,
            level=log_level,
        )

    # warnings.warn -> logging -> loguru
    warnings_logger = logging.getLogger(WARNINGS_LOGGER)
    warnings_logger.handlers = [WarningsHandler()]
    warnings_logger.propagate = False
    logging.captureWarnings(True)


app_logger = logger
