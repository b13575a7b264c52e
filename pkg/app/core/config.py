import json
from pathlib import Path

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.exceptions import ConfigError
from app.schemas.run import RunConfig


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="NEURALIZER_",
        env_ignore_empty=True,
        extra="ignore",
    )
    PROJECT_NAME: str = "Neuralizer"

    # Переопределение seed из конфигурации запуска
    SEED: int | None = None

    # Логирование
    LOG_LEVEL: str = "INFO"
    LOG_DIR: Path = Path("logs")

    # Параллельная генерация эпизодов
    WORKERS: int = 1

    # Проверка конечности значений после каждой операции
    CHECK_FINITE: bool = True


settings = Settings()


def load_run_config(path: str | Path) -> RunConfig:
    """
    Читает и валидирует JSON-конфигурацию запуска.

    Args:
        path: Путь к файлу конфигурации

    Returns:
        RunConfig: Конфигурация со всеми значениями по умолчанию

    Raises:
        ConfigError: Файл не найден, не является JSON или не проходит валидацию
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}: {e}") from e

    if settings.SEED is not None:
        config = config.model_copy(update={"seed": settings.SEED})
    return config


def materialize(config: RunConfig, run_dir: Path) -> Path:
    """
    Сохраняет конфигурацию со всеми значениями по умолчанию в каталог запуска.

    Args:
        config: Конфигурация запуска
        run_dir: Каталог запуска

    Returns:
        Path: Путь к записанному config.json
    """
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / "config.json"
    out.write_text(config.model_dump_json(indent=2), encoding="utf-8")
    return out
