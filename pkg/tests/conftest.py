import json
from pathlib import Path

import numpy as np
import pytest

from app.core.config import load_run_config
from app.schemas.model import BaselineConfig, ModelConfig
from app.schemas.run import RunConfig
from app.schemas.sampler import PhantomConfig, SamplerConfig
from app.services.phantoms import generate_pool

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
IMAGE_SIZE = 16


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(channels=4, stages=3, image_size=IMAGE_SIZE)


@pytest.fixture
def tiny_baseline_config() -> BaselineConfig:
    return BaselineConfig(width=4, stages=3, image_size=IMAGE_SIZE)


@pytest.fixture(scope="session")
def phantom_pool():
    return generate_pool(PhantomConfig(), IMAGE_SIZE, 12, seed=0)


@pytest.fixture
def sampler_config() -> SamplerConfig:
    return SamplerConfig(context_size_max=3, n_train_subjects=12, n_test_subjects=8)


@pytest.fixture
def smoke_config(tmp_path: Path) -> RunConfig:
    cfg = load_run_config(CONFIG_DIR / "smoke.json")
    return cfg.model_copy(update={"paths": cfg.paths.model_copy(update={"run_dir": tmp_path / "run"})})


@pytest.fixture
def smoke_config_file(tmp_path: Path, smoke_config: RunConfig) -> Path:
    path = tmp_path / "smoke.json"
    path.write_text(json.dumps(smoke_config.model_dump(mode="json")), encoding="utf-8")
    return path
