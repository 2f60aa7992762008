"""Shared fixtures for the test suite."""

from __future__ import annotations

import os
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from models.entities import ModelConfig, ProblemSpec, TrainConfig  # noqa: E402


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line(
        "markers", "slow: long stochastic training runs, enabled with MODADD_RUN_SLOW=1"
    )


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if os.getenv("MODADD_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set MODADD_RUN_SLOW=1 to run training acceptance tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _isolated_output_root(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    root = tmp_path / "runs"
    monkeypatch.setenv("MODADD_OUTPUT_ROOT", str(root))
    return root


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec() -> ProblemSpec:
    return ProblemSpec(N=4, q=7, K=2, r=0.5)


@pytest.fixture
def tiny_token_config(tiny_spec: ProblemSpec) -> ModelConfig:
    return ModelConfig(spec=tiny_spec, layers=1, heads=2, d_model=8, d_ffn=16)


@pytest.fixture
def tiny_angular_config(tiny_spec: ProblemSpec) -> ModelConfig:
    return ModelConfig(
        spec=tiny_spec,
        embedding_kind="dual_angular",
        layers=1,
        heads=2,
        d_model=8,
        d_ffn=16,
    )


@pytest.fixture
def quick_train_config() -> TrainConfig:
    return TrainConfig(epochs=2, batch_size=16, peak_lr=1e-3, seed=3, show_progress=False)
