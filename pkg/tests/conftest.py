# tests/conftest.py
from __future__ import annotations

import json
from pathlib import Path

import pytest

from app.core.settings import settings
from app.services.channel_service import GainLadder, SystemSpec, UserSpec
from app.services.entropy_power import EntropyPowerModel
from app.services.power_grid import PowerGrid

ROOT = Path(__file__).resolve().parents[1]
EXPERIMENTS_DIR = ROOT / "content" / "experiments"


@pytest.fixture
def fixture_ladder() -> GainLadder:
    """Three-level ladder {0, 0.5, 1} shared by the threshold and certificate examples."""
    return GainLadder.of([0.0, 0.5, 1.0])


@pytest.fixture
def laplace_model() -> EntropyPowerModel:
    # p = 1: N(h, g) = (2e/pi) * h^2 * g^2 with unit-variance Gaussian noise
    return EntropyPowerModel.power_law(1.0, sigma2=1.0)


@pytest.fixture
def gaussian_model() -> EntropyPowerModel:
    # p = 2: N(h, g) = h^2 * g, the classical SNR
    return EntropyPowerModel.power_law(2.0, sigma2=1.0)


@pytest.fixture
def fixture_user() -> UserSpec:
    return UserSpec.of([0.2, 0.3, 0.5], g_bar=0.6, g_max=1.0)


@pytest.fixture
def homogeneous_spec(fixture_ladder, laplace_model, fixture_user) -> SystemSpec:
    return SystemSpec.homogeneous(fixture_ladder, fixture_user, 4, laplace_model, eta=0.5)


@pytest.fixture
def unit_grid() -> PowerGrid:
    return PowerGrid.uniform(1.0, 101)


@pytest.fixture
def experiment_path():
    """Path to a config under content/experiments by file stem."""

    def _path(name: str) -> Path:
        return EXPERIMENTS_DIR / f"{name}.json"

    return _path


@pytest.fixture
def experiment_doc(experiment_path):
    def _load(name: str) -> dict:
        return json.loads(experiment_path(name).read_text(encoding="utf-8"))

    return _load


@pytest.fixture(autouse=True)
def _single_thread(monkeypatch):
    """Tests run inline unless they opt into threads themselves."""
    monkeypatch.setattr(settings, "MACPOWER_THREADS", 1)
    yield
