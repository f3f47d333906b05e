"""Shared fixtures: a tiny model/dataset pair so the suite runs in minutes."""

from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from binauralnet.audionet import ModelConfig
from binauralnet.scenegen import GenConfig, make_dataset
from binauralnet.signal import StftParams
from binauralnet.vision import TowerConfig

SMALL_STFT = StftParams(window_len=64, hop=32, fft_size=64)
SMALL_TOWER = TowerConfig(image_size=(32, 32), token_dim=8, num_heads=2, tap_dim=2)
SMALL_MODEL = ModelConfig(stft=SMALL_STFT, encoder_widths=(4, 4, 8, 8, 8), tower=SMALL_TOWER)
SMALL_GEN = GenConfig(image_size=(32, 32), duration=0.2, max_sources=2)

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def small_config_json() -> dict:
    return {"gen": SMALL_GEN.to_dict(), "model": SMALL_MODEL.to_dict()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def small_model_cfg() -> ModelConfig:
    return SMALL_MODEL


@pytest.fixture(scope="session")
def small_data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_data")
    make_dataset(SMALL_GEN, root, counts=(16, 4, 8), seed=3)
    return root


@pytest.fixture(scope="session")
def small_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(small_config_json()))
    return path


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
