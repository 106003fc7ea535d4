import os
import pytest
import numpy as np
import sys
base_path = os.path.join(os.path.abspath(os.path.dirname(__name__)))
sys.path.append(os.path.join(base_path))
from scalefusion_ts.model import ModelConfig, ModelParams
from scalefusion_ts.patching import PatchConfig

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data')


@pytest.fixture
def default_patch_config():
    return PatchConfig()


@pytest.fixture
def toy_patch_config():
    return PatchConfig(patch_len=4, stride=4, repatch_len=2, base_dim=4, max_len=80)


@pytest.fixture
def toy_model_config(toy_patch_config):
    return ModelConfig(patch=toy_patch_config, heads=2, d_ff=8, encoder_depth=1, alpha=1e-4)


@pytest.fixture
def toy_model(toy_model_config):
    return ModelParams(toy_model_config, np.random.default_rng(3))


@pytest.fixture
def toy_series():
    steps = np.arange(80, dtype=np.float64)
    return 0.1 * np.sin(2.0 * np.pi * steps / 16.0) + 0.05 * np.cos(2.0 * np.pi * steps / 7.0)


@pytest.fixture
def ett_csv_path():
    return os.path.join(DATA_DIR, 'toy_ett.csv')


@pytest.fixture
def ucr_path():
    return os.path.join(DATA_DIR, 'toy_ucr.tsv')


@pytest.fixture
def toy_config_path():
    return os.path.join(DATA_DIR, 'toy_config.yaml')


@pytest.fixture
def clean_output_env(monkeypatch):
    monkeypatch.delenv('SCALEFUSION_OUTPUT_DIR', raising=False)
