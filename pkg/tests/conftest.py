"""
Pytest configuration and fixtures for the QKCV forecasting tests.
"""

import shutil
import sys
from dataclasses import replace
import tempfile
from pathlib import Path

import numpy as np
import pytest
import yaml

sys.path.insert(0, str(Path(__file__).parent.parent))

from config import ModelConfig, OptimConfig, SyntheticSpec
from data_manager import generate_synthetic, split_and_window


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: qualitative reproductions that train several models")


@pytest.fixture
def rng():
    """Seeded generator for random inputs."""
    return np.random.default_rng(0)


@pytest.fixture
def temp_data_dir():
    """Create a temporary directory for output tests."""
    temp_dir = tempfile.mkdtemp()
    yield temp_dir
    shutil.rmtree(temp_dir)


@pytest.fixture
def tiny_spec():
    """Six entities over three categories, 40 daily steps."""
    return SyntheticSpec(n_categories=[3], n_entities=6, length=40, noise_sigma=1.0, seed=0)


@pytest.fixture
def tiny_dataset(tiny_spec):
    return generate_synthetic(tiny_spec)


@pytest.fixture
def tiny_windows(tiny_dataset):
    """(train, val, test) with L_in=8, L_out=4 and boundaries (28, 34)."""
    return split_and_window(tiny_dataset, 8, 4, (28, 34))


@pytest.fixture
def tiny_model_config():
    """Single-layer vanilla forecaster matching tiny_windows."""
    return ModelConfig(input_len=8, horizon=4, model_dim=8, heads=2, head_dim=4, n_layers=1,
                       ffn_dim=16, dropout=0.0)


@pytest.fixture
def qkcv_model_config(tiny_model_config, tiny_dataset):
    """Factory: the tiny config with a QKCV variant and encoder over tiny_dataset's statics."""
    def make(variant="v1", encoder="sce", **overrides):
        values = dict(variant=variant, encoder=encoder, static_cardinalities=tiny_dataset.cardinalities,
                      static_names=list(tiny_dataset.static_names))
        values.update(overrides)
        return replace(tiny_model_config, **values)
    return make


@pytest.fixture
def fast_optim():
    return OptimConfig(learning_rate=1e-2, max_steps=20, batch_size=16, eval_every=5, log_every=5,
                       patience=3, seed=0)


@pytest.fixture
def write_config(temp_data_dir):
    """Write a run document into the temp dir and return its path."""
    def write(document, name="run.yaml"):
        path = Path(temp_data_dir) / name
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(document, f)
        return str(path)
    return write


@pytest.fixture
def small_run_document():
    """A CLI run small enough to train in seconds."""
    return {
        "model": {"input_len": 8, "horizon": 4, "model_dim": 8, "heads": 2, "head_dim": 4,
                  "n_layers": 1, "ffn_dim": 16, "dropout": 0.0},
        "optim": {"max_steps": 6, "batch_size": 16, "eval_every": 3, "log_every": 3},
        "synthetic": {"n_categories": [4], "n_entities": 8, "length": 60, "seed": 0},
        "finetune": {"base_layers": 1, "base_ffn_dim": 16, "patch_len": 2, "pretrain_steps": 4,
                     "modes": ["frozen", "pl", "pl+qkcv"], "variants": ["v1"]},
    }
