"""Shared fixtures: tiny configs and graphs that keep the suite fast."""

from __future__ import annotations

import pytest
import torch
import yaml

from stwave.config import RunConfig, STWaveConfig
from stwave.graphs import ring_graph

TINY = {
    "name": "tiny",
    "data": {
        "source": "synthetic",
        "dtw_period": 48,
        "synthetic": {"n_nodes": 6, "steps": 400, "seed": 3, "period": 48},
    },
    "model": {"t_in": 4, "t_out": 4, "heads": 2, "head_dim": 4, "layers": 1},
    "train": {"epochs": 2, "batch_size": 32, "seed": 0},
    "ablate": {"variants": ["full", "no-ms"], "max_parallel": 2},
}


@pytest.fixture
def tiny_dict() -> dict:
    return yaml.safe_load(yaml.safe_dump(TINY))


@pytest.fixture
def tiny_config(tmp_path, tiny_dict) -> RunConfig:
    return RunConfig(**{**tiny_dict, "output_dir": str(tmp_path / "runs")})


@pytest.fixture
def tiny_config_file(tmp_path, tiny_dict):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump({**tiny_dict, "output_dir": str(tmp_path / "runs")}))
    return path


@pytest.fixture
def small_model_config() -> STWaveConfig:
    return STWaveConfig(t_in=4, t_out=4, heads=2, head_dim=4, layers=1)


@pytest.fixture
def ring5():
    return ring_graph(5)


@pytest.fixture
def rng():
    g = torch.Generator()
    g.manual_seed(1234)
    return g


@pytest.fixture
def stwave_home(tmp_path, monkeypatch):
    """Point the run-history database at a temp directory."""
    home = tmp_path / "home"
    home.mkdir()
    monkeypatch.setenv("STWAVE_HOME", str(home))
    return home
