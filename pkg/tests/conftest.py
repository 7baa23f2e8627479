"""Shared fixtures for gcm unit tests."""

import json
from pathlib import Path

import numpy as np
import pytest


@pytest.fixture()
def small_config():
    """The gradient-check sized graph with every layer and branch enabled."""
    from gcm.config import GcmConfig

    return GcmConfig(
        d_leaf=16,
        d_entity=8,
        d_map=12,
        n_obj_max=3,
        n_hum_max=3,
        t_window=3,
        n_classes=4,
        interactive_types=("body", "object", "human", "body"),
    )


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture()
def small_clips(small_config, rng):
    from gcm.synth import noise_clips

    return noise_clips(small_config, 6, rng)


@pytest.fixture()
def tiny_data():
    """A few short synthetic videos (d_leaf=16, 5 classes)."""
    from gcm.config import DataConfig

    return DataConfig(
        n_videos=6,
        clips_per_video=8,
        n_body=2,
        n_object=2,
        n_human=1,
        n_candidates=3,
        noise_sigma=0.3,
        val_fraction=0.34,
        seed=7,
    )


@pytest.fixture()
def tiny_grammar(tiny_data):
    from gcm.synth import build_grammar

    return build_grammar(tiny_data, d_leaf=16, t_window=3)


@pytest.fixture()
def tiny_dataset(tiny_grammar, tiny_data):
    from gcm.synth import sample_dataset
    from gcm.train import Dataset

    clips, splits = sample_dataset(tiny_grammar, tiny_data.n_videos, tiny_data.seed, tiny_data.val_fraction)
    return Dataset(clips, splits)


@pytest.fixture()
def tiny_model(small_config, tiny_grammar):
    """*small_config* resized to the tiny grammar's class table."""
    return tiny_grammar.model_config(small_config)


@pytest.fixture()
def config_file(tmp_path: Path):
    """Write a run config JSON and return a factory that yields its path."""

    def _write(data: dict, name: str = "run.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(data, indent=2), encoding="utf-8")
        return path

    return _write
