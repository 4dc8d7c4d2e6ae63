"""Shared fixtures: small configs, a tiny corpus and the slow-test switch"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from signbert.config import RunConfig  # noqa: E402
from signbert.pose_data import PoseSequence  # noqa: E402
from signbert.synthetic import generate_synthetic_corpus  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run slow training experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow") or os.getenv("SIGNBERT_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="slow experiment; use --run-slow or SIGNBERT_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_config(**sections) -> RunConfig:
    """A model small enough for unit tests on CPU"""
    data = {
        "embedding": {"d_model": 16, "gcn_widths": [8], "arm_gcn_widths": [8]},
        "transformer": {"n_layers": 1, "n_heads": 2, "ff_width": 32, "dropout": 0.0},
        "hand_model": {"procedural_vertices": 100, "theta_dim": 6, "beta_dim": 3},
        "corpus": {"num_classes": 4, "samples_per_class": 3, "test_per_class": 2, "frames_per_sign": 8,
                   "continuous_train": 4, "continuous_test": 2, "translation_train": 4,
                   "translation_test": 2, "pretrain_samples": 6, "max_sentence_length": 3},
        "pretrain": {"epochs": 1, "batch_size": 4, "max_frames": 64},
        "finetune": {"epochs": 1, "batch_size": 4, "isolated_frames": 8, "modulator_layers": 1,
                     "decoder_layers": 1, "lstm_hidden": 8, "slt_max_length": 6},
    }
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return RunConfig.from_dict(data)


@pytest.fixture
def config() -> RunConfig:
    return tiny_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def corpus(config):
    return generate_synthetic_corpus(config.corpus, np.random.default_rng(0))


def make_sequence(num_frames: int = 10, rng: np.random.Generator = None, image_size=(256, 256),
                  source_id: str = "seq") -> PoseSequence:
    """Random pixel-space sequence with every joint detected"""
    rng = rng if rng is not None else np.random.default_rng(0)
    width, height = image_size

    def part(joints: int) -> np.ndarray:
        array = np.empty((num_frames, joints, 3))
        array[..., 0] = rng.uniform(0, width, (num_frames, joints))
        array[..., 1] = rng.uniform(0, height, (num_frames, joints))
        array[..., 2] = rng.uniform(0.6, 1.0, (num_frames, joints))
        return array

    return PoseSequence(part(21), part(21), part(7), source_id=source_id, image_size=image_size)
