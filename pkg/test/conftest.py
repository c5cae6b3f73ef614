"""
test/conftest.py: shared fixtures

Puts the project root on sys.path and provides small synthetic data, models and IDX files.
"""

import os
import sys

import numpy as np
import pytest

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from binary_net import Model, TrainConfig, dense_architecture  # noqa: E402
from data import Dataset, synth_gaussian_split, write_idx  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_specs():
    return dense_architecture((1, 8), hidden=6, num_classes=3)


@pytest.fixture
def tiny_model(tiny_specs):
    return Model.build(tiny_specs, rng=np.random.default_rng(1))


@pytest.fixture
def blobs():
    """(train, test): 3 classes, 40 / 10 per class, 8 dims."""
    return synth_gaussian_split(3, 40, 10, 8, seed=0)


@pytest.fixture
def train_cfg():
    return TrainConfig(batch_size=16, learning_rate_schedule=[(0, 0.01)])


@pytest.fixture
def ten_class_dataset():
    """10 classes x 60 samples of 2x2 images, labels in blocks."""
    labels = np.repeat(np.arange(10), 60)
    images = np.random.default_rng(5).random((600, 2, 2))
    return Dataset(images, labels, 10)


@pytest.fixture
def idx_pair(tmp_path):
    """Writes a 2-image 3x3 IDX pair, returns (images_path, labels_path, pixels, labels)."""
    def make(suffix=""):
        pixels = np.arange(18, dtype=np.uint8).reshape(2, 3, 3) * 10
        labels = np.array([3, 7], dtype=np.uint8)
        images_path = tmp_path / f"images.idx{suffix}"
        labels_path = tmp_path / f"labels.idx{suffix}"
        write_idx(images_path, pixels)
        write_idx(labels_path, labels)
        return images_path, labels_path, pixels, labels
    return make
