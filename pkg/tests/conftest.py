import numpy as np
import pytest
import torch

from anti_learn.data import CLASSIFICATION, SEGMENTATION, ImageDataset
from anti_learn.ingestion import SyntheticSpec, make_blobs16, make_shapes_seg
from anti_learn.predictor import build_predictor
from anti_learn.training import TrainConfig, train_standard

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def blobs_small():
    """A small blobs16 split for fast generator and training tests."""
    return make_blobs16(SyntheticSpec("blobs16", n_train=90, n_test=60, seed=3, noise_std=0.03))


@pytest.fixture(scope="session")
def seg_small():
    return make_shapes_seg(SyntheticSpec("shapes_seg", n_train=12, n_test=6, seed=3, image_size=16,
                                         noise_std=0.05))


@pytest.fixture(scope="session")
def surrogate(blobs_small):
    train, _ = blobs_small
    p = build_predictor("small_cnn", train.image_shape, train.num_classes, seed=0)
    p, _ = train_standard(p, train, TrainConfig(epochs=12, batch_size=16, lr=0.05, seed=0))
    return p


def random_classification(n=4, size=16, channels=1, classes=3, seed=0) -> ImageDataset:
    rng = np.random.default_rng(seed)
    return ImageDataset(rng.random((n, size, size, channels), dtype=np.float32),
                        rng.integers(0, classes, n), CLASSIFICATION, classes)


def random_segmentation(n=2, size=8, seed=0) -> ImageDataset:
    rng = np.random.default_rng(seed)
    return ImageDataset(rng.random((n, size, size, 1), dtype=np.float32),
                        rng.integers(0, 2, (n, size, size)), SEGMENTATION, 2)
