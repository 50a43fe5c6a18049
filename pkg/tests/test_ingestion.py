import warnings

import numpy as np
import pytest
from PIL import Image

from anti_learn.data import SEGMENTATION
from anti_learn.errors import (
    ConfigInvalid,
    InvalidDataset,
    MissingArrayEntry,
    MultiLabelUnsupported,
    NonBinaryMask,
    NonBinaryMaskWarning,
    UnpairedImage,
)
from anti_learn.evaluation import micro_iou
from anti_learn.ingestion import (
    SyntheticSpec,
    load_medmnist_archive,
    load_segmentation_folder,
    make_blobs16,
    make_shapes_seg,
    make_synthetic,
)


def _archive(path, train_labels=None, drop=()):
    rng = np.random.default_rng(0)
    arrays = {
        "train_images": rng.integers(0, 256, (18, 28, 28, 3), dtype=np.uint8),
        "train_labels": np.arange(18).reshape(-1, 1) % 9 if train_labels is None else train_labels,
        "test_images": rng.integers(0, 256, (9, 28, 28, 3), dtype=np.uint8),
        "test_labels": np.arange(9).reshape(-1, 1),
    }
    for key in drop:
        del arrays[key]
    np.savez_compressed(path, **arrays)
    return path


def test_medmnist_layout_with_nine_classes(tmp_path):
    train, test = load_medmnist_archive(_archive(tmp_path / "pathmnist.npz"))
    assert train.num_classes == 9
    assert train.image_shape == (28, 28, 3)
    assert train.labels.shape == (18,)
    assert (train.split, test.split) == ("train", "test")
    assert train.name == "pathmnist"


def test_uint8_scaling(tmp_path):
    path = tmp_path / "a.npz"
    np.savez(path, train_images=np.full((2, 4, 4), 255, np.uint8), train_labels=np.array([[0], [1]]),
             test_images=np.zeros((2, 4, 4), np.uint8), test_labels=np.array([[1], [0]]))
    train, test = load_medmnist_archive(path)
    assert train.images.max() == 1.0 and train.images.dtype == np.float32
    assert train.image_shape == (4, 4, 1)
    assert test.images.max() == 0.0


def test_missing_entry(tmp_path):
    with pytest.raises(MissingArrayEntry):
        load_medmnist_archive(_archive(tmp_path / "m.npz", drop=("test_labels",)))


def test_multilabel_rejected(tmp_path):
    labels = np.random.default_rng(0).integers(0, 2, (18, 14))
    with pytest.raises(MultiLabelUnsupported):
        load_medmnist_archive(_archive(tmp_path / "chest.npz", train_labels=labels))


def _write_pair(root, split, stem, image, mask):
    for sub, arr in (("images", image), ("masks", mask)):
        d = root / split / sub
        d.mkdir(parents=True, exist_ok=True)
        if arr is not None:
            Image.fromarray(arr).save(d / f"{stem}.png")


def _seg_folder(root, n=3, mask_value=255):
    rng = np.random.default_rng(1)
    for split in ("train", "test"):
        for i in range(n):
            img = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
            mask = np.zeros((8, 8), np.uint8)
            mask[2:5, 2:6] = mask_value
            _write_pair(root, split, f"s{i:02d}", img, mask)
    return root


def test_segmentation_folder(tmp_path):
    train, test = load_segmentation_folder(_seg_folder(tmp_path / "kvasir"))
    assert len(train) == 3 and len(test) == 3
    assert train.task_kind == SEGMENTATION and train.num_classes == 2
    assert train.labels.sum() == 3 * 12
    assert train.image_shape == (8, 8, 3)


def test_mask_threshold_at_half(tmp_path):
    train, _ = load_segmentation_folder(_seg_folder(tmp_path / "k", mask_value=200))
    assert set(np.unique(train.labels)) == {0, 1}
    assert train.labels.sum() == 3 * 12


def test_unpaired_image(tmp_path):
    root = _seg_folder(tmp_path / "k")
    _write_pair(root, "train", "lonely", np.zeros((8, 8), np.uint8), None)
    with pytest.raises(UnpairedImage):
        load_segmentation_folder(root)


def test_ambiguous_masks(tmp_path):
    root = _seg_folder(tmp_path / "k", mask_value=128)
    with pytest.raises(NonBinaryMask):
        load_segmentation_folder(root)

    root = _seg_folder(tmp_path / "w")
    mask = np.zeros((20, 20), np.uint8)
    mask[0, 0] = 128  # 0.25% ambiguous: tolerated with a warning
    img = np.zeros((20, 20), np.uint8)
    for split in ("train", "test"):
        for stem in ("s00", "s01", "s02"):
            _write_pair(root, split, stem, img, mask)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        load_segmentation_folder(root)
    assert any(issubclass(w.category, NonBinaryMaskWarning) for w in caught)


def test_sixteen_bit_images_rejected(tmp_path):
    root = _seg_folder(tmp_path / "k")
    Image.fromarray(np.zeros((8, 8), np.uint16)).save(root / "train" / "images" / "s00.png")
    with pytest.raises(InvalidDataset):
        load_segmentation_folder(root)


# -- synthetic desk datasets --------------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ConfigInvalid):
        SyntheticSpec("blobs16", n_train=2)
    with pytest.raises(ConfigInvalid):
        SyntheticSpec("blobs16", image_size=4)
    with pytest.raises(ConfigInvalid):
        SyntheticSpec("blobs16", noise_std=0.5)
    with pytest.raises(ConfigInvalid):
        SyntheticSpec("mnist")
    assert SyntheticSpec("shapes_seg").image_size == 32
    assert SyntheticSpec("blobs16").image_size == 16


@pytest.mark.parametrize("name", ["blobs16", "shapes_seg"])
def test_synthetic_determinism_and_seed_sensitivity(name):
    a = make_synthetic(SyntheticSpec(name, 12, 6, seed=4))
    b = make_synthetic(SyntheticSpec(name, 12, 6, seed=4))
    c = make_synthetic(SyntheticSpec(name, 12, 6, seed=5))
    assert [d.checksum for d in a] == [d.checksum for d in b]
    assert a[0].checksum != c[0].checksum
    assert a[0].checksum != a[1].checksum


def test_blobs_classes_are_balanced():
    train, test = make_blobs16(SyntheticSpec("blobs16", 301, 152, seed=0))
    for ds in (train, test):
        counts = np.bincount(ds.labels, minlength=3)
        assert counts.max() - counts.min() <= 1


def test_noise_free_blobs_show_one_shape_per_class():
    train, _ = make_blobs16(SyntheticSpec("blobs16", 3, 3, seed=0, noise_std=0.0))
    assert sorted(train.labels.tolist()) == [0, 1, 2]
    for img in train.images[..., 0]:
        assert len(np.unique(img)) == 2  # background and foreground levels only


def test_linear_least_squares_oracle_on_blobs():
    """A closed-form least-squares classifier on raw pixels reaches 80% test accuracy."""
    # 1500 samples keep the 257-parameter least-squares fit well-posed
    train, test = make_blobs16(SyntheticSpec("blobs16", 1500, 300, seed=0, noise_std=0.05))

    def design(ds):
        return np.hstack([ds.images.reshape(len(ds), -1).astype(np.float64), np.ones((len(ds), 1))])

    targets = np.eye(3)[train.labels]
    w, *_ = np.linalg.lstsq(design(train), targets, rcond=None)
    acc = np.mean(np.argmax(design(test) @ w, axis=1) == test.labels)
    assert acc >= 0.80


def test_seg_mask_is_rendered_foreground():
    train, _ = make_shapes_seg(SyntheticSpec("shapes_seg", 10, 2, seed=1, noise_std=0.0))
    assert train.image_shape == (32, 32, 1)
    for img, mask in zip(train.images[..., 0], train.labels):
        fg_level = np.unique(img[mask == 1])
        assert len(fg_level) == 1  # one flat foreground level
        assert mask.sum() == np.count_nonzero(img == fg_level[0])


def test_threshold_predictor_iou_on_noise_free_seg():
    train, _ = make_shapes_seg(SyntheticSpec("shapes_seg", 10, 2, seed=0, noise_std=0.0))
    pred = (train.images[..., 0] > 0.5).astype(np.uint8)
    assert micro_iou(pred, train.labels) >= 0.5
