import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anti_learn.data import CLASSIFICATION, SEGMENTATION, ImageDataset
from anti_learn.errors import MismatchedRuns, TaskMismatch
from anti_learn.evaluation import (
    CSV_COLUMNS,
    EvalReport,
    accuracy,
    build_report,
    iou,
    iou_masks,
    macro_iou,
    micro_iou,
    render_table,
    reports_from_csv,
    reports_to_csv,
)
from anti_learn.predictor import Predictor


class PixelReadout(torch.nn.Module):
    """Classifier whose logits are the first ``classes`` pixels of the image."""

    def __init__(self, classes):
        super().__init__()
        self.classes = classes

    def forward(self, x):
        return x.flatten(1)[:, : self.classes]


class ThresholdSeg(torch.nn.Module):
    """Segmenter predicting foreground where the pixel exceeds 0.5."""

    def forward(self, x):
        return torch.cat([torch.full_like(x[:, :1], 0.5), x[:, :1]], dim=1)


def _cls_ds(images, labels, classes=3):
    return ImageDataset(np.asarray(images, np.float32), np.asarray(labels), CLASSIFICATION, classes)


def _readout(classes=3):
    return Predictor("small_cnn", (1, 4, 1), classes, 0, PixelReadout(classes))


def test_accuracy_examples():
    images = np.zeros((2, 1, 4, 1), np.float32)
    images[0, 0, 1] = 1.0  # predicts class 1
    images[1, 0, 2] = 1.0  # predicts class 2
    p = _readout()
    assert accuracy(p, _cls_ds(images, [1, 2])) == 1.0
    assert accuracy(p, _cls_ds(images, [1, 0])) == 0.5


def test_ties_go_to_lowest_class():
    images = np.zeros((1, 1, 4, 1), np.float32)
    images[0, 0, 1:3] = 1.0  # classes 1 and 2 tie
    assert accuracy(_readout(), _cls_ds(images, [1])) == 1.0


def test_task_mismatch():
    seg = ImageDataset(np.zeros((1, 4, 4, 1), np.float32), np.zeros((1, 4, 4)), SEGMENTATION)
    with pytest.raises(TaskMismatch):
        accuracy(_readout(), seg)
    with pytest.raises(TaskMismatch):
        iou(_readout(), _cls_ds(np.zeros((1, 1, 4, 1)), [0]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_accuracy_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    ds = _cls_ds(rng.random((7, 1, 4, 1)), rng.integers(0, 3, 7))
    perm = ds.subset(rng.permutation(7))
    assert accuracy(_readout(), ds) == accuracy(_readout(), perm)


def test_iou_examples():
    a = np.zeros((2, 2), np.uint8)
    a[0, 0] = a[0, 1] = 1
    b = np.zeros((2, 2), np.uint8)
    b[0, 1] = b[1, 1] = 1
    assert iou_masks(a, a) == 1.0
    assert iou_masks(a, 1 - a) == 0.0
    assert iou_masks(a, b) == pytest.approx(1 / 3)
    assert iou_masks(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_micro_iou_skips_empty_pairs():
    a = np.zeros((2, 2), np.uint8)
    a[0, 0] = a[0, 1] = 1
    b = np.zeros((2, 2), np.uint8)
    b[0, 1] = b[1, 1] = 1
    empty = np.zeros((2, 2), np.uint8)
    assert micro_iou(np.stack([a, empty]), np.stack([b, empty])) == pytest.approx(1 / 3)
    # micro sums differ from the per-image mean
    c = np.ones((2, 2), np.uint8)
    assert micro_iou(np.stack([a, c]), np.stack([b, c])) == pytest.approx(5 / 7)
    assert macro_iou(np.stack([a, c]), np.stack([b, c])) == pytest.approx((1 / 3 + 1) / 2)


@settings(max_examples=100, deadline=None)
@given(arrays(np.uint8, (3, 4, 4), elements=st.integers(0, 1)),
       arrays(np.uint8, (3, 4, 4), elements=st.integers(0, 1)))
def test_iou_is_symmetric_and_bounded(a, b):
    assert iou_masks(a, b) == iou_masks(b, a)
    assert micro_iou(a, b) == micro_iou(b, a)
    assert 0.0 <= micro_iou(a, b) <= 1.0


def test_dataset_iou_through_predictor():
    x = np.zeros((2, 4, 4, 1), np.float32)
    x[0, :2, :2] = 0.9
    x[1, 1:3, 1:3] = 0.9
    masks = (x[..., 0] > 0.5).astype(np.uint8)
    ds = ImageDataset(x, masks, SEGMENTATION)
    p = Predictor("small_unet", (4, 4, 1), 2, 0, ThresholdSeg())
    assert iou(p, ds) == 1.0
    shifted = ImageDataset(x, np.roll(masks, 1, axis=2), SEGMENTATION)
    assert iou(p, shifted) == pytest.approx(4 / 12)
    assert iou(p, shifted.subset([1, 0])) == iou(p, shifted)


# -- reports -----------------------------------------------------------------------------


def test_drop_arithmetic():
    r = build_report("pathmnist", CLASSIFICATION, "em", (8, 255), "std", (0, 255), 0.878, 0.135, seed=0)
    assert r.drop == pytest.approx(0.743, abs=1e-9)
    r = build_report("kvasir", SEGMENTATION, "em", (8, 255), "std", (0, 255), 0.798, 0.0, seed=0)
    assert r.drop == pytest.approx(0.798, abs=1e-12)
    assert r.metric == "iou"
    r = build_report("blobs16", CLASSIFICATION, "em", (8, 255), "std", (0, 255), 0.5, 0.5, seed=0)
    assert r.drop == 0.0


def test_report_invariants():
    with pytest.raises(ValueError):
        EvalReport("d", CLASSIFICATION, "em", 8, 255, "std", 0, 255, 0.9, 0.2, 0.5, 0)
    with pytest.raises(ValueError):
        EvalReport("d", CLASSIFICATION, "em", 8, 255, "std", 0, 255, 1.2, 0.2, 1.0, 0)


def test_mismatched_runs():
    with pytest.raises(MismatchedRuns):
        build_report("a", CLASSIFICATION, "em", (8, 255), "std", (0, 255), 0.9, 0.1, seed=0,
                     clean_dataset="b")
    with pytest.raises(MismatchedRuns):
        build_report("a", CLASSIFICATION, "em", (8, 255), "std", (0, 255), 0.9, 0.1, seed=0, clean_seed=1)


def test_table_layout():
    reports = [
        build_report("pathmnist", CLASSIFICATION, "none", (0, 255), "std", (0, 255), 0.878, 0.878, 0),
        build_report("pathmnist", CLASSIFICATION, "em", (8, 255), "std", (0, 255), 0.878, 0.135, 0),
        build_report("pathmnist", CLASSIFICATION, "em", (8, 255), "adv", (4, 255), 0.80, 0.30, 0),
    ]
    text, csv_text = render_table(reports)
    rows = [[cell.strip() for cell in line.split(" | ")] for line in text.splitlines()]
    assert rows[0] == ["dataset", "regime", "clean", "em@8/255"]
    assert rows[2] == ["pathmnist", "std", "87.8", "13.5(↓74.3)"]
    assert rows[3] == ["pathmnist", "adv@4/255", "80.0", "30.0(↓50.0)"]
    assert csv_text.splitlines()[0].split(",")[:13] == [
        "dataset", "task", "method", "eps_num", "eps_den", "regime", "eps_a_num", "eps_a_den",
        "clean", "poisoned", "drop", "seed", "runtime_s"]
    assert CSV_COLUMNS[:13] == csv_text.splitlines()[0].split(",")[:13]


_unit = st.floats(0, 1, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(_unit, _unit, st.integers(0, 255), st.booleans(),
                          st.one_of(st.none(), st.floats(0, 1e4, allow_nan=False))),
                min_size=1, max_size=5))
def test_csv_round_trip(rows):
    reports = [
        build_report("blobs16", CLASSIFICATION, "em", (num, 255), "adv" if adv else "std",
                     (num // 2, 255) if adv else (0, 255), clean, poisoned, seed=3, runtime_s=rt)
        for clean, poisoned, num, adv, rt in rows
    ]
    back = reports_from_csv(reports_to_csv(reports))
    assert back == reports
