"""Accuracy / IoU metrics and clean-vs-poisoned report tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields

import numpy as np
import torch

from .data import CLASSIFICATION, SEGMENTATION, ImageDataset
from .errors import MismatchedRuns, TaskMismatch
from .predictor import Predictor, to_nchw

EVAL_BATCH = 256


def predict(p: Predictor, images: np.ndarray, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Argmax predictions in evaluation mode; ties resolve to the lowest class index."""
    p.net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = p.logits_t(to_nchw(images[start:start + batch_size])).numpy()
            out.append(np.argmax(logits, axis=1))  # numpy argmax returns the first maximum
    if not out:
        return np.zeros((0,), np.int64)
    return np.concatenate(out)


def accuracy(p: Predictor, ds: ImageDataset) -> float:
    if ds.task_kind != CLASSIFICATION or p.task_kind != CLASSIFICATION:
        raise TaskMismatch("accuracy needs a classification dataset and predictor")
    if len(ds) == 0:
        return 0.0
    return float(np.mean(predict(p, ds.images) == ds.labels))


def pixel_accuracy(p: Predictor, ds: ImageDataset) -> float:
    if ds.task_kind != SEGMENTATION:
        raise TaskMismatch("pixel_accuracy needs a segmentation dataset")
    return float(np.mean(predict(p, ds.images) == ds.labels))


def _inter_union(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise TaskMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a & b)), int(np.count_nonzero(a | b))


def iou_masks(a, b) -> float:
    """IoU of two binary masks. Two empty masks score 1.0 (nothing to disagree on)."""
    inter, union = _inter_union(a, b)
    return 1.0 if union == 0 else inter / union


def micro_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Sum of intersections over sum of unions; both-empty images add nothing."""
    inter = union = 0
    for a, b in zip(pred, truth):
        i, u = _inter_union(a, b)
        inter += i
        union += u
    return 1.0 if union == 0 else inter / union


def macro_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Per-image IoU averaged over images with a non-empty union."""
    scores = []
    for a, b in zip(pred, truth):
        i, u = _inter_union(a, b)
        if u:
            scores.append(i / u)
    return float(np.mean(scores)) if scores else 1.0


def iou(p: Predictor, ds: ImageDataset) -> float:
    if ds.task_kind != SEGMENTATION or p.task_kind != SEGMENTATION:
        raise TaskMismatch("iou needs a segmentation dataset and predictor")
    return micro_iou(predict(p, ds.images), ds.labels)


def metric(p: Predictor, ds: ImageDataset) -> float:
    return accuracy(p, ds) if ds.task_kind == CLASSIFICATION else iou(p, ds)


@dataclass
class EvalReport:
    dataset: str
    task: str
    method: str
    eps_num: int
    eps_den: int
    regime: str
    eps_a_num: int
    eps_a_den: int
    clean: float
    poisoned: float
    drop: float
    seed: int
    runtime_s: float | None = None
    metric: str = "accuracy"
    clean_macro: float | None = None
    poisoned_macro: float | None = None

    def __post_init__(self):
        for name in ("clean", "poisoned"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} metric {v} outside [0, 1]")
        if abs(self.drop - (self.clean - self.poisoned)) > 1e-9:
            raise ValueError("drop must equal clean - poisoned")

    @property
    def eps_label(self) -> str:
        return f"{self.eps_num}/{self.eps_den}"

    @property
    def regime_label(self) -> str:
        if self.regime == "std":
            return "std"
        return f"adv@{self.eps_a_num}/{self.eps_a_den}"


CSV_COLUMNS = [f.name for f in fields(EvalReport)]


def build_report(dataset: str, task: str, method: str, eps, regime: str, eps_a,
                 clean: float, poisoned: float, seed: int, clean_seed: int | None = None,
                 runtime_s: float | None = None, clean_dataset: str | None = None,
                 clean_macro: float | None = None, poisoned_macro: float | None = None) -> EvalReport:
    """Assemble one table cell. ``eps``/``eps_a`` are ``(num, den)`` pairs.

    ``clean_seed``/``clean_dataset`` describe the clean baseline run and must
    agree with the poisoned run.
    """
    if clean_dataset is not None and clean_dataset != dataset:
        raise MismatchedRuns(f"clean run on {clean_dataset!r}, poisoned run on {dataset!r}")
    if clean_seed is not None and clean_seed != seed:
        raise MismatchedRuns(f"clean run seed {clean_seed} != poisoned run seed {seed}")
    if regime not in ("std", "adv"):
        raise ValueError(f"unknown regime {regime!r}")
    kind = "accuracy" if task == CLASSIFICATION else "iou"
    return EvalReport(dataset, task, method, int(eps[0]), int(eps[1]), regime,
                      int(eps_a[0]), int(eps_a[1]), clean, poisoned, clean - poisoned, seed,
                      runtime_s, kind, clean_macro, poisoned_macro)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def reports_to_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


_INT_COLUMNS = {"eps_num", "eps_den", "eps_a_num", "eps_a_den", "seed"}
_FLOAT_COLUMNS = {"clean", "poisoned", "drop"}
_OPTIONAL_FLOAT = {"runtime_s", "clean_macro", "poisoned_macro"}


def reports_from_csv(text: str) -> list[EvalReport]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        kw = {}
        for key, value in row.items():
            if key in _INT_COLUMNS:
                kw[key] = int(value)
            elif key in _FLOAT_COLUMNS:
                kw[key] = float(value)
            elif key in _OPTIONAL_FLOAT:
                kw[key] = float(value) if value else None
            else:
                kw[key] = value
        out.append(EvalReport(**kw))
    return out


def _pct(v: float) -> str:
    return f"{100 * v:.1f}"


def render_table(reports: list[EvalReport]) -> tuple[str, str]:
    """Render a Table-1-style text grid and its CSV twin.

    One row per (dataset, training regime); one column per ``method@eps``.
    Cells read ``poisoned(↓drop)`` in percent.
    """
    columns: list[str] = []
    rows: dict[tuple[str, str], dict] = {}
    for r in reports:
        key = (r.dataset, r.regime_label)
        row = rows.setdefault(key, {"clean": r.clean, "cells": {}})
        if r.method == "none":
            row["clean"] = r.clean
            continue
        col = f"{r.method}@{r.eps_label}"
        if col not in columns:
            columns.append(col)
        row["cells"][col] = f"{_pct(r.poisoned)}(↓{_pct(r.drop)})"

    header = ["dataset", "regime", "clean"] + columns
    body = []
    for (dataset, regime), row in rows.items():
        body.append([dataset, regime, _pct(row["clean"])] + [row["cells"].get(c, "-") for c in columns])
    widths = [max(len(str(line[i])) for line in [header] + body) for i in range(len(header))]
    lines = [" | ".join(str(v).ljust(w) for v, w in zip(line, widths)).rstrip() for line in [header] + body]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n", reports_to_csv(reports)
