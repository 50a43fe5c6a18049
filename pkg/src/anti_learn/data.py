"""Datasets, perturbation budgets and perturbation artifacts.

Images are float32 arrays shaped ``N x H x W x C`` with values in [0, 1].
Labels are class indices (classification) or binary ``N x H x W`` masks
(segmentation).
"""

from __future__ import annotations

import hashlib
import json
import struct
import zipfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumMismatch,
    ConfigInvalid,
    CorruptArtifact,
    InvalidDataset,
    MetadataMissing,
    ShapeMismatch,
    UnsupportedNorm,
)

CLASSIFICATION = "classification"
SEGMENTATION = "segmentation"
TASK_KINDS = (CLASSIFICATION, SEGMENTATION)
SPLITS = ("train", "test")
SAMPLE_WISE = "sample_wise"
CLASS_WISE = "class_wise"
SCOPES = (SAMPLE_WISE, CLASS_WISE)
METHODS = ("synthetic", "advt", "em")
NORMS = ("inf",)

BUDGET_TOL = 1e-6
TENSOR_MAGIC = b"ANTILEARN\0DELTA1"
FORMAT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass(eq=False)
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray
    task_kind: str = CLASSIFICATION
    num_classes: int = 2
    split: str = "train"
    name: str = ""
    checksum: str = ""

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise InvalidDataset(f"unknown task kind {self.task_kind!r}")
        if self.split not in SPLITS:
            raise InvalidDataset(f"unknown split {self.split!r}")
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        label_dtype = np.int64 if self.task_kind == CLASSIFICATION else np.uint8
        self.labels = np.ascontiguousarray(self.labels, dtype=label_dtype)
        if self.task_kind == SEGMENTATION:
            self.num_classes = 2
        self.validate(check_digest=False)
        digest = checksum_dataset(self)
        if self.checksum and self.checksum != digest:
            raise ChecksumMismatch(f"stored checksum {self.checksum[:12]} != content {digest[:12]}")
        self.checksum = digest

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def validate(self, check_digest: bool = True) -> None:
        """Raise ``InvalidDataset`` unless every dataset invariant holds."""
        x, y = self.images, self.labels
        if x.ndim != 4:
            raise InvalidDataset(f"images must be N x H x W x C, got shape {x.shape}")
        if y.shape[0] != x.shape[0]:
            raise InvalidDataset(f"{x.shape[0]} images but {y.shape[0]} labels")
        if x.size and (not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0):
            raise InvalidDataset("pixel values must lie in [0, 1]")
        if self.num_classes < 1:
            raise InvalidDataset("num_classes must be positive")
        if self.task_kind == CLASSIFICATION:
            if y.ndim != 1:
                raise InvalidDataset(f"classification labels must be 1-D, got {y.shape}")
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise InvalidDataset(f"labels must lie in [0, {self.num_classes})")
        else:
            if y.shape != x.shape[:3]:
                raise InvalidDataset(f"mask shape {y.shape} does not match images {x.shape[:3]}")
            if y.size and y.max() > 1:
                raise InvalidDataset("segmentation masks must be binary")
        if check_digest and checksum_dataset(self) != self.checksum:
            raise ChecksumMismatch("checksum does not match dataset content")

    def subset(self, indices) -> "ImageDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageDataset(self.images[idx], self.labels[idx], self.task_kind,
                            self.num_classes, self.split, self.name)

    def with_images(self, images: np.ndarray) -> "ImageDataset":
        return ImageDataset(images, self.labels, self.task_kind, self.num_classes,
                            self.split, self.name)


def _shape_header(arr: np.ndarray) -> bytes:
    return struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)


def checksum_dataset(ds: ImageDataset) -> str:
    """SHA-256 over shape headers, then little-endian image bytes, then label bytes."""
    h = hashlib.sha256()
    h.update(_shape_header(ds.images))
    h.update(_shape_header(ds.labels))
    h.update(ds.images.astype("<f4", copy=False).tobytes(order="C"))
    label_dtype = "<i8" if ds.task_kind == CLASSIFICATION else "u1"
    h.update(ds.labels.astype(label_dtype, copy=False).tobytes(order="C"))
    return h.hexdigest()


@dataclass(frozen=True)
class PerturbBudget:
    eps_numerator: int
    eps_denominator: int = 255
    norm_order: str = "inf"
    scope: str = SAMPLE_WISE

    def __post_init__(self):
        if self.eps_denominator <= 0:
            raise ConfigInvalid("eps denominator must be positive")
        if self.eps_numerator < 0 or self.eps_numerator > self.eps_denominator:
            raise ConfigInvalid(f"eps {self.eps_numerator}/{self.eps_denominator} outside [0, 1]")
        if self.scope not in SCOPES:
            raise ConfigInvalid(f"unknown scope {self.scope!r}")

    @property
    def eps(self) -> float:
        return self.eps_numerator / self.eps_denominator

    @property
    def label(self) -> str:
        return f"{self.eps_numerator}/{self.eps_denominator}"

    @classmethod
    def parse(cls, text: str, scope: str = SAMPLE_WISE) -> "PerturbBudget":
        """Parse ``"16/255"`` (or a bare numerator, read as ``n/255``)."""
        try:
            if "/" in text:
                num, den = text.split("/", 1)
                return cls(int(num), int(den), scope=scope)
            return cls(int(text), 255, scope=scope)
        except ValueError as exc:
            raise ConfigInvalid(f"cannot parse eps {text!r}: {exc}") from None

    def scaled(self, factor) -> "PerturbBudget":
        """Exact rational rescaling, e.g. ``scaled(Fraction(1, 2))`` for eps/2."""
        frac = Fraction(self.eps_numerator, self.eps_denominator) * Fraction(factor)
        den = self.eps_denominator
        if (frac * den).denominator != 1:
            den = frac.denominator
        return PerturbBudget(int(frac * den), den, self.norm_order, self.scope)

    def with_scope(self, scope: str) -> "PerturbBudget":
        return PerturbBudget(self.eps_numerator, self.eps_denominator, self.norm_order, scope)


@dataclass(eq=False)
class PerturbationSet:
    deltas: np.ndarray
    budget: PerturbBudget
    method: str
    seed: int
    dataset_checksum: str
    generator_config_digest: str
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.deltas = np.ascontiguousarray(self.deltas, dtype=np.float32)
        if self.method not in METHODS:
            raise ConfigInvalid(f"unknown method {self.method!r}")

    def metadata(self) -> dict:
        return {
            "method": self.method,
            "scope": self.budget.scope,
            "norm": self.budget.norm_order,
            "eps_numerator": self.budget.eps_numerator,
            "eps_denominator": self.budget.eps_denominator,
            "seed": int(self.seed),
            "dataset_checksum": self.dataset_checksum,
            "generator_config_digest": self.generator_config_digest,
            "shape": list(self.deltas.shape),
            "format_version": FORMAT_VERSION,
            "extra": self.extra,
        }

    def digest(self) -> str:
        """Content digest: framed delta bytes plus canonical metadata."""
        h = hashlib.sha256(encode_tensor(self.deltas))
        h.update(json.dumps(self.metadata(), sort_keys=True).encode("utf-8"))
        return h.hexdigest()


def config_digest(config: dict) -> str:
    payload = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def apply_perturbation(ds: ImageDataset, pset: PerturbationSet) -> ImageDataset:
    """Return ``clamp(x_i + delta_i, 0, 1)`` with labels untouched."""
    if pset.dataset_checksum != ds.checksum:
        raise ChecksumMismatch(
            f"perturbation was generated for dataset {pset.dataset_checksum[:12]}, "
            f"not {ds.checksum[:12]}")
    if pset.budget.scope == CLASS_WISE:
        if ds.task_kind != CLASSIFICATION:
            raise ShapeMismatch("class-wise perturbations need a classification dataset")
        expected = (ds.num_classes,) + ds.image_shape
        if pset.deltas.shape != expected:
            raise ShapeMismatch(f"class-wise deltas {pset.deltas.shape}, expected {expected}")
        deltas = pset.deltas[ds.labels]
    else:
        if pset.deltas.shape != ds.images.shape:
            raise ShapeMismatch(f"deltas {pset.deltas.shape} vs images {ds.images.shape}")
        deltas = pset.deltas
    poisoned = np.clip(ds.images + deltas, 0.0, 1.0).astype(np.float32)
    return ds.with_images(poisoned)


def quantize_uint8(images: np.ndarray) -> np.ndarray:
    """Round-to-nearest 8-bit quantization (lossy, at most 0.5/255 per pixel)."""
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


@dataclass
class BudgetReport:
    ok: bool
    eps: float
    max_abs: float
    max_violation: float
    offending: list[int]


def validate_budget(pset: PerturbationSet) -> BudgetReport:
    if pset.budget.norm_order not in NORMS:
        raise UnsupportedNorm(f"norm {pset.budget.norm_order!r} is not implemented")
    eps = pset.budget.eps
    d = pset.deltas
    if d.size == 0:
        return BudgetReport(True, eps, 0.0, 0.0, [])
    per_item = np.abs(d.astype(np.float64)).reshape(d.shape[0], -1).max(axis=1)
    max_abs = float(per_item.max())
    offending = np.flatnonzero(per_item > eps + BUDGET_TOL).tolist()
    return BudgetReport(not offending, eps, max_abs, max(0.0, max_abs - eps), offending)


def encode_tensor(arr: np.ndarray) -> bytes:
    """Frame a tensor of rank <= 4 as magic + 4 x u32 dims + float32 LE payload."""
    arr = np.asarray(arr)
    if arr.ndim > 4:
        raise ShapeMismatch(f"tensor rank {arr.ndim} exceeds 4")
    dims = (1,) * (4 - arr.ndim) + tuple(arr.shape)
    return (TENSOR_MAGIC + struct.pack("<4I", *dims)
            + np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C"))


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 32 or blob[:16] != TENSOR_MAGIC:
        raise CorruptArtifact("bad tensor magic or truncated header")
    dims = struct.unpack("<4I", blob[16:32])
    expected = 32 + 4 * int(np.prod(dims, dtype=np.int64))
    if len(blob) != expected:
        raise CorruptArtifact(f"tensor payload has {len(blob)} bytes, expected {expected}")
    return np.frombuffer(blob, dtype="<f4", offset=32).reshape(dims).astype(np.float32)


def write_zip(path, entries: dict[str, bytes]) -> None:
    """Write a byte-reproducible zip (fixed timestamps, stored entries)."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, entries[name])


def read_zip(path) -> dict[str, bytes]:
    try:
        with zipfile.ZipFile(path) as zf:
            return {name: zf.read(name) for name in zf.namelist()}
    except (zipfile.BadZipFile, EOFError, OSError) as exc:
        raise CorruptArtifact(f"{path}: not a readable artifact ({exc})") from None


_REQUIRED_META = ("method", "scope", "norm", "eps_numerator", "eps_denominator", "seed",
                  "dataset_checksum", "generator_config_digest", "shape", "format_version")


def save_perturbation(pset: PerturbationSet, path) -> None:
    meta = json.dumps(pset.metadata(), sort_keys=True, indent=2).encode("utf-8")
    write_zip(path, {"metadata.json": meta, "deltas.bin": encode_tensor(pset.deltas)})


def load_perturbation(path) -> PerturbationSet:
    entries = read_zip(path)
    if "metadata.json" not in entries:
        raise MetadataMissing(f"{path}: metadata.json missing")
    if "deltas.bin" not in entries:
        raise CorruptArtifact(f"{path}: deltas.bin missing")
    try:
        meta = json.loads(entries["metadata.json"].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArtifact(f"{path}: metadata.json unreadable ({exc})") from None
    missing = [k for k in _REQUIRED_META if k not in meta]
    if missing:
        raise MetadataMissing(f"{path}: metadata lacks {', '.join(missing)}")
    if meta["format_version"] != FORMAT_VERSION:
        raise CorruptArtifact(f"unsupported format_version {meta['format_version']}")
    deltas = decode_tensor(entries["deltas.bin"])
    shape = tuple(meta["shape"])
    if int(np.prod(shape)) != deltas.size:
        raise CorruptArtifact(f"metadata shape {shape} disagrees with payload {deltas.shape}")
    budget = PerturbBudget(meta["eps_numerator"], meta["eps_denominator"], meta["norm"], meta["scope"])
    return PerturbationSet(deltas.reshape(shape), budget, meta["method"], meta["seed"],
                           meta["dataset_checksum"], meta["generator_config_digest"],
                           meta.get("extra", {}))


def save_dataset_pair(train: ImageDataset, test: ImageDataset, path, quantize: bool = False) -> None:
    """Write a train/test pair using MedMNIST array names plus task metadata.

    With ``quantize`` the images are stored as uint8 (lossy); otherwise float32.
    """
    def pack(x):
        return quantize_uint8(x) if quantize else x

    with open(path, "wb") as fh:
        np.savez_compressed(
            fh,
            train_images=pack(train.images), train_labels=train.labels,
            test_images=pack(test.images), test_labels=test.labels,
            task_kind=np.array(train.task_kind), num_classes=np.array(train.num_classes),
            name=np.array(train.name),
        )


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
