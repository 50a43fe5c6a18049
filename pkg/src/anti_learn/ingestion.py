"""Dataset loaders (MedMNIST archives, paired image/mask folders) and desk datasets."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import CLASSIFICATION, SEGMENTATION, ImageDataset
from .errors import (
    ConfigInvalid,
    InvalidDataset,
    MissingArrayEntry,
    MultiLabelUnsupported,
    NonBinaryMask,
    NonBinaryMaskWarning,
    UnpairedImage,
)

_ARCHIVE_KEYS = ("train_images", "train_labels", "test_images", "test_labels")
_IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm"}
# mask pixels farther than this from 0 and 255 count as ambiguous
_MASK_NEAR = 64
_MASK_AMBIGUOUS_LIMIT = 0.01


def _to_unit_float(images: np.ndarray) -> np.ndarray:
    if images.dtype == np.uint8:
        return images.astype(np.float32) / 255.0
    if np.issubdtype(images.dtype, np.floating):
        return images.astype(np.float32)
    raise InvalidDataset(f"unsupported image dtype {images.dtype}; expected uint8 or float")


def _channels_last(images: np.ndarray) -> np.ndarray:
    if images.ndim == 3:
        return images[..., None]
    if images.ndim == 4:
        return images
    raise InvalidDataset(f"cannot interpret image array of shape {images.shape}")


def load_medmnist_archive(path) -> tuple[ImageDataset, ImageDataset]:
    """Load a MedMNIST-style ``.npz`` archive into (train, test) datasets.

    Archives written by :func:`anti_learn.data.save_dataset_pair` carry extra
    ``task_kind``/``num_classes`` entries and are accepted here as well.
    """
    path = Path(path)
    with np.load(path, allow_pickle=False) as archive:
        missing = [k for k in _ARCHIVE_KEYS if k not in archive.files]
        if missing:
            raise MissingArrayEntry(f"{path.name}: archive lacks {', '.join(missing)}")
        arrays = {k: archive[k] for k in archive.files}

    task = str(arrays["task_kind"]) if "task_kind" in arrays else CLASSIFICATION
    name = str(arrays["name"]) if "name" in arrays and str(arrays["name"]) else path.stem
    splits = {}
    for split in ("train", "test"):
        images = _channels_last(_to_unit_float(arrays[f"{split}_images"]))
        labels = arrays[f"{split}_labels"]
        if task == CLASSIFICATION:
            if labels.ndim == 2 and labels.shape[1] > 1:
                raise MultiLabelUnsupported(
                    f"{path.name}: {split}_labels has {labels.shape[1]} columns (multi-label)")
            labels = labels.reshape(-1).astype(np.int64)
        splits[split] = (images, labels)

    if task == CLASSIFICATION:
        if "num_classes" in arrays:
            num_classes = int(arrays["num_classes"])
        else:
            num_classes = int(max(splits["train"][1].max(initial=0), splits["test"][1].max(initial=0))) + 1
    else:
        num_classes = 2
    return tuple(ImageDataset(x, y, task, num_classes, split, name)
                 for split, (x, y) in splits.items())


def _read_8bit(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
            raise InvalidDataset(f"{path.name}: only 8-bit images are supported (mode {img.mode})")
        if img.mode not in ("L", "RGB"):
            img = img.convert("L" if img.mode in ("1", "LA") else "RGB")
        return np.asarray(img, dtype=np.uint8)


def _binarize_mask(raw: np.ndarray, name: str) -> np.ndarray:
    if raw.ndim == 3:
        raw = raw.max(axis=2)
    ambiguous = np.mean((raw > _MASK_NEAR) & (raw < 255 - _MASK_NEAR))
    if ambiguous > _MASK_AMBIGUOUS_LIMIT:
        raise NonBinaryMask(f"{name}: {ambiguous:.1%} of mask pixels are neither near 0 nor near 255")
    if ambiguous > 0:
        warnings.warn(f"{name}: {ambiguous:.2%} ambiguous mask pixels binarized at 50%",
                      NonBinaryMaskWarning, stacklevel=3)
    return (raw >= 128).astype(np.uint8)


def _stems(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise InvalidDataset(f"missing directory {folder}")
    return {p.stem: p for p in sorted(folder.iterdir())
            if p.is_file() and p.suffix.lower() in _IMAGE_SUFFIXES}


def load_segmentation_folder(path) -> tuple[ImageDataset, ImageDataset]:
    """Load ``{split}/images/*`` and ``{split}/masks/*`` pairs matched by file stem."""
    root = Path(path)
    out = []
    for split in ("train", "test"):
        images = _stems(root / split / "images")
        masks = _stems(root / split / "masks")
        unpaired = sorted(set(images) ^ set(masks))
        if unpaired:
            raise UnpairedImage(f"{split}: no partner for {', '.join(unpaired[:5])}")
        xs, ys = [], []
        for stem in sorted(images):
            x = _read_8bit(images[stem])
            y = _binarize_mask(_read_8bit(masks[stem]), masks[stem].name)
            if y.shape != x.shape[:2]:
                raise InvalidDataset(f"{stem}: mask {y.shape} vs image {x.shape[:2]}")
            xs.append(x if x.ndim == 3 else x[..., None])
            ys.append(y)
        if len({x.shape for x in xs}) > 1:
            raise InvalidDataset(f"{split}: images differ in size; resize before loading")
        if xs:
            x_arr = np.stack(xs).astype(np.float32) / 255.0
            y_arr = np.stack(ys)
        else:
            x_arr = np.zeros((0, 1, 1, 1), np.float32)
            y_arr = np.zeros((0, 1, 1), np.uint8)
        out.append(ImageDataset(x_arr, y_arr, SEGMENTATION, 2, split, root.name))
    return tuple(out)


@dataclass(frozen=True)
class SyntheticSpec:
    name: str = "blobs16"
    n_train: int = 300
    n_test: int = 150
    seed: int = 0
    image_size: int | None = None
    noise_std: float = 0.03

    def __post_init__(self):
        if self.name not in ("blobs16", "shapes_seg"):
            raise ConfigInvalid(f"unknown synthetic dataset {self.name!r}")
        if self.image_size is None:
            object.__setattr__(self, "image_size", 16 if self.name == "blobs16" else 32)
        classes = 3 if self.name == "blobs16" else 2
        if self.n_train < classes or self.n_test < classes:
            raise ConfigInvalid(f"n_train and n_test must be at least {classes}")
        if self.image_size < 8:
            raise ConfigInvalid("image_size must be at least 8")
        if not 0.0 <= self.noise_std <= 0.2:
            raise ConfigInvalid("noise_std must lie in [0, 0.2]")


# background level range and foreground contrast range for blobs16
BLOBS_BACKGROUND = (0.3, 0.5)
BLOBS_CONTRAST = (0.08, 0.15)
BLOBS_JITTER = (0.4, 0.6)


def _split_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(train_ss), np.random.default_rng(test_ss)


def _blob_shape(cls: int, size: int, cy: float, cx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    scale = size / 16.0
    if cls == 0:  # filled disc
        return dy ** 2 + dx ** 2 <= (3.6 * scale) ** 2
    if cls == 1:  # cross
        arm, half = 4.6 * scale, 1.0 * scale
        return ((np.abs(dx) <= half) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= half) & (np.abs(dx) <= arm))
    cheb = np.maximum(np.abs(dx), np.abs(dy))  # hollow square
    return (cheb >= 2.6 * scale) & (cheb <= 4.1 * scale)


def _render_blobs(rng: np.random.Generator, n: int, size: int, noise_std: float):
    labels = rng.permutation(np.arange(n) % 3)
    lo, hi = BLOBS_JITTER[0] * size, BLOBS_JITTER[1] * size
    images = np.empty((n, size, size, 1), np.float32)
    for i, cls in enumerate(labels):
        cy, cx = rng.uniform(lo, hi, size=2)
        mask = _blob_shape(int(cls), size, cy, cx)
        bg = rng.uniform(*BLOBS_BACKGROUND)
        img = np.where(mask, bg + rng.uniform(*BLOBS_CONTRAST), bg)
        if noise_std > 0:
            img = img + rng.normal(0.0, noise_std, size=img.shape)
        images[i, ..., 0] = np.clip(img, 0.0, 1.0)
    return images, labels


def make_blobs16(spec: SyntheticSpec) -> tuple[ImageDataset, ImageDataset]:
    """Three-class shapes dataset: filled disc, cross, hollow square."""
    if spec.name != "blobs16":
        raise ConfigInvalid(f"make_blobs16 got spec for {spec.name!r}")
    out = []
    for split, rng, n in zip(("train", "test"), _split_rngs(spec.seed), (spec.n_train, spec.n_test)):
        x, y = _render_blobs(rng, n, spec.image_size, spec.noise_std)
        out.append(ImageDataset(x, y, CLASSIFICATION, 3, split, "blobs16"))
    return tuple(out)


# Background texture mean/amplitude and foreground level range for shapes_seg.
# The foreground is only slightly brighter than the background (a low-contrast
# lesion), so a 0.5 threshold still isolates it on noise-free images while the
# contrast stays comparable to the perturbation radii under study.
SEG_BACKGROUND = (0.46, 0.03)
SEG_FOREGROUND = (0.5, 0.53)


def _render_seg(rng: np.random.Generator, n: int, size: int, noise_std: float):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, size, size, 1), np.float32)
    masks = np.empty((n, size, size), np.uint8)
    for i in range(n):
        # low-frequency texture kept below 0.5 so the foreground stays the bright part
        fy, fx = rng.uniform(0.15, 0.6, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        background = SEG_BACKGROUND[0] + SEG_BACKGROUND[1] * np.sin(fy * yy + py) * np.sin(fx * xx + px)
        cy, cx = rng.uniform(0.3 * size, 0.7 * size, size=2)
        if rng.random() < 0.5:
            ay, ax = rng.uniform(0.12 * size, 0.3 * size, size=2)
            theta = rng.uniform(0, np.pi)
            c, s = np.cos(theta), np.sin(theta)
            u = (xx - cx) * c + (yy - cy) * s
            v = -(xx - cx) * s + (yy - cy) * c
            fg = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        else:
            hy, hx = rng.uniform(0.1 * size, 0.25 * size, size=2)
            fg = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        level = rng.uniform(*SEG_FOREGROUND)
        img = np.where(fg, level, background)
        if noise_std > 0:
            img = img + rng.normal(0.0, noise_std, size=img.shape)
        images[i, ..., 0] = np.clip(img, 0.0, 1.0)
        masks[i] = fg
    return images, masks


def make_shapes_seg(spec: SyntheticSpec) -> tuple[ImageDataset, ImageDataset]:
    """One bright ellipse or rectangle per image on a textured background."""
    if spec.name != "shapes_seg":
        raise ConfigInvalid(f"make_shapes_seg got spec for {spec.name!r}")
    out = []
    for split, rng, n in zip(("train", "test"), _split_rngs(spec.seed), (spec.n_train, spec.n_test)):
        x, y = _render_seg(rng, n, spec.image_size, spec.noise_std)
        out.append(ImageDataset(x, y, SEGMENTATION, 2, split, "shapes_seg"))
    return tuple(out)


def make_synthetic(spec: SyntheticSpec) -> tuple[ImageDataset, ImageDataset]:
    return make_blobs16(spec) if spec.name == "blobs16" else make_shapes_seg(spec)
