"""Dataset ingestion: class-labeled image folders, grayscale decoding,
stratified train/test splits and per-image feature sampling.

Expected layout is one subdirectory per class under the dataset root:
``<root>/<class_name>/<image file>``. Classes are ordered lexicographically
and entries within a class by filename, so a manifest is a pure function of
the directory tree.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .descriptors import DescriptorSet
from .errors import DatasetError, DecodeError, ParameterError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".ppm", ".pgm", ".pbm", ".bmp", ".tif", ".tiff"}

# ITU-R BT.601 luminance weights.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class GrayImage:
    """2-D intensity raster with values in [0, 1], row-major float32."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ParameterError("GrayImage requires a 2-D array")
        lo, hi = float(self.pixels.min(initial=0.0)), float(self.pixels.max(initial=0.0))
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise ParameterError(f"intensities outside [0,1]: min={lo:.4g} max={hi:.4g}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class DatasetManifest:
    """Ordered class list plus (relative path, class index) entries."""

    classes: list[str]
    entries: list[tuple[str, int]]
    root: str = ""

    def class_counts(self) -> list[int]:
        counts = [0] * len(self.classes)
        for _, ci in self.entries:
            counts[ci] += 1
        return counts

    def entry_path(self, index: int) -> Path:
        return Path(self.root) / self.entries[index][0]


@dataclass
class SplitPlan:
    """Deterministic stratified split, stored as manifest entry indices."""

    seed: int
    train_fraction: float
    train: list[int]
    test: list[int]


def scan_dataset(root: str | Path) -> DatasetManifest:
    """Build a manifest from ``<root>/<class>/<image>`` directories.

    Classes come out in lexicographic order, entries sorted by filename
    within each class. Files that cannot be opened as images are skipped
    with a warning; class directories left with no readable images are
    excluded (also with a warning).
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    classes: list[str] = []
    entries: list[tuple[str, int]] = []
    for class_dir in class_dirs:
        files = sorted(p for p in class_dir.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        readable = []
        for path in files:
            try:
                with Image.open(path):
                    pass
            except Exception:
                logger.warning("skipping unreadable image %s", path)
                continue
            readable.append(path)
        if not readable:
            logger.warning("class directory %s has no readable images; excluded", class_dir)
            continue
        class_index = len(classes)
        classes.append(class_dir.name)
        entries.extend((str(p.relative_to(root)), class_index) for p in readable)
    if not classes:
        raise DatasetError(f"no classes found under {root}")
    return DatasetManifest(classes=classes, entries=entries, root=str(root))


def load_image(path: str | Path) -> GrayImage:
    """Decode an image file to grayscale intensities in [0, 1].

    Color inputs are reduced with BT.601 weights (0.299 R + 0.587 G +
    0.114 B) computed in float, so a pure-red image maps to exactly 0.299.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("1", "L", "I;16", "I"):
                arr = np.asarray(im)
                if arr.dtype == np.uint8:
                    pixels = arr / 255.0
                elif arr.dtype == np.uint16:
                    pixels = arr / 65535.0
                elif arr.dtype == bool:
                    pixels = arr.astype(np.float64)
                else:  # 32-bit integer grayscale
                    arr = arr.astype(np.float64)
                    pixels = arr / max(arr.max(), 1.0)
            else:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
                pixels = rgb @ LUMA_WEIGHTS
    except DecodeError:
        raise
    except Exception as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return GrayImage(np.clip(pixels, 0.0, 1.0))


def make_split(manifest: DatasetManifest, train_fraction: float, seed: int) -> SplitPlan:
    """Per-class stratified random split; round-half-up on the train side."""
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(f"train_fraction must be in (0,1), got {train_fraction}")
    by_class: dict[int, list[int]] = {}
    for idx, (_, ci) in enumerate(manifest.entries):
        by_class.setdefault(ci, []).append(idx)
    rng = np.random.default_rng(seed)
    train: list[int] = []
    test: list[int] = []
    for ci in sorted(by_class):
        members = np.array(by_class[ci])
        if len(members) < 2:
            raise DatasetError(
                f"class {manifest.classes[ci]!r} has {len(members)} image(s); need at least 2")
        n_train = int(math.floor(train_fraction * len(members) + 0.5))
        n_train = min(max(n_train, 1), len(members) - 1)
        order = rng.permutation(len(members))
        train.extend(sorted(members[order[:n_train]].tolist()))
        test.extend(sorted(members[order[n_train:]].tolist()))
    return SplitPlan(seed=seed, train_fraction=train_fraction, train=train, test=test)


def sample_features(dset: DescriptorSet, fraction: float, seed: int) -> DescriptorSet:
    """Per-image sample without replacement of ceil(fraction * count) rows.

    Used when building codebooks from a fraction of the training features;
    deterministic under a fixed seed. A fraction of 1.0 returns the set
    unchanged (same row order).
    """
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"feature fraction must be in (0,1], got {fraction}")
    if len(dset) == 0:
        raise ParameterError("cannot sample from an empty descriptor set")
    if fraction == 1.0:
        return dset
    rng = np.random.default_rng(seed)
    keep: list[np.ndarray] = []
    for image_id in np.unique(dset.image_ids):
        rows = np.flatnonzero(dset.image_ids == image_id)
        n_keep = int(math.ceil(fraction * len(rows)))
        chosen = rng.choice(len(rows), size=n_keep, replace=False)
        keep.append(rows[np.sort(chosen)])
    return dset.select(np.concatenate(keep))
