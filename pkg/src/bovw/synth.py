"""Deterministic synthetic texture corpus for tests and demos.

Three texture families with distinct spatial statistics (smoothed random
fields at two correlation lengths, and oriented gratings) give
keypoint-rich images that both descriptor channels can discriminate.
"""

from __future__ import annotations

import math
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import GrayImage
from .scalespace import gaussian_blur

CLASS_NAMES = ("blobs", "grains", "waves")


def _normalize(arr: np.ndarray, lo: float = 0.02, hi: float = 0.98) -> np.ndarray:
    # Percentile stretch keeps local contrast high despite outliers.
    amin, amax = np.percentile(arr, [2.0, 98.0])
    if amax - amin < 1e-12:
        return np.full_like(arr, (lo + hi) / 2.0)
    return np.clip(lo + (hi - lo) * (arr - amin) / (amax - amin), 0.0, 1.0)


def _random_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    return gaussian_blur(rng.standard_normal((size, size)), sigma).astype(np.float64)


def make_texture(kind: str, seed: int, size: int = 128) -> GrayImage:
    """One texture image; deterministic in (kind, seed, size)."""
    kind_code = zlib.crc32(kind.encode("utf-8")) & 0xFFFF
    rng = np.random.default_rng(np.random.SeedSequence([kind_code, seed, size]))
    if kind == "blobs":
        field = _random_field(rng, size, 3.0) + 0.4 * _random_field(rng, size, 1.5)
    elif kind == "grains":
        field = _random_field(rng, size, 1.5) + 0.3 * _random_field(rng, size, 4.0)
    elif kind == "waves":
        theta = rng.uniform(0.0, math.pi)
        freq = rng.uniform(8.0, 14.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
        carrier = np.sin(2.0 * math.pi * freq * (xs * math.cos(theta)
                                                 + ys * math.sin(theta)) / size + phase)
        field = carrier + 0.6 * _random_field(rng, size, 1.5)
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    return GrayImage(_normalize(field))


def textured_corpus(count: int = 20, size: int = 128, seed: int = 0) -> list[GrayImage]:
    """Mixed-family corpus used by descriptor robustness tests."""
    kinds = CLASS_NAMES
    return [make_texture(kinds[i % len(kinds)], seed * 1000 + i, size) for i in range(count)]


def make_texture_dataset(root: str | Path, per_class: int = 30, size: int = 128,
                         seed: int = 0) -> Path:
    """Write the 3-class texture dataset as grayscale PNGs under ``root``."""
    root = Path(root)
    for ci, name in enumerate(CLASS_NAMES):
        class_dir = root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = make_texture(name, seed * 10000 + ci * 100 + i, size)
            arr = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(class_dir / f"{name}_{i:03d}.png")
    return root
