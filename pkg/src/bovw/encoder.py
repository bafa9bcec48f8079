"""Per-image word histograms and the fused 2Z retrieval vector.

Each channel's histogram is L1-normalized independently (an empty
histogram stays all-zero) and the halves are concatenated FREAK-first, so
index Z marks the channel boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebook import Codebook, assign_words
from .dataset import GrayImage
from .descriptors import KIND_FREAK, KIND_SIFT, DescriptorSet
from .errors import ParameterError
from .freak import PairSelection, RetinalPattern, build_pattern, compute_all_freak, load_default_pairs
from .scalespace import DetectorParams, detect_keypoints
from .sift import compute_all_sift


@dataclass
class WordHistogram:
    """Counts of descriptors assigned to each of Z words."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1:
            raise ParameterError("histogram counts must be 1-D")

    @property
    def z(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        total = self.total
        if total == 0:
            return np.zeros(self.z, dtype=np.float32)
        return (self.counts / total).astype(np.float32)


@dataclass
class FusedVector:
    """Concatenation [freak_half | sift_half], each half summing to 1 or 0."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 1 or len(self.values) % 2 != 0:
            raise ParameterError("fused vector must be 1-D of even length")

    @property
    def z(self) -> int:
        return len(self.values) // 2

    def freak_half(self) -> np.ndarray:
        return self.values[:self.z]

    def sift_half(self) -> np.ndarray:
        return self.values[self.z:]


def encode(cb: Codebook, descriptors: DescriptorSet) -> WordHistogram:
    """Histogram of nearest-word assignments over a descriptor set."""
    if descriptors.kind != cb.kind:
        raise ParameterError(
            f"descriptor kind {descriptors.kind!r} does not match codebook kind {cb.kind!r}")
    if len(descriptors) == 0:
        return WordHistogram(np.zeros(cb.size, dtype=np.int64))
    assign = assign_words(cb, descriptors.as_float())
    return WordHistogram(np.bincount(assign, minlength=cb.size))


def fuse(h_freak: WordHistogram, h_sift: WordHistogram) -> FusedVector:
    """L1-normalize each channel histogram and concatenate FREAK-first."""
    if h_freak.z != h_sift.z:
        raise ParameterError(f"codebook sizes differ: {h_freak.z} vs {h_sift.z}")
    return FusedVector(np.concatenate([h_freak.normalized(), h_sift.normalized()]))


def extract_both(img: GrayImage, params: DetectorParams | None = None,
                 pairs: PairSelection | None = None,
                 pattern: RetinalPattern | None = None) -> tuple[DescriptorSet, DescriptorSet]:
    """One detector run feeding both channels: (freak_set, sift_set)."""
    pattern = pattern or build_pattern()
    pairs = pairs or load_default_pairs()
    pyr, kps = detect_keypoints(img, params)
    freak_set = compute_all_freak(img, kps, pattern, pairs)
    sift_set = compute_all_sift(pyr, kps)
    return freak_set, sift_set


def encode_image(img: GrayImage, cb_freak: Codebook, cb_sift: Codebook,
                 params: DetectorParams | None = None,
                 pairs: PairSelection | None = None,
                 pattern: RetinalPattern | None = None) -> FusedVector:
    """Full image-to-fused-vector path with a shared keypoint detection."""
    if cb_freak.kind != KIND_FREAK or cb_sift.kind != KIND_SIFT:
        raise ParameterError("codebooks passed in the wrong order or of the wrong kind")
    freak_set, sift_set = extract_both(img, params, pairs, pattern)
    return fuse(encode(cb_freak, freak_set), encode(cb_sift, sift_set))
