"""Descriptor set container shared by the SIFT and FREAK channels.

SIFT descriptors are float32 rows of dimension 128. FREAK descriptors are
512-bit strings stored packed, 64 bytes per row, most-significant bit of
byte 0 = bit 0. For clustering, binary descriptors embed into float space
as 0.0/1.0 vectors; on such vectors squared Euclidean distance equals
Hamming distance exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

KIND_SIFT = "sift"
KIND_FREAK = "freak"

SIFT_DIM = 128
FREAK_BITS = 512
FREAK_BYTES = FREAK_BITS // 8


@dataclass
class DescriptorSet:
    """Descriptors of one kind, optionally grouped by source image.

    ``data`` is (N, 128) float32 for SIFT or (N, 64) uint8 packed bits for
    FREAK. ``image_ids`` assigns each row to a source image (all zero when
    the set comes from a single image). ``keypoints`` is the parallel
    keypoint list when the set was produced by extraction.
    """

    kind: str
    data: np.ndarray
    image_ids: np.ndarray = field(default=None)  # type: ignore[assignment]
    keypoints: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in (KIND_SIFT, KIND_FREAK):
            raise ParameterError(f"unknown descriptor kind {self.kind!r}")
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            self.data = self.data.reshape(0, SIFT_DIM if self.kind == KIND_SIFT else FREAK_BYTES)
        if self.kind == KIND_SIFT and self.data.shape[1] != SIFT_DIM:
            raise ParameterError(f"SIFT descriptors must have {SIFT_DIM} columns")
        if self.kind == KIND_FREAK and self.data.shape[1] != FREAK_BYTES:
            raise ParameterError(f"FREAK descriptors must pack into {FREAK_BYTES} bytes")
        if self.image_ids is None:
            self.image_ids = np.zeros(len(self.data), dtype=np.int32)
        else:
            self.image_ids = np.asarray(self.image_ids, dtype=np.int32)
        if len(self.image_ids) != len(self.data):
            raise ParameterError("image_ids length must match descriptor count")

    def __len__(self) -> int:
        return len(self.data)

    @property
    def dim(self) -> int:
        """Dimension in float space: 128 for SIFT, 512 for FREAK."""
        return SIFT_DIM if self.kind == KIND_SIFT else FREAK_BITS

    def as_float(self) -> np.ndarray:
        """(N, dim) float32 view for clustering; FREAK bits become 0.0/1.0."""
        if self.kind == KIND_SIFT:
            return np.ascontiguousarray(self.data, dtype=np.float32)
        return np.unpackbits(self.data, axis=1).astype(np.float32)

    def select(self, rows: np.ndarray) -> "DescriptorSet":
        """New set with the given rows, keypoints carried along if present."""
        rows = np.asarray(rows)
        kps = [self.keypoints[i] for i in rows] if self.keypoints else []
        return DescriptorSet(self.kind, self.data[rows], self.image_ids[rows], kps)


def concat_sets(sets: list[DescriptorSet]) -> DescriptorSet:
    """Pool descriptor sets, tagging rows with their position in ``sets``."""
    if not sets:
        raise ParameterError("cannot concatenate an empty list of descriptor sets")
    kind = sets[0].kind
    if any(s.kind != kind for s in sets):
        raise ParameterError("descriptor kinds differ")
    data = np.concatenate([s.data for s in sets], axis=0)
    ids = np.concatenate([np.full(len(s), i, dtype=np.int32) for i, s in enumerate(sets)])
    return DescriptorSet(kind, data, ids)


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack (..., 512) 0/1 rows into (..., 64) uint8 rows."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.shape[-1] != FREAK_BITS:
        raise ParameterError(f"expected {FREAK_BITS} bits per row")
    return np.packbits(bits, axis=-1)


def unpack_bits(packed: np.ndarray) -> np.ndarray:
    """Inverse of :func:`pack_bits`: (..., 64) uint8 -> (..., 512) uint8 0/1."""
    return np.unpackbits(np.asarray(packed, dtype=np.uint8), axis=-1)


_POPCOUNT = np.array([bin(v).count("1") for v in range(256)], dtype=np.uint16)


def hamming_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamming distance between packed bit rows; broadcasts over rows."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    return _POPCOUNT[np.bitwise_xor(a, b)].sum(axis=-1).astype(np.int64)
