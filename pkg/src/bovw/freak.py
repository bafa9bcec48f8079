"""512-bit retinal binary descriptors.

A 43-field sampling pattern (one center plus seven 6-point rings whose
radii and smoothing sizes shrink geometrically toward the center) is
scaled by the keypoint sigma and rotated by a gradient-derived
orientation. Each descriptor bit is a strict greater-than comparison of
two fields' smoothed intensities; smoothing uses integral-image box means
sized to each field. Bits follow the pair selection's coarse-to-fine
order, longest baselines first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from itertools import combinations

import numpy as np

from .dataset import GrayImage
from .descriptors import FREAK_BITS, KIND_FREAK, DescriptorSet, pack_bits
from .errors import ParameterError
from .scalespace import DetectorParams, Keypoint, detect_keypoints

NUM_FIELDS = 43
NUM_RINGS = 7
POINTS_PER_RING = 6
NUM_PAIRS_FULL = NUM_FIELDS * (NUM_FIELDS - 1) // 2  # 903
NUM_ORIENTATION_PAIRS = 45
ORIENTATION_EPS = 1e-9

DEFAULT_OUTER_RADIUS = 7.5  # outer ring radius, in units of keypoint sigma
DEFAULT_RING_RATIO = 0.7
DEFAULT_SMOOTHING_RATIO = 0.6

ALL_PAIRS = np.array(list(combinations(range(NUM_FIELDS), 2)), dtype=np.int32)


@dataclass
class RetinalPattern:
    """Receptive field offsets and smoothing radii in keypoint-sigma units."""

    offsets: np.ndarray  # (43, 2) x, y
    radii: np.ndarray    # (43,) smoothing radius per field

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        if self.offsets.shape != (NUM_FIELDS, 2) or self.radii.shape != (NUM_FIELDS,):
            raise ParameterError(f"pattern must have exactly {NUM_FIELDS} fields")

    def extent(self) -> float:
        """Radius of the support disk: max |offset| + its smoothing radius."""
        return float(np.max(np.hypot(self.offsets[:, 0], self.offsets[:, 1]) + self.radii))


@dataclass
class PairSelection:
    """512 descriptor comparison pairs plus 45 orientation pairs."""

    descriptor_pairs: np.ndarray  # (512, 2)
    orientation_pairs: np.ndarray  # (45, 2)

    def __post_init__(self):
        self.descriptor_pairs = np.asarray(self.descriptor_pairs, dtype=np.int32)
        self.orientation_pairs = np.asarray(self.orientation_pairs, dtype=np.int32)
        if self.descriptor_pairs.shape != (FREAK_BITS, 2):
            raise ParameterError(f"need exactly {FREAK_BITS} descriptor pairs")
        if len({(int(a), int(b)) for a, b in self.descriptor_pairs}) != FREAK_BITS:
            raise ParameterError("descriptor pairs must be distinct")
        if np.any(self.descriptor_pairs[:, 0] == self.descriptor_pairs[:, 1]):
            raise ParameterError("a pair cannot compare a field with itself")
        if self.orientation_pairs.shape != (NUM_ORIENTATION_PAIRS, 2):
            raise ParameterError(f"need exactly {NUM_ORIENTATION_PAIRS} orientation pairs")


def build_pattern(outer_radius: float = DEFAULT_OUTER_RADIUS,
                  ring_ratio: float = DEFAULT_RING_RATIO,
                  smoothing_ratio: float = DEFAULT_SMOOTHING_RATIO) -> RetinalPattern:
    """Deterministic 43-field pattern: 7 rings of 6 points plus a center.

    Ring k has radius outer_radius * ring_ratio^k; odd rings are rotated by
    half a point step. Smoothing radii are smoothing_ratio times the ring
    radius, and the center field continues the geometric progression so the
    radii strictly decrease toward the center.
    """
    if not 0 < ring_ratio < 1:
        raise ParameterError("ring_ratio must be in (0,1)")
    offsets = np.zeros((NUM_FIELDS, 2))
    radii = np.zeros(NUM_FIELDS)
    step = 2.0 * math.pi / POINTS_PER_RING
    for ring in range(NUM_RINGS):
        r = outer_radius * ring_ratio ** ring
        phase = (ring % 2) * step / 2.0
        for p in range(POINTS_PER_RING):
            angle = phase + p * step
            idx = ring * POINTS_PER_RING + p
            offsets[idx] = (r * math.cos(angle), r * math.sin(angle))
            radii[idx] = smoothing_ratio * r
    radii[NUM_FIELDS - 1] = smoothing_ratio * outer_radius * ring_ratio ** NUM_RINGS
    return RetinalPattern(offsets, radii)


def pair_baselines(pattern: RetinalPattern, pairs: np.ndarray) -> np.ndarray:
    d = pattern.offsets[pairs[:, 0]] - pattern.offsets[pairs[:, 1]]
    return np.hypot(d[:, 0], d[:, 1])


def default_orientation_pairs(pattern: RetinalPattern) -> np.ndarray:
    """The 45 longest-baseline pairs, ties broken by index order."""
    lengths = pair_baselines(pattern, ALL_PAIRS)
    order = np.lexsort((ALL_PAIRS[:, 1], ALL_PAIRS[:, 0], -lengths))
    return ALL_PAIRS[order[:NUM_ORIENTATION_PAIRS]].copy()


def integral_image(pixels: np.ndarray) -> np.ndarray:
    """Zero-padded double-precision summed-area table."""
    ii = np.zeros((pixels.shape[0] + 1, pixels.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(pixels, axis=0, dtype=np.float64), axis=1, out=ii[1:, 1:])
    return ii


def _interp_ii(ii: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Bilinear sample of the summed-area table at fractional coordinates
    (equals the exact integral of the image over the fractional rectangle
    corner). Coordinates must lie in [0, h] x [0, w]."""
    h, w = ii.shape[0] - 1, ii.shape[1] - 1
    y0 = np.clip(np.floor(yy).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xx).astype(np.int64), 0, w - 1)
    fy = yy - y0
    fx = xx - x0
    top = ii[y0, x0] * (1 - fx) + ii[y0, x0 + 1] * fx
    bot = ii[y0 + 1, x0] * (1 - fx) + ii[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _box_means(ii: np.ndarray, cx: np.ndarray, cy: np.ndarray,
               r: np.ndarray) -> np.ndarray | None:
    """Means over boxes of side 2r+1 centered at fractional pixel-center
    positions; None if any box leaves the image.

    Pixel (row, col) covers [col, col+1] x [row, row+1] in summed-area
    coordinates, so a center coordinate maps there with a +0.5 shift.
    """
    h, w = ii.shape[0] - 1, ii.shape[1] - 1
    half = r + 0.5
    x0, x1 = cx + 0.5 - half, cx + 0.5 + half
    y0, y1 = cy + 0.5 - half, cy + 0.5 + half
    if np.any(x0 < 0) or np.any(y0 < 0) or np.any(x1 > w) or np.any(y1 > h):
        return None
    total = (_interp_ii(ii, y1, x1) - _interp_ii(ii, y0, x1)
             - _interp_ii(ii, y1, x0) + _interp_ii(ii, y0, x0))
    return total / ((2.0 * r + 1.0) ** 2)


def _field_intensities(ii: np.ndarray, kp: Keypoint, pattern: RetinalPattern,
                       rotation: float, fields: np.ndarray) -> np.ndarray | None:
    cos_r, sin_r = math.cos(rotation), math.sin(rotation)
    ox = pattern.offsets[fields, 0] * kp.scale
    oy = pattern.offsets[fields, 1] * kp.scale
    cx = kp.x + cos_r * ox - sin_r * oy
    cy = kp.y + sin_r * ox + cos_r * oy
    r = pattern.radii[fields] * kp.scale
    return _box_means(ii, cx, cy, np.maximum(r, 0.0))


def smoothed_intensity(img: GrayImage, kp: Keypoint, field: int,
                       rotation: float = 0.0,
                       pattern: RetinalPattern | None = None) -> float:
    """Mean intensity of one receptive field after rotating the pattern.

    Raises ParameterError when the field's box leaves the image (callers
    drop the keypoint in that case).
    """
    pattern = pattern or build_pattern()
    ii = integral_image(img.pixels)
    out = _field_intensities(ii, kp, pattern, rotation, np.array([field]))
    if out is None:
        raise ParameterError("receptive field outside the image")
    return float(out[0])


def estimate_orientation(img: GrayImage, kp: Keypoint, pattern: RetinalPattern,
                         pairs: PairSelection) -> float:
    """Rotation from the intensity-weighted sum of pair baseline vectors."""
    ii = integral_image(img.pixels)
    theta = _orientation_from_integral(ii, kp, pattern, pairs)
    if theta is None:
        raise ParameterError("orientation pattern outside the image")
    return theta


_ORIENTATION_ITERS = 8
_ORIENTATION_TOL = 0.002


def _orientation_from_integral(ii: np.ndarray, kp: Keypoint, pattern: RetinalPattern,
                               pairs: PairSelection) -> float | None:
    """Gradient-vote orientation, iterated to a fixed point.

    The first pass is the plain atan2 of the pair-vote sum with the
    unrotated pattern; subsequent passes re-measure with the pattern
    rotated by the current estimate until the vote aligns with the
    pattern axis. The fixed point is equivariant under image rotation
    (exactly so for 90-degree multiples, where axis-aligned boxes map
    onto axis-aligned boxes).
    """
    opairs = pairs.orientation_pairs
    fields = np.unique(opairs)
    base = pattern.offsets[opairs[:, 0]] - pattern.offsets[opairs[:, 1]]
    norm = np.hypot(base[:, 0], base[:, 1])
    unit = base / norm[:, None]
    lookup = np.zeros(NUM_FIELDS)
    theta = 0.0
    for _ in range(_ORIENTATION_ITERS):
        vals = _field_intensities(ii, kp, pattern, theta, fields)
        if vals is None:
            return None
        lookup[fields] = vals
        diff = lookup[opairs[:, 0]] - lookup[opairs[:, 1]]
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        gx = float(np.sum(diff * (cos_t * unit[:, 0] - sin_t * unit[:, 1])))
        gy = float(np.sum(diff * (sin_t * unit[:, 0] + cos_t * unit[:, 1])))
        if math.hypot(gx, gy) < ORIENTATION_EPS:
            return theta % (2.0 * math.pi)
        new_theta = math.atan2(gy, gx)
        delta = (new_theta - theta + math.pi) % (2.0 * math.pi) - math.pi
        theta = new_theta
        if abs(delta) < _ORIENTATION_TOL:
            break
    return theta % (2.0 * math.pi)


def compute_freak(img: GrayImage, kp: Keypoint, pattern: RetinalPattern,
                  pairs: PairSelection) -> np.ndarray | None:
    """Packed 512-bit descriptor, or None if the pattern leaves the image."""
    ii = integral_image(img.pixels)
    theta = _orientation_from_integral(ii, kp, pattern, pairs)
    if theta is None:
        return None
    return _descriptor_from_integral(ii, kp, pattern, pairs, theta)


def _descriptor_from_integral(ii: np.ndarray, kp: Keypoint, pattern: RetinalPattern,
                              pairs: PairSelection, rotation: float) -> np.ndarray | None:
    vals = _field_intensities(ii, kp, pattern, rotation, np.arange(NUM_FIELDS))
    if vals is None:
        return None
    dp = pairs.descriptor_pairs
    bits = (vals[dp[:, 0]] > vals[dp[:, 1]]).astype(np.uint8)
    return pack_bits(bits)


def compute_all_freak(img: GrayImage, kps: list[Keypoint],
                      pattern: RetinalPattern, pairs: PairSelection) -> DescriptorSet:
    """Descriptors for every keypoint whose pattern stays in bounds."""
    ii = integral_image(img.pixels)
    rows = []
    kept: list[Keypoint] = []
    for kp in kps:
        theta = _orientation_from_integral(ii, kp, pattern, pairs)
        if theta is None:
            continue
        packed = _descriptor_from_integral(ii, kp, pattern, pairs, theta)
        if packed is None:
            continue
        rows.append(packed)
        kept.append(kp)
    data = np.vstack(rows) if rows else np.zeros((0, FREAK_BITS // 8), dtype=np.uint8)
    return DescriptorSet(KIND_FREAK, data, keypoints=kept)


def extract_freak(img: GrayImage, params: DetectorParams | None = None,
                  pairs: PairSelection | None = None,
                  pattern: RetinalPattern | None = None) -> DescriptorSet:
    """Detector plus descriptor pipeline; shares the SIFT detector."""
    pattern = pattern or build_pattern()
    pairs = pairs or load_default_pairs()
    _, kps = detect_keypoints(img, params)
    return compute_all_freak(img, kps, pattern, pairs)


def full_comparison_matrix(img: GrayImage, kps: list[Keypoint],
                           pattern: RetinalPattern) -> np.ndarray:
    """All 903 comparison bits per in-bounds keypoint, for pair training.

    Rows follow the unrotated pattern (orientation is irrelevant to the
    mean/correlation statistics the selection uses).
    """
    ii = integral_image(img.pixels)
    rows = []
    for kp in kps:
        vals = _field_intensities(ii, kp, pattern, 0.0, np.arange(NUM_FIELDS))
        if vals is None:
            continue
        rows.append((vals[ALL_PAIRS[:, 0]] > vals[ALL_PAIRS[:, 1]]).astype(np.uint8))
    return np.array(rows, dtype=np.uint8).reshape(-1, NUM_PAIRS_FULL)


def select_pairs(training_matrix: np.ndarray,
                 pattern: RetinalPattern | None = None,
                 corr_threshold: float = 0.2,
                 min_rows: int = 1000,
                 min_separation: float = 0.75) -> PairSelection:
    """Pick 512 high-variance, pairwise-decorrelated comparison pairs.

    Pairs are ranked by |mean - 0.5| ascending and accepted greedily while
    their absolute correlation with every accepted pair stays below the
    threshold; the threshold relaxes in 0.05 steps when fewer than 512
    qualify. The result is ordered coarse-to-fine (longest baseline first).
    With fewer than ``min_rows`` training rows the shipped default
    selection is returned instead.
    """
    pattern = pattern or build_pattern()
    training_matrix = np.asarray(training_matrix)
    if training_matrix.ndim != 2 or training_matrix.shape[1] != NUM_PAIRS_FULL:
        raise ParameterError(f"training matrix must have {NUM_PAIRS_FULL} columns")
    if len(training_matrix) < min_rows:
        import logging
        logging.getLogger(__name__).warning(
            "only %d training rows (< %d); using the shipped default pairs",
            len(training_matrix), min_rows)
        return load_default_pairs()

    # Pairs whose fields mostly overlap compare near-identical means and
    # carry no signal; require the baseline to clear the combined radii.
    separation = pair_baselines(pattern, ALL_PAIRS) >= min_separation * (
        pattern.radii[ALL_PAIRS[:, 0]] + pattern.radii[ALL_PAIRS[:, 1]])

    cols = training_matrix.astype(np.float64)
    means = cols.mean(axis=0)
    decisiveness = np.abs(means - 0.5)
    # Overlapping pairs rank after all separated ones, most-stable first
    # (their high-variance bits are sampling noise, not signal).
    order_key = np.where(separation, decisiveness, 2.0 + (0.5 - decisiveness))
    rank = np.argsort(order_key, kind="stable")
    std = cols.std(axis=0)
    centered = cols - means
    cov = centered.T @ centered / len(cols)
    denom = np.outer(std, std)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.abs(np.where(denom > 0, cov / np.where(denom > 0, denom, 1.0), 0.0))

    accepted: list[int] = []
    chosen = np.zeros(NUM_PAIRS_FULL, dtype=bool)
    threshold = corr_threshold
    while len(accepted) < FREAK_BITS and threshold <= 1.0 + 1e-9:
        for idx in rank:
            if chosen[idx]:
                continue
            if not accepted or np.all(corr[idx, accepted] < threshold):
                accepted.append(int(idx))
                chosen[idx] = True
                if len(accepted) == FREAK_BITS:
                    break
        threshold += 0.05
    if len(accepted) < FREAK_BITS:
        raise ParameterError("could not assemble 512 decorrelated pairs")

    picked = ALL_PAIRS[np.array(accepted)]
    lengths = pair_baselines(pattern, picked)
    order = np.lexsort((picked[:, 1], picked[:, 0], -lengths))
    return PairSelection(picked[order], default_orientation_pairs(pattern))


def load_default_pairs() -> PairSelection:
    """The committed pair selection (trained once on a synthetic corpus)."""
    text = resources.files("bovw").joinpath("data/freak_pairs.txt").read_text()
    return parse_pairs(text)


def parse_pairs(text: str) -> PairSelection:
    desc: list[tuple[int, int]] = []
    orient: list[tuple[int, int]] = []
    target = desc
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line == "--orientation--":
            target = orient
            continue
        a, b = line.split()
        target.append((int(a), int(b)))
    return PairSelection(np.array(desc), np.array(orient))


def format_pairs(pairs: PairSelection) -> str:
    lines = [f"{a} {b}" for a, b in pairs.descriptor_pairs]
    lines.append("--orientation--")
    lines.extend(f"{a} {b}" for a, b in pairs.orientation_pairs)
    return "\n".join(lines) + "\n"
