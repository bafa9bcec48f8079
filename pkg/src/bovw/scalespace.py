"""Difference-of-Gaussians keypoint detection.

One detector run feeds both descriptor channels: a Gaussian pyramid is
built per octave, adjacent levels are differenced, 26-neighborhood extrema
are refined to sub-pixel positions, weak and edge-like responses are
rejected, and each survivor gets one or more principal orientations.

Coordinates and scales are reported in the base-image frame; per-octave
pixel units are used internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dataset import GrayImage
from .errors import ParameterError

# Assumed blur of the raw input image, in pixels.
INITIAL_SIGMA = 0.5

ORI_BINS = 36
ORI_SIGMA_FACTOR = 1.5
ORI_RADIUS_FACTOR = 3.0
ORI_PEAK_RATIO = 0.8
MAX_REFINE_STEPS = 5


@dataclass
class DetectorParams:
    """Detector defaults; classical values, overridable via config."""

    octaves: int = 4
    scales_per_octave: int = 3
    base_sigma: float = 1.6
    contrast_threshold: float = 0.03
    edge_ratio: float = 10.0
    border: int = 8


@dataclass
class Keypoint:
    """Scale-space interest point in base-image coordinates.

    ``scale`` is the absolute Gaussian sigma; ``octave``/``level`` locate
    the DoG sample the point was detected at. ``orientation`` is radians in
    [0, 2pi), assigned by :func:`assign_orientations`.
    """

    x: float
    y: float
    scale: float
    orientation: float = 0.0
    response: float = 0.0
    octave: int = 0
    level: int = 0

    def octave_xy(self) -> tuple[float, float]:
        f = 2.0 ** self.octave
        return self.x / f, self.y / f

    def octave_sigma(self) -> float:
        return self.scale / 2.0 ** self.octave


@dataclass
class GaussianPyramid:
    """Per-octave Gaussian levels plus their adjacent differences."""

    octaves: int
    scales_per_octave: int
    base_sigma: float
    levels: list[list[np.ndarray]]
    dogs: list[list[np.ndarray]]
    _gradients: dict = field(default_factory=dict, repr=False)

    def level_image(self, octave: int, level: int) -> np.ndarray:
        return self.levels[octave][level]

    def gradients(self, octave: int, level: int) -> tuple[np.ndarray, np.ndarray]:
        """Cached central-difference (dx, dy) arrays for one level."""
        key = (octave, level)
        if key not in self._gradients:
            img = self.levels[octave][level]
            dx = np.zeros_like(img)
            dy = np.zeros_like(img)
            dx[:, 1:-1] = img[:, 2:] - img[:, :-2]
            dy[1:-1, :] = img[2:, :] - img[:-2, :]
            self._gradients[key] = (dx, dy)
        return self._gradients[key]


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ceil(4 sigma)."""
    radius = max(1, int(math.ceil(4.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with replicated borders."""
    if sigma <= 0:
        return img.astype(np.float32, copy=True)
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(img.astype(np.float64), k, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, k, axis=1, mode="nearest")
    return out.astype(np.float32)


def max_feasible_octaves(height: int, width: int) -> int:
    """Largest octave count satisfying min dimension >= 2^octaves * 8."""
    return max(0, int(math.floor(math.log2(min(height, width) / 8.0))))


def build_pyramid(img: GrayImage, octaves: int = 4, scales_per_octave: int = 3,
                  base_sigma: float = 1.6) -> GaussianPyramid:
    """Build the Gaussian/DoG pyramid.

    Octave o holds scales_per_octave + 3 levels at sigma(o, i) =
    base_sigma * 2^(o + i/scales_per_octave); each next octave starts from
    the level at twice the octave's base blur, decimated by 2.
    """
    if octaves < 1 or scales_per_octave < 1:
        raise ParameterError("octaves and scales_per_octave must be >= 1")
    h, w = img.height, img.width
    feasible = max_feasible_octaves(h, w)
    if octaves > feasible:
        raise ParameterError(
            f"image {w}x{h} supports at most {feasible} octaves (requested {octaves})")

    s = scales_per_octave
    k = 2.0 ** (1.0 / s)
    per_octave = s + 3
    base = gaussian_blur(
        img.pixels, math.sqrt(max(base_sigma**2 - INITIAL_SIGMA**2, 0.01)))

    levels: list[list[np.ndarray]] = []
    dogs: list[list[np.ndarray]] = []
    current = base
    for _ in range(octaves):
        octave_levels = [current]
        for i in range(1, per_octave):
            sigma_prev = base_sigma * k ** (i - 1)
            sigma_inc = sigma_prev * math.sqrt(k * k - 1.0)
            octave_levels.append(gaussian_blur(octave_levels[-1], sigma_inc))
        levels.append(octave_levels)
        dogs.append([octave_levels[i + 1] - octave_levels[i] for i in range(per_octave - 1)])
        seed = octave_levels[s]  # blur = 2 * base_sigma in octave units
        nh, nw = seed.shape[0] // 2, seed.shape[1] // 2
        current = seed[0:2 * nh:2, 0:2 * nw:2]
    return GaussianPyramid(octaves, s, base_sigma, levels, dogs)


def _refine_candidate(dog: np.ndarray, level: int, i: int, j: int,
                      border: int) -> tuple[int, int, int, np.ndarray, np.ndarray, float] | None:
    """Iterate the quadratic (Taylor) fit; None when it fails to converge."""
    n_levels, h, w = dog.shape
    for _ in range(MAX_REFINE_STEPS):
        cube = dog[level - 1:level + 2, i - 1:i + 2, j - 1:j + 2].astype(np.float64)
        g = 0.5 * np.array([
            cube[1, 1, 2] - cube[1, 1, 0],
            cube[1, 2, 1] - cube[1, 0, 1],
            cube[2, 1, 1] - cube[0, 1, 1],
        ])
        c = cube[1, 1, 1]
        dxx = cube[1, 1, 2] - 2 * c + cube[1, 1, 0]
        dyy = cube[1, 2, 1] - 2 * c + cube[1, 0, 1]
        dss = cube[2, 1, 1] - 2 * c + cube[0, 1, 1]
        dxy = 0.25 * (cube[1, 2, 2] - cube[1, 2, 0] - cube[1, 0, 2] + cube[1, 0, 0])
        dxs = 0.25 * (cube[2, 1, 2] - cube[2, 1, 0] - cube[0, 1, 2] + cube[0, 1, 0])
        dys = 0.25 * (cube[2, 2, 1] - cube[2, 0, 1] - cube[0, 2, 1] + cube[0, 0, 1])
        hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            offset = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) < 0.5):
            return level, i, j, offset, g, c
        j += int(round(offset[0]))
        i += int(round(offset[1]))
        level += int(round(offset[2]))
        if (level < 1 or level > n_levels - 2 or i < border or i >= h - border
                or j < border or j >= w - border):
            return None
    return None


def detect_extrema(pyr: GaussianPyramid, contrast_threshold: float = 0.03,
                   edge_ratio: float = 10.0, border: int = 8) -> list[Keypoint]:
    """26-neighborhood DoG extrema, Taylor-refined and filtered.

    Survivors pass |refined DoG| >= contrast_threshold and the Hessian
    edge test trace^2/det < (r+1)^2/r with r = edge_ratio.
    """
    if any(len(d) < 3 for d in pyr.dogs):
        raise ParameterError("need at least 3 DoG levels per octave")
    edge_limit = (edge_ratio + 1.0) ** 2 / edge_ratio
    keypoints: list[Keypoint] = []
    seen: set[tuple[float, float, float]] = set()
    for octave, dog_list in enumerate(pyr.dogs):
        dog = np.stack(dog_list)
        n_levels, h, w = dog.shape
        if h <= 2 * border or w <= 2 * border:
            continue
        footprint = np.ones((3, 3, 3), dtype=bool)
        is_max = dog == ndimage.maximum_filter(dog, footprint=footprint, mode="constant",
                                               cval=-np.inf)
        is_min = dog == ndimage.minimum_filter(dog, footprint=footprint, mode="constant",
                                               cval=np.inf)
        mask = (is_max | is_min) & (np.abs(dog) >= 0.5 * contrast_threshold)
        mask[0, :, :] = mask[-1, :, :] = False
        mask[:, :border, :] = mask[:, h - border:, :] = False
        mask[:, :, :border] = mask[:, :, w - border:] = False
        for level, i, j in np.argwhere(mask):
            refined = _refine_candidate(dog, int(level), int(i), int(j), border)
            if refined is None:
                continue
            level_r, i_r, j_r, offset, g, center = refined
            value = center + 0.5 * float(g @ offset)
            if abs(value) < contrast_threshold:
                continue
            c = dog[level_r, i_r, j_r]
            dxx = dog[level_r, i_r, j_r + 1] - 2 * c + dog[level_r, i_r, j_r - 1]
            dyy = dog[level_r, i_r + 1, j_r] - 2 * c + dog[level_r, i_r - 1, j_r]
            dxy = 0.25 * (dog[level_r, i_r + 1, j_r + 1] - dog[level_r, i_r + 1, j_r - 1]
                          - dog[level_r, i_r - 1, j_r + 1] + dog[level_r, i_r - 1, j_r - 1])
            trace = dxx + dyy
            det = dxx * dyy - dxy * dxy
            if det <= 0 or trace * trace >= edge_limit * det:
                continue
            f = 2.0 ** octave
            kp = Keypoint(
                x=(j_r + float(offset[0])) * f,
                y=(i_r + float(offset[1])) * f,
                scale=pyr.base_sigma * 2.0 ** (octave + (level_r + float(offset[2]))
                                               / pyr.scales_per_octave),
                response=abs(value),
                octave=octave,
                level=int(level_r),
            )
            key = (kp.x, kp.y, kp.scale)
            if key in seen:
                continue
            seen.add(key)
            keypoints.append(kp)
    return keypoints


def _orientation_histogram(pyr: GaussianPyramid, kp: Keypoint) -> np.ndarray | None:
    img = pyr.level_image(kp.octave, kp.level)
    dx_img, dy_img = pyr.gradients(kp.octave, kp.level)
    h, w = img.shape
    cx, cy = kp.octave_xy()
    sigma_w = ORI_SIGMA_FACTOR * kp.octave_sigma()
    radius = max(1, int(round(ORI_RADIUS_FACTOR * sigma_w)))
    x0, x1 = int(round(cx)) - radius, int(round(cx)) + radius
    y0, y1 = int(round(cy)) - radius, int(round(cy)) + radius
    # Clip to the interior where central differences exist.
    gx0, gy0 = max(x0, 1), max(y0, 1)
    gx1, gy1 = min(x1, w - 2), min(y1, h - 2)
    if gx0 > gx1 or gy0 > gy1:
        return None
    ys, xs = np.mgrid[gy0:gy1 + 1, gx0:gx1 + 1]
    dx = dx_img[gy0:gy1 + 1, gx0:gx1 + 1]
    dy = dy_img[gy0:gy1 + 1, gx0:gx1 + 1]
    mag = np.hypot(dx, dy)
    weight = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma_w * sigma_w))
    angle = np.arctan2(dy, dx)  # y axis points down the rows
    bins = np.rint(angle * (ORI_BINS / (2.0 * math.pi))).astype(int) % ORI_BINS
    hist = np.bincount(bins.ravel(), weights=(mag * weight).ravel(), minlength=ORI_BINS)
    # Circular smoothing, kernel (1, 4, 6, 4, 1)/16.
    smoothed = (6 * hist + 4 * (np.roll(hist, 1) + np.roll(hist, -1))
                + np.roll(hist, 2) + np.roll(hist, -2)) / 16.0
    return smoothed


def assign_orientations(pyr: GaussianPyramid, kps: list[Keypoint]) -> list[Keypoint]:
    """Principal orientation per keypoint via a 36-bin gradient histogram.

    Secondary peaks at >= 80% of the maximum spawn duplicate keypoints
    differing only in orientation. Keypoints whose window has no valid
    pixels are dropped.
    """
    out: list[Keypoint] = []
    for kp in kps:
        hist = _orientation_histogram(pyr, kp)
        if hist is None:
            continue
        peak = hist.max()
        if peak <= 0:
            continue
        for b in range(ORI_BINS):
            left = hist[(b - 1) % ORI_BINS]
            right = hist[(b + 1) % ORI_BINS]
            if hist[b] <= left or hist[b] <= right or hist[b] < ORI_PEAK_RATIO * peak:
                continue
            denom = left - 2.0 * hist[b] + right
            delta = 0.5 * (left - right) / denom if denom != 0 else 0.0
            theta = ((b + delta) % ORI_BINS) * (2.0 * math.pi / ORI_BINS)
            out.append(Keypoint(kp.x, kp.y, kp.scale, theta % (2.0 * math.pi),
                                kp.response, kp.octave, kp.level))
    return out


def detect_keypoints(img: GrayImage,
                     params: DetectorParams | None = None) -> tuple[GaussianPyramid, list[Keypoint]]:
    """Full detector run shared by both descriptor channels."""
    params = params or DetectorParams()
    octaves = min(params.octaves, max_feasible_octaves(img.height, img.width))
    if octaves < 1:
        raise ParameterError(
            f"image {img.width}x{img.height} is too small for keypoint detection")
    pyr = build_pyramid(img, octaves, params.scales_per_octave, params.base_sigma)
    kps = detect_extrema(pyr, params.contrast_threshold, params.edge_ratio, params.border)
    return pyr, assign_orientations(pyr, kps)
