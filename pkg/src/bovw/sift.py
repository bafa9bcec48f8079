"""128-dimensional gradient-histogram descriptors at oriented keypoints.

Each descriptor pools gradients from a rotated 4x4 cell grid (3*sigma
pixels per cell) into 8 orientation bins per cell with trilinear
interpolation and Gaussian radial weighting, then normalizes with the
classical clamp-at-0.2 scheme. Keypoints whose sampling window leaves the
octave image are dropped rather than padded.
"""

from __future__ import annotations

import math

import numpy as np

from .dataset import GrayImage
from .descriptors import KIND_SIFT, DescriptorSet
from .scalespace import DetectorParams, GaussianPyramid, Keypoint, detect_keypoints

GRID_CELLS = 4
ORI_BINS = 8
CELL_SIGMA_FACTOR = 3.0  # pixels per cell, in units of keypoint sigma
MAGNITUDE_CLAMP = 0.2
_NORM_EPS = 1e-12


def _normalize_clamped(vec: np.ndarray) -> np.ndarray | None:
    """L2-normalize, clamp at 0.2, renormalize to the clamp fixed point."""
    norm = np.linalg.norm(vec)
    if norm < _NORM_EPS:
        return None
    vec = vec / norm
    for _ in range(32):
        clamped = np.minimum(vec, MAGNITUDE_CLAMP)
        clamped /= max(np.linalg.norm(clamped), _NORM_EPS)
        if np.max(np.abs(clamped - vec)) < 1e-9:
            return clamped
        vec = clamped
    return vec


def compute_sift(pyr: GaussianPyramid, kp: Keypoint) -> np.ndarray | None:
    """Descriptor for one oriented keypoint; None when the window does not
    fit inside the octave image or the patch has no gradient energy."""
    img = pyr.level_image(kp.octave, kp.level)
    dx_img, dy_img = pyr.gradients(kp.octave, kp.level)
    h, w = img.shape
    cx, cy = kp.octave_xy()
    sigma = kp.octave_sigma()
    hist_width = CELL_SIGMA_FACTOR * sigma
    # Circumradius of the rotated cell grid: half-diagonal of 4x4 cells.
    radius = int(math.ceil(hist_width * (GRID_CELLS / 2.0) * math.sqrt(2.0)))
    x0, x1 = int(math.floor(cx)) - radius, int(math.ceil(cx)) + radius
    y0, y1 = int(math.floor(cy)) - radius, int(math.ceil(cy)) + radius
    if x0 < 1 or y0 < 1 or x1 > w - 2 or y1 > h - 2:
        return None

    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    dxs = (xs - cx).ravel()
    dys = (ys - cy).ravel()
    cos_t = math.cos(kp.orientation)
    sin_t = math.sin(kp.orientation)
    # Offsets in the keypoint frame, in cell units.
    u = (cos_t * dxs + sin_t * dys) / hist_width
    v = (-sin_t * dxs + cos_t * dys) / hist_width
    row_bin = v + GRID_CELLS / 2.0 - 0.5
    col_bin = u + GRID_CELLS / 2.0 - 0.5
    keep = (row_bin > -1) & (row_bin < GRID_CELLS) & (col_bin > -1) & (col_bin < GRID_CELLS)
    if not np.any(keep):
        return None
    row_bin, col_bin = row_bin[keep], col_bin[keep]
    u, v = u[keep], v[keep]

    gx = dx_img[y0:y1 + 1, x0:x1 + 1].ravel()[keep]
    gy = dy_img[y0:y1 + 1, x0:x1 + 1].ravel()[keep]
    mag = np.hypot(gx, gy)
    weight = np.exp(-(u * u + v * v) / (2.0 * (GRID_CELLS / 2.0) ** 2))
    ori = (np.arctan2(gy, gx) - kp.orientation) % (2.0 * math.pi)
    ori_bin = ori * (ORI_BINS / (2.0 * math.pi))

    # Trilinear scatter into a (6, 6, 8) tensor; spatial borders trimmed after.
    r0 = np.floor(row_bin).astype(np.int64)
    c0 = np.floor(col_bin).astype(np.int64)
    o0 = np.floor(ori_bin).astype(np.int64)
    fr = row_bin - r0
    fc = col_bin - c0
    fo = ori_bin - o0
    o0 %= ORI_BINS
    value = mag * weight

    side = GRID_CELLS + 2
    flat = np.zeros(side * side * ORI_BINS)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            for do in (0, 1):
                wo = (1.0 - fo) if do == 0 else fo
                idx = ((r0 + 1 + dr) * side + (c0 + 1 + dc)) * ORI_BINS + (o0 + do) % ORI_BINS
                flat += np.bincount(idx, weights=value * wr * wc * wo,
                                    minlength=flat.size)
    hist = flat.reshape(side, side, ORI_BINS)[1:-1, 1:-1, :]
    desc = _normalize_clamped(hist.ravel())
    if desc is None:
        return None
    return desc.astype(np.float32)


def compute_all_sift(pyr: GaussianPyramid, kps: list[Keypoint]) -> DescriptorSet:
    """Descriptors for every keypoint that survives the window check."""
    rows = []
    kept: list[Keypoint] = []
    for kp in kps:
        desc = compute_sift(pyr, kp)
        if desc is not None:
            rows.append(desc)
            kept.append(kp)
    data = np.vstack(rows) if rows else np.zeros((0, GRID_CELLS * GRID_CELLS * ORI_BINS),
                                                 dtype=np.float32)
    return DescriptorSet(KIND_SIFT, data, keypoints=kept)


def extract_sift(img: GrayImage, params: DetectorParams | None = None) -> DescriptorSet:
    """Detector plus descriptor pipeline for one image."""
    pyr, kps = detect_keypoints(img, params)
    return compute_all_sift(pyr, kps)
