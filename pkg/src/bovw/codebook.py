"""Visual vocabularies: seeded k-means over pooled descriptors and
nearest-word assignment.

Binary descriptors are embedded as 0/1 floats before clustering, which
makes squared Euclidean distance equal Hamming distance on the raw
vectors while letting centroids take fractional prototype values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .descriptors import DescriptorSet
from .errors import DimensionMismatchError, InsufficientDataError, ParameterError

DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-4
DEFAULT_N_INIT = 3


@dataclass
class Codebook:
    """Z centroid words of one descriptor kind, squared-Euclidean metric."""

    kind: str
    words: np.ndarray
    seed: int = 0
    train_params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.words = np.asarray(self.words, dtype=np.float32)
        if self.words.ndim != 2 or len(self.words) < 2:
            raise ParameterError("codebook needs at least 2 words")

    @property
    def size(self) -> int:
        return len(self.words)

    @property
    def dim(self) -> int:
        return self.words.shape[1]


def squared_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(N, Z) squared Euclidean distances via the expanded product."""
    x = np.asarray(x, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    d2 = (np.sum(x * x, axis=1)[:, None] - 2.0 * (x @ centers.T)
          + np.sum(centers * centers, axis=1)[None, :])
    return np.maximum(d2, 0.0)


def _plusplus_init(x: np.ndarray, z: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; fails when fewer than z distinct points exist."""
    n = len(x)
    centers = np.empty((z, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = squared_distances(x, centers[:1])[:, 0]
    for i in range(1, z):
        total = d2.sum()
        if total <= 0:
            raise InsufficientDataError(
                f"fewer than {z} distinct points; cannot seed {z} clusters")
        probs = d2 / total
        nxt = int(rng.choice(n, p=probs))
        centers[i] = x[nxt]
        d2 = np.minimum(d2, squared_distances(x, centers[i:i + 1])[:, 0])
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iters: int,
           tol: float) -> tuple[np.ndarray, float, list[float]]:
    """Lloyd iterations with farthest-point reseeding of empty clusters.

    Returns (centers, final objective, per-iteration objective history);
    the history is non-increasing up to floating-point slack.
    """
    z = len(centers)
    shift_threshold = tol * float(np.mean(np.var(x, axis=0)))
    history: list[float] = []
    for _ in range(max_iters):
        d2 = squared_distances(x, centers)
        assign = np.argmin(d2, axis=1)
        point_cost = d2[np.arange(len(x)), assign]
        history.append(float(point_cost.sum()))
        new_centers = np.zeros_like(centers)
        counts = np.bincount(assign, minlength=z).astype(np.float64)
        np.add.at(new_centers, assign, x)
        nonempty = counts > 0
        new_centers[nonempty] /= counts[nonempty, None]
        if not np.all(nonempty):
            cost = point_cost.copy()
            for ci in np.flatnonzero(~nonempty):
                far = int(np.argmax(cost))
                new_centers[ci] = x[far]
                cost[far] = -np.inf
        shift = float(np.sum((new_centers - centers) ** 2))
        centers = new_centers
        if shift <= shift_threshold:
            break
    objective = float(np.min(squared_distances(x, centers), axis=1).sum())
    history.append(objective)
    return centers, objective, history


def kmeans_fit(x: np.ndarray, z: int, seed: int, max_iters: int = DEFAULT_MAX_ITERS,
               tol: float = DEFAULT_TOL, n_init: int = DEFAULT_N_INIT) -> tuple[np.ndarray, float]:
    """Best of ``n_init`` seeded k-means++ / Lloyd runs.

    Returns (centers, objective); deterministic for fixed inputs and seed.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ParameterError("descriptor matrix must be 2-D")
    if z < 2:
        raise ParameterError("Z must be at least 2")
    if len(x) < z:
        raise InsufficientDataError(f"insufficient descriptors: {len(x)} < Z={z}")
    if np.isnan(x).any():
        raise ParameterError("NaN in descriptor data")
    rng = np.random.default_rng(seed)
    best: tuple[np.ndarray, float] | None = None
    for _ in range(max(1, n_init)):
        centers = _plusplus_init(x, z, rng)
        centers, objective, _ = _lloyd(x, centers, max_iters, tol)
        if best is None or objective < best[1]:
            best = (centers, objective)
    return best  # type: ignore[return-value]


def train_codebook(descriptors: DescriptorSet, z: int, seed: int,
                   max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
                   n_init: int = DEFAULT_N_INIT) -> Codebook:
    """Cluster a pooled (already feature-sampled) training set into Z words."""
    x = descriptors.as_float()
    centers, objective = kmeans_fit(x, z, seed, max_iters, tol, n_init)
    return Codebook(descriptors.kind, centers.astype(np.float32), seed,
                    {"max_iters": max_iters, "tol": tol, "n_init": n_init,
                     "objective": objective})


def assign_words(cb: Codebook, x: np.ndarray) -> np.ndarray:
    """Nearest-word index per row; ties resolve to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cb.dim:
        raise DimensionMismatchError(
            f"descriptor dim {x.shape[-1] if x.ndim else '?'} != codebook dim {cb.dim}")
    return np.argmin(squared_distances(x, cb.words), axis=1).astype(np.int32)


def assign_word(cb: Codebook, descriptor: np.ndarray) -> int:
    """Nearest word for a single descriptor."""
    descriptor = np.asarray(descriptor, dtype=np.float64).reshape(1, -1)
    return int(assign_words(cb, descriptor)[0])
