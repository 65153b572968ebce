"""k-means codebook fitting and frame-to-cluster assignment for pseudo-labels.

Hand-rolled Lloyd iterations with k-means++ seeding so that runs are
bit-reproducible from (data order, seed) alone; the scikit-learn estimator
surface is kept so the quantizer composes with pipelines.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ContractError, FormatError, InsufficientDataError

CDBK_MAGIC = b"UASRCDBK"
CDBK_VERSION = 1


@dataclass(frozen=True)
class Codebook:
    centers: np.ndarray   # (K, D)
    fit_seed: int

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centers.shape[1]


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (N, K) squared Euclidean distances, exact form (no ||a||^2-2ab expansion,
    # which can go slightly negative and break determinism guarantees)
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=points.dtype)
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = points[rng.integers(n)]
        else:
            centers[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def fit_kmeans(data, k: int, seed: int = 0, max_iters: int = 100,
               tol: float = 1e-6) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding; deterministic given
    (data order, seed). ``data`` is an (N, D) array or a list of (T, D) arrays.

    Empty clusters are repaired by reseeding the center to the point
    farthest from its assigned center.
    """
    if isinstance(data, (list, tuple)):
        points = np.concatenate([np.asarray(d, dtype=np.float64) for d in data], axis=0)
    else:
        points = np.asarray(data, dtype=np.float64)
    if points.ndim != 2:
        raise ContractError(f"expected (N, D) points, got {points.shape}")
    if k < 1:
        raise ContractError("k must be >= 1")
    if points.shape[0] < k:
        raise InsufficientDataError(
            f"need at least k={k} frames, got {points.shape[0]}"
        )
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(points, k, rng)
    for _ in range(max_iters):
        d2 = _sq_dists(points, centers)
        labels = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        for j in range(k):
            mask = labels == j
            if mask.any():
                new_centers[j] = points[mask].mean(axis=0)
            else:
                new_centers[j] = points[np.argmax(d2[np.arange(len(points)), labels])]
        shift = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if shift < tol:
            break
    return Codebook(centers=centers, fit_seed=seed)


def assign(codebook: Codebook, frames: np.ndarray) -> np.ndarray:
    """Nearest-center label per frame; ties break to the lowest center index."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != codebook.feature_dim:
        raise ContractError(
            f"feature dim {frames.shape} does not match codebook dim {codebook.feature_dim}"
        )
    if frames.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(_sq_dists(frames, codebook.centers), axis=1)


class KMeansQuantizer(BaseEstimator, TransformerMixin):
    """Estimator wrapper: fit a codebook on stacked frames, transform
    feature sequences into pseudo-label sequences."""

    def __init__(self, k: int = 64, seed: int = 0, max_iters: int = 100, tol: float = 1e-6):
        self.k = k
        self.seed = seed
        self.max_iters = max_iters
        self.tol = tol

    def fit(self, X, y=None):
        self.codebook_ = fit_kmeans(X, self.k, seed=self.seed,
                                    max_iters=self.max_iters, tol=self.tol)
        return self

    def transform(self, X):
        if isinstance(X, (list, tuple)):
            return [assign(self.codebook_, x) for x in X]
        return assign(self.codebook_, X)

    predict = transform


# --- codebook file I/O ----------------------------------------------------


def save_codebook(path, codebook: Codebook) -> None:
    with open(path, "wb") as f:
        f.write(CDBK_MAGIC)
        f.write(struct.pack("<IIIQ", CDBK_VERSION, codebook.k, codebook.feature_dim,
                            codebook.fit_seed))
        f.write(np.ascontiguousarray(codebook.centers, dtype="<f4").tobytes())


def load_codebook(path) -> Codebook:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CDBK_MAGIC:
            raise FormatError(f"bad codebook magic {magic!r}")
        version, k, d, seed = struct.unpack("<IIIQ", f.read(20))
        if version != CDBK_VERSION:
            raise FormatError(f"unsupported codebook version {version}")
        centers = np.frombuffer(f.read(4 * k * d), dtype="<f4").reshape(k, d)
    return Codebook(centers=centers.astype(np.float64), fit_seed=seed)


def save_labels(path, sequences) -> None:
    """One utterance per line, space-separated integer labels."""
    with open(path, "w", encoding="utf-8") as f:
        for seq in sequences:
            f.write(" ".join(str(int(x)) for x in seq) + "\n")


def load_labels(path) -> list[np.ndarray]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            out.append(np.array([int(x) for x in line.split()] if line else [], dtype=np.int64))
    return out
