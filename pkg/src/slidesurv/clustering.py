"""Patch thumbnail embeddings, PCA reduction, and k-means clustering.

Embeddings are area-averaged grayscale thumbnails flattened row-major and
scaled to [0, 1]. PCA reduces them before a seeded k-means++ / Lloyd pass
assigns every patch a cluster.

Embedding matrix file layout, little-endian:

    magic  8 bytes  b"SSEMB1\\0\\0"
    rows   uint64
    dim    uint64
    data   rows * dim float64, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .sampling import _LUMA

_MAGIC = b"SSEMB1\x00\x00"


def _box_weights(src: int, dst: int) -> np.ndarray:
    """dst x src row matrix of exact interval-overlap box-filter weights."""
    w = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, src)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                w[i, j] = overlap / scale
    return w


def thumbnail_embed(patch: np.ndarray, thumb_side: int) -> np.ndarray:
    """Grayscale area-averaged thumbnail, flattened row-major, in [0, 1]."""
    if patch.shape[0] < thumb_side or patch.shape[1] < thumb_side:
        raise DataError(f"patch {patch.shape[:2]} smaller than thumbnail side {thumb_side}")
    gray = patch.astype(np.float64) @ _LUMA
    wr = _box_weights(gray.shape[0], thumb_side)
    wc = _box_weights(gray.shape[1], thumb_side)
    thumb = wr @ gray @ wc.T
    return (thumb / 255.0).reshape(-1)


@dataclass
class PcaModel:
    mean: np.ndarray                # (d,)
    components: np.ndarray          # (q, d) rows orthonormal
    explained_variance: np.ndarray  # (q,) descending

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(x) - self.mean) @ self.components.T


def fit_pca(x: np.ndarray, q: int) -> PcaModel:
    """Top-q principal components of the rows of ``x``.

    Components are eigenvectors of the sample covariance (ddof=1), ordered by
    descending eigenvalue; each component's largest-magnitude coordinate is
    made positive (first such coordinate on magnitude ties) so the sign is
    reproducible.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if not 1 <= q <= min(n - 1, d):
        raise DataError(f"q must be in [1, {min(n - 1, d)}], got {q}")
    mean = x.mean(axis=0)
    centered = x - mean
    if not centered.any():
        raise DataError("zero-variance input: all rows identical")
    # SVD of the centered data; eigenvalues of the covariance are s^2/(n-1)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:q]
    var = s[:q] ** 2 / (n - 1)
    for row in comps:
        lead = np.argmax(np.abs(row))
        if row[lead] < 0:
            row *= -1.0
    return PcaModel(mean=mean, components=comps, explained_variance=var)


@dataclass
class KMeansModel:
    centers: np.ndarray       # (k, q)
    assignments: np.ndarray   # (n,) int
    cost: float               # sum of squared distances to assigned centers
    cost_trace: list[float]   # cost after each assignment step

    def predict(self, x: np.ndarray) -> np.ndarray:
        return _assign(np.atleast_2d(x), self.centers)


def _assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, so distance ties go to the lower id
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def _cost(x: np.ndarray, centers: np.ndarray, assign: np.ndarray) -> float:
    return float(((x - centers[assign]) ** 2).sum())


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass sits on existing centers; fall back to uniform
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[c] = x[idx]
        d2 = np.minimum(d2, ((x - centers[c]) ** 2).sum(axis=1))
    return centers


def fit_kmeans(x: np.ndarray, k: int, seed: int, max_iter: int = 100) -> KMeansModel:
    """Seeded k-means++ init followed by Lloyd iterations.

    A cluster that empties is re-seeded at the point farthest from its own
    assigned center (processed in ascending cluster id, without reusing a
    point). Stops when assignments are stable or at ``max_iter``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise DataError(f"k must be in [1, {n}], got {k}")
    if not np.isfinite(x).all():
        raise DataError("non-finite values in clustering input")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    trace: list[float] = []
    assign = None
    for _ in range(max_iter):
        new_assign = _assign(x, centers)
        trace.append(_cost(x, centers, new_assign))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        for c in range(k):
            if counts[c] > 0:
                centers[c] = x[assign == c].mean(axis=0)
        empties = [c for c in range(k) if counts[c] == 0]
        if empties:
            dist_own = ((x - centers[assign]) ** 2).sum(axis=1)
            used: set[int] = set()
            for c in empties:
                far = int(np.argmax(np.where(
                    np.isin(np.arange(n), list(used)), -np.inf, dist_own)))
                centers[c] = x[far]
                used.add(far)
    assign = _assign(x, centers)
    return KMeansModel(centers=centers, assignments=assign,
                       cost=_cost(x, centers, assign), cost_trace=trace)


def save_embeddings(path, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise DataError(f"embedding matrix must be 2-D, got shape {m.shape}")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<QQ", m.shape[0], m.shape[1]))
        f.write(m.tobytes(order="C"))


def load_embeddings(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _MAGIC:
        raise DataError(f"{path}: not an embedding file (bad magic)")
    rows, dim = struct.unpack_from("<QQ", raw, 8)
    expect = 24 + rows * dim * 8
    if len(raw) != expect:
        raise DataError(f"{path}: truncated embedding file")
    return np.frombuffer(raw, dtype="<f8", count=rows * dim, offset=24).reshape(rows, dim).copy()


def cluster_patches(embeddings: np.ndarray, p: int, q: int, seed: int,
                    max_iter: int = 100) -> tuple[PcaModel, KMeansModel]:
    """PCA to q dimensions, then k-means into p clusters."""
    if p > embeddings.shape[0]:
        raise NumericError(f"cannot form {p} clusters from {embeddings.shape[0]} patches")
    pca = fit_pca(embeddings, q)
    km = fit_kmeans(pca.transform(embeddings), p, seed=seed, max_iter=max_iter)
    return pca, km
