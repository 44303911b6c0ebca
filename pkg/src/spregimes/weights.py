"""Distances, kernels, adaptive bandwidths and spatial weight matrices."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

from .errors import DataError

__all__ = [
    "pairwise_distance",
    "bisquare",
    "gaussian_kernel",
    "adaptive_bandwidth",
    "adaptive_bandwidths",
    "LocalWeightSet",
    "initial_weights",
    "SpatialWeightMatrix",
    "knn_row_normalized_W",
]


def pairwise_distance(coords: np.ndarray) -> np.ndarray:
    """Dense symmetric Euclidean distance matrix with an exact zero diagonal."""
    coords = np.asarray(coords, dtype=float)
    if not np.all(np.isfinite(coords)):
        raise DataError("coordinates must be finite")
    d = cdist(coords, coords)
    d = np.minimum(d, d.T)
    np.fill_diagonal(d, 0.0)
    return d


def _distances_from(coords: np.ndarray, i: int) -> np.ndarray:
    d = cdist(coords[i : i + 1], coords)[0]
    d[i] = 0.0
    return d


def bisquare(d, b):
    """Bi-square kernel ``(1 - (d/b)^2)^2`` for ``d < b`` and 0 beyond."""
    b = np.asarray(b, dtype=float)
    if np.any(b <= 0):
        raise ValueError("bandwidth must be positive")
    d = np.asarray(d, dtype=float)
    u = d / b
    w = np.where(u < 1.0, (1.0 - u * u) ** 2, 0.0)
    return w if w.ndim else float(w)


def gaussian_kernel(x, s):
    """Gaussian kernel ``exp(-x^2 / (2 s^2))``; ``s = inf`` gives 1 everywhere."""
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise ValueError("kernel scale must be positive")
    x = np.asarray(x, dtype=float)
    w = np.exp(-(x * x) / (2.0 * s * s))
    return w if w.ndim else float(w)


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n - 1:
        raise ValueError(f"neighbor count k must lie in [1, {n - 1}], got {k}")


def adaptive_bandwidth(coords: np.ndarray, i: int, k: int) -> float:
    """Distance from observation ``i`` to its ``k``-th nearest neighbour
    (itself excluded)."""
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    _check_k(k, n)
    d = np.delete(_distances_from(coords, i), i)
    return float(np.partition(d, k - 1)[k - 1])


def adaptive_bandwidths(coords: np.ndarray, k: int) -> np.ndarray:
    D = pairwise_distance(coords)
    _check_k(k, D.shape[0])
    np.fill_diagonal(D, np.inf)
    return np.partition(D, k - 1, axis=1)[:, k - 1]


@dataclass(frozen=True)
class LocalWeightSet:
    """Per-observation geographic weights; row ``i`` of ``weights`` holds the
    nonzero kernel weights ``w0[i, j]`` used by the local fit at ``i``."""

    weights: sparse.csr_array
    bandwidths: np.ndarray
    k: int

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def row(self, i: int) -> np.ndarray:
        return self.weights[[i], :].toarray()[0]

    def toarray(self) -> np.ndarray:
        return self.weights.toarray()


def initial_weights(
    coords: np.ndarray, k_opt: int, distances: np.ndarray | None = None
) -> LocalWeightSet:
    """Bi-square weights with the adaptive (k-nearest-neighbour) bandwidth.

    Only strictly positive weights are stored; the diagonal is always 1.
    A precomputed ``pairwise_distance`` matrix may be passed to avoid
    recomputing it during bandwidth searches.
    """
    D = pairwise_distance(coords) if distances is None else distances
    n = D.shape[0]
    _check_k(k_opt, n)
    off = D + np.diag(np.full(n, np.inf))
    bw = np.partition(off, k_opt - 1, axis=1)[:, k_opt - 1]
    zero = np.flatnonzero(bw <= 0)
    if zero.size:
        raise DataError(
            f"observation {zero[0]}: zero bandwidth at k={k_opt} (duplicate coordinates); "
            "increase k or de-duplicate locations"
        )
    rows, cols = np.nonzero(D < bw[:, None])
    vals = bisquare(D[rows, cols], bw[rows])
    w = sparse.csr_array((vals, (rows, cols)), shape=(n, n))
    w.sort_indices()
    return LocalWeightSet(weights=w, bandwidths=bw, k=k_opt)


@dataclass(frozen=True)
class SpatialWeightMatrix:
    """Sparse row-normalised neighbour matrix with a zero diagonal."""

    W: sparse.csr_array
    k: int | None = None

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def toarray(self) -> np.ndarray:
        return self.W.toarray()

    @classmethod
    def empty(cls, n: int) -> "SpatialWeightMatrix":
        return cls(sparse.csr_array((n, n)), k=0)

    @classmethod
    def from_dense(cls, W: np.ndarray, k: int | None = None) -> "SpatialWeightMatrix":
        W = sparse.csr_array(np.asarray(W, dtype=float))
        W.eliminate_zeros()
        return cls(W, k)

    def save(self, path: str | Path, ids: Sequence[str] | None = None) -> None:
        """Write ``row_id col_id weight`` lines (one per nonzero)."""
        coo = self.W.tocoo()
        order = np.lexsort((coo.col, coo.row))
        ids = list(ids) if ids is not None else [str(i) for i in range(self.n)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("row_id col_id weight\n")
            for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
                fh.write(f"{ids[r]} {ids[c]} {float(v)!r}\n")

    @classmethod
    def load(cls, path: str | Path, ids: Sequence[str] | None = None, n: int | None = None) -> "SpatialWeightMatrix":
        """Read the 3-column format written by ``save``.

        With ``ids`` the row/column labels are matched against them;
        otherwise they must be integer positions and ``n`` gives the size.
        """
        index = {str(v): i for i, v in enumerate(ids)} if ids is not None else None
        rows, cols, vals = [], [], []
        with open(path, encoding="utf-8") as fh:
            for ln, line in enumerate(fh, 1):
                parts = line.split()
                if not parts or (ln == 1 and parts[0] == "row_id"):
                    continue
                if len(parts) != 3:
                    raise DataError(f"{path}:{ln}: expected 3 columns")
                try:
                    r = index[parts[0]] if index is not None else int(parts[0])
                    c = index[parts[1]] if index is not None else int(parts[1])
                    v = float(parts[2])
                except (KeyError, ValueError) as exc:
                    raise DataError(f"{path}:{ln}: bad entry {line.strip()!r}") from exc
                rows.append(r)
                cols.append(c)
                vals.append(v)
        size = len(ids) if ids is not None else n
        if size is None:
            size = max(max(rows), max(cols)) + 1 if rows else 0
        W = sparse.csr_array((vals, (rows, cols)), shape=(size, size))
        W.sort_indices()
        if np.any(W.diagonal() != 0):
            raise DataError("spatial weight matrix must have a zero diagonal")
        return cls(W)


def knn_row_normalized_W(
    coords: np.ndarray, k: int = 10, distances: np.ndarray | None = None
) -> SpatialWeightMatrix:
    """Binary k-nearest-neighbour adjacency, divided by row sums.

    Neighbours tied with the k-th distance are all included; the matrix is
    generally asymmetric.
    """
    D = pairwise_distance(coords) if distances is None else distances
    n = D.shape[0]
    _check_k(k, n)
    off = D + np.diag(np.full(n, np.inf))
    dk = np.partition(off, k - 1, axis=1)[:, k - 1]
    zero = np.flatnonzero(dk <= 0)
    if zero.size:
        raise DataError(f"observation {zero[0]}: all {k} nearest neighbours are at distance 0")
    adj = off <= dk[:, None]
    rows, cols = np.nonzero(adj)
    counts = adj.sum(axis=1)
    W = sparse.csr_array((1.0 / counts[rows], (rows, cols)), shape=(n, n))
    W.sort_indices()
    return SpatialWeightMatrix(W, k=k)
