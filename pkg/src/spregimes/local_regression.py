"""Locally weighted least squares, GWR hat trace, AICc and bandwidth search.

All local fits are computed together: row ``i`` of a sparse weight matrix
holds the weights of the regression centred on observation ``i``, so the
normal equations of every local fit come out of two sparse products.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
import pandas as pd
from scipy import sparse

from .errors import NumericalError, RankError
from .weights import LocalWeightSet, initial_weights, pairwise_distance

logger = logging.getLogger(__name__)

COND_WARN = 1e10
COND_MAX = 1e14
SIGMA2_METHODS = ("unbiased", "df")


@dataclass(frozen=True)
class LocalFit:
    """One weighted least squares fit.

    ``sigma2`` is NaN when the fit has no residual degrees of freedom
    (an exact interpolation); ``cov`` is NaN then as well.
    """

    beta: np.ndarray
    cov: np.ndarray
    sigma2: float
    effective_weight_sum: float

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


@dataclass(frozen=True)
class LocalFits:
    """Stacked local fits: ``beta`` (n, p), ``cov`` (n, p, p), ``sigma2`` (n,)."""

    beta: np.ndarray
    cov: np.ndarray
    sigma2: np.ndarray
    weight_sum: np.ndarray
    resid_df: np.ndarray

    def __len__(self) -> int:
        return self.beta.shape[0]

    def __getitem__(self, i: int) -> LocalFit:
        return LocalFit(self.beta[i], self.cov[i], float(self.sigma2[i]), float(self.weight_sum[i]))

    def __iter__(self) -> Iterator[LocalFit]:
        return (self[i] for i in range(len(self)))

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.einsum("ijj->ij", self.cov))

    def to_frame(self, ids=None, coords=None, names=None) -> pd.DataFrame:
        """One row per observation: id, coordinates, coefficients, SEs, sigma2."""
        n, p = self.beta.shape
        names = list(names) if names is not None else [f"b{j}" for j in range(p)]
        df = pd.DataFrame({"id": list(ids) if ids is not None else range(n)})
        if coords is not None:
            df["x"] = coords[:, 0]
            df["y"] = coords[:, 1]
        se = self.se
        for j, name in enumerate(names):
            df[f"beta_{name}"] = self.beta[:, j]
        for j, name in enumerate(names):
            df[f"se_{name}"] = se[:, j]
        df["sigma2"] = self.sigma2
        return df


@dataclass(frozen=True)
class BandwidthScore:
    k: int
    aicc: float
    hat_trace: float


def _outer_rows(X: np.ndarray) -> np.ndarray:
    n, p = X.shape
    return (X[:, :, None] * X[:, None, :]).reshape(n, p * p)


def _check_conditioning(A: np.ndarray, offset: int = 0) -> None:
    ev = np.linalg.eigvalsh(A)
    lo, hi = ev[:, 0], ev[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(lo > 0, hi / lo, np.inf)
    bad = np.flatnonzero(~(cond <= COND_MAX))
    if bad.size:
        i = int(bad[0])
        raise RankError(
            f"local fit {i + offset}: weighted cross-product matrix is singular "
            f"(condition number {cond[i]:.3g})"
        )
    warn = np.flatnonzero(cond > COND_WARN)
    if warn.size:
        logger.warning(
            "%d local fit(s) ill-conditioned (max condition number %.3g, first at %d)",
            warn.size,
            float(cond[warn].max()),
            int(warn[0]) + offset,
        )


def _fit_rows(
    X: np.ndarray,
    y: np.ndarray,
    W: sparse.csr_array,
    sigma2_method: str = "unbiased",
    with_cov: bool = True,
) -> LocalFits:
    """Weighted least squares for every row of ``W`` (m x n)."""
    if sigma2_method not in SIGMA2_METHODS:
        raise ValueError(f"sigma2_method must be one of {SIGMA2_METHODS}")
    n, p = X.shape
    m = W.shape[0]
    XX = _outer_rows(X)
    A = (W @ XX).reshape(m, p, p)
    A = 0.5 * (A + A.transpose(0, 2, 1))
    _check_conditioning(A)
    Xy = W @ (X * y[:, None])
    beta = np.linalg.solve(A, Xy[:, :, None])[:, :, 0]
    wsum = np.asarray(W.sum(axis=1)).ravel()

    coo = W.tocoo()
    rows, cols, w = coo.row, coo.col, coo.data
    e = y[cols] - np.einsum("ij,ij->i", X[cols], beta[rows])
    rss_w = np.bincount(rows, weights=w * e * e, minlength=m)

    if not with_cov:
        nan = np.full(m, np.nan)
        return LocalFits(beta, np.full((m, p, p), np.nan), nan, wsum, nan)

    Ainv = np.linalg.inv(A)
    B = (W.power(2) @ XX).reshape(m, p, p)
    if sigma2_method == "unbiased":
        # E[sum w e^2] = sigma^2 (sum w - tr(A^-1 B)) under homoskedastic errors
        dof = wsum - np.einsum("ijk,ikj->i", Ainv, B)
    else:
        dof = wsum - p
    tol = 1e-10 * np.maximum(wsum, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma2 = np.where(dof > tol, rss_w / dof, np.nan)
    cov = sigma2[:, None, None] * (Ainv @ B @ Ainv)
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    return LocalFits(beta, cov, sigma2, wsum, dof)


def wls_fit(X: np.ndarray, y: np.ndarray, w: np.ndarray, sigma2_method: str = "unbiased") -> LocalFit:
    """Weighted least squares ``(X'WX)^-1 X'Wy`` with sandwich covariance
    ``sigma2 (X'WX)^-1 X'W^2X (X'WX)^-1``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    p = X.shape[1]
    pos = w > 0
    if pos.sum() < p:
        raise NumericalError(f"insufficient support: {int(pos.sum())} positive weights for {p} coefficients")
    if np.linalg.matrix_rank(X[pos]) < p:
        raise RankError("design restricted to positive-weight rows is rank deficient")
    W = sparse.csr_array(w[None, :])
    return _fit_rows(X, y, W, sigma2_method)[0]


def _as_matrix(weights) -> sparse.csr_array:
    if isinstance(weights, LocalWeightSet):
        return weights.weights
    if sparse.issparse(weights):
        return sparse.csr_array(weights)
    return sparse.csr_array(np.asarray(weights, dtype=float))


def local_fit_all(X: np.ndarray, y: np.ndarray, weights, sigma2_method: str = "unbiased") -> LocalFits:
    """Fit the local regression at every observation, in input order.

    ``weights`` is a ``LocalWeightSet``, a sparse matrix or a dense (n, n)
    array whose row ``i`` weights the fit at ``i``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    W = _as_matrix(weights)
    if W.shape != (X.shape[0], X.shape[0]):
        raise ValueError("weight matrix must be n x n")
    counts = np.asarray((W > 0).sum(axis=1)).ravel()
    short = np.flatnonzero(counts < X.shape[1])
    if short.size:
        raise NumericalError(
            f"local fit {int(short[0])}: insufficient support ({int(counts[short[0]])} "
            f"positive weights for {X.shape[1]} coefficients)"
        )
    return _fit_rows(X, y, W, sigma2_method)


def gwr_aicc(
    X: np.ndarray,
    y: np.ndarray,
    coords: np.ndarray,
    k: int,
    kernel: str = "bisquare",
    distances: np.ndarray | None = None,
) -> BandwidthScore:
    """Corrected AIC of a GWR fit with an adaptive bi-square bandwidth of
    ``k`` neighbours.

    ``AICc = 2n ln(sigma) + n ln(2 pi) + n (n + tr S) / (n - 2 - tr S)``
    with ``sigma^2 = RSS / n``.  A bandwidth leaving ``n - 2 - tr S <= 0``
    scores ``inf``.  ``kernel="global"`` replaces the kernel by unit weights
    (the OLS limit).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if kernel == "bisquare":
        W = initial_weights(coords, k, distances=distances).weights
    elif kernel == "global":
        W = sparse.csr_array(np.ones((n, n)))
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    fits = _fit_rows(X, y, W, with_cov=False)
    XX = _outer_rows(X)
    A = (W @ XX).reshape(n, p, p)
    A = 0.5 * (A + A.transpose(0, 2, 1))
    h = np.linalg.solve(A, X[:, :, None])[:, :, 0]
    trS = float(np.sum(W.diagonal() * np.einsum("ij,ij->i", X, h)))
    yhat = np.einsum("ij,ij->i", X, fits.beta)
    rss = float(np.sum((y - yhat) ** 2))
    denom = n - 2.0 - trS
    if denom <= 0:
        return BandwidthScore(k, math.inf, trS)
    sigma = math.sqrt(max(rss, 1e-300) / n)
    aicc = 2 * n * math.log(sigma) + n * math.log(2 * math.pi) + n * (n + trS) / denom
    return BandwidthScore(k, aicc, trS)


def select_bandwidth(
    X: np.ndarray,
    y: np.ndarray,
    coords: np.ndarray,
    k_min: int | None = None,
    k_max: int | None = None,
    scores: dict[int, BandwidthScore] | None = None,
) -> int:
    """Number of nearest neighbours minimising the GWR AICc.

    Golden-section search over the integers in ``[k_min, k_max]``, then an
    exhaustive scan of the +-3 neighbourhood of the incumbent, repeated
    until it stops moving.  Ties go to the larger k.  Bandwidths whose local
    fits are singular score ``inf``.  Pass a dict as ``scores`` to collect
    every evaluated score.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    k_min = 2 * p if k_min is None else int(k_min)
    k_max = n - 1 if k_max is None else int(k_max)
    k_min = max(k_min, 1)
    if k_min > k_max:
        raise ValueError(f"empty bandwidth range [{k_min}, {k_max}]")
    D = pairwise_distance(coords)
    cache: dict[int, BandwidthScore] = {} if scores is None else scores

    def f(k: int) -> float:
        if k not in cache:
            try:
                cache[k] = gwr_aicc(X, y, coords, k, distances=D)
            except NumericalError as exc:
                logger.debug("k=%d rejected: %s", k, exc)
                cache[k] = BandwidthScore(k, math.inf, math.nan)
        return cache[k].aicc

    def better(a: int, b: int) -> bool:
        return (f(a), -a) < (f(b), -b)

    lo, hi = k_min, k_max
    ratio = (3 - math.sqrt(5)) / 2
    while hi - lo > 3:
        step = max(1, round(ratio * (hi - lo)))
        m1, m2 = lo + step, hi - step
        if m1 >= m2:
            break
        if better(m1, m2):
            hi = m2
        else:
            lo = m1
    best = lo
    for k in range(lo, hi + 1):
        if better(k, best):
            best = k
    while True:
        incumbent = best
        for k in range(max(k_min, best - 3), min(k_max, best + 3) + 1):
            if better(k, best):
                best = k
        if best == incumbent:
            break
    return best
