"""Adaptive weights smoothing of local fits and regime extraction.

Starting from plain GWR (bi-square weights, one WLS fit per observation) the
iteration compares neighbouring local coefficient vectors with Wald
statistics and multiplies each geographic weight by a Gaussian "statistical
factor" of that statistic.  Factors are blended with their previous value
and the local fits are recomputed until the weights stop moving.  Pairs of
observations that keep a large factor are linked; regimes are the connected
components of that graph.

Since the geographic weights come from adaptive bandwidths they are not
symmetric, but the statistical factor is: the state stores it once per
unordered pair and the working weights are ``w0[i, j] * factor[i, j]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from scipy import sparse, stats
from scipy.sparse.csgraph import connected_components
from sklearn.cluster import AgglomerativeClustering

from .errors import NumericalError
from .local_regression import LocalFit, LocalFits, local_fit_all
from .weights import LocalWeightSet, gaussian_kernel

logger = logging.getLogger(__name__)

TAU_MODES = ("quantile", "literal")
READOFFS = ("tested", "components")
WALD_COV = ("difference", "sum", "pooled", "own")
# above this share of nonzero weights the pair cross-products are formed densely
DENSE_FRACTION = 0.05


@dataclass(frozen=True)
class AwsConfig:
    """Tuning of the smoothing iteration.

    tau : float
        Tail probability that sets the scale of the Gaussian kernel on the
        Wald statistic (``tau_mode="quantile"``: the scale is the upper-tau
        quantile of chi2 with p degrees of freedom), or the scale itself
        (``tau_mode="literal"``).  ``inf`` switches the statistical factor
        off in either mode.
    eta : float
        Weight of the new factor when blending with the previous one.
    omega : float
        Convergence tolerance on the largest absolute weight change.
    theta : float
        Minimum statistical factor for two observations to be linked when
        reading off regimes.
    min_regime_size : int or None
        Smaller components are merged into a neighbour; ``None`` means p + 1.
    min_support : float or None
        Row weight sum each local fit must keep; ``None`` means p.
    wald_cov : str
        Covariance in the Wald statistic: ``"sum"`` (``cov_i + cov_j``, as
        if the two fits were independent; conservative because neighbouring
        fits share data), ``"difference"`` (the exact covariance of
        ``beta_i - beta_j`` including the shared data), ``"pooled"`` (the
        mean of the two) or ``"own"``.
    readoff : str
        ``"components"``: regimes are the linked components after merging
        small ones.  ``"tested"`` refines the components with Chow tests at
        level ``alpha`` (see ``extract_regimes``).
    alpha : float
        Test level of the ``"tested"`` read-off.
    """

    tau: float = 0.001
    eta: float = 0.5
    omega: float = 1e-6
    max_iter: int = 100
    theta: float = 0.5
    min_regime_size: int | None = None
    min_support: float | None = None
    tau_mode: str = "quantile"
    wald_cov: str = "sum"
    normalize_df: bool = False
    sigma2_method: str = "unbiased"
    readoff: str = "tested"
    alpha: float = 1e-4

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.tau_mode not in TAU_MODES:
            raise ValueError(f"tau_mode must be one of {TAU_MODES}")
        if self.tau_mode == "quantile" and not (self.tau < 1 or math.isinf(self.tau)):
            raise ValueError("in quantile mode tau is a tail probability in (0, 1) or inf")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if not self.omega > 0:
            raise ValueError("omega must be positive")
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")
        if self.wald_cov not in WALD_COV:
            raise ValueError(f"wald_cov must be one of {WALD_COV}")
        if self.readoff not in READOFFS:
            raise ValueError(f"readoff must be one of {READOFFS}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    def kernel_scale(self, p: int) -> float:
        if math.isinf(self.tau):
            return math.inf
        if self.tau_mode == "literal":
            return self.tau
        q = float(stats.chi2.isf(self.tau, p))
        return q / p if self.normalize_df else q

    def to_dict(self) -> dict[str, Any]:
        return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in vars(self).items()}


@dataclass(frozen=True)
class RegimeAssignment:
    """Labels 1..c, regime 1 being the largest."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=int)
        if labels.ndim != 1 or labels.size == 0:
            raise ValueError("labels must be a nonempty vector")
        c = int(labels.max())
        if labels.min() < 1 or set(np.unique(labels)) != set(range(1, c + 1)):
            raise ValueError("labels must cover 1..c without gaps")
        object.__setattr__(self, "labels", labels)

    @property
    def c(self) -> int:
        return int(self.labels.max())

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def sizes(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.c + 1)[1:].tolist()

    @classmethod
    def from_labels(cls, labels) -> "RegimeAssignment":
        """Relabel arbitrary ids as 1..c by decreasing size (ties: first seen)."""
        labels = np.asarray(labels)
        uniq, first, inv = np.unique(labels, return_index=True, return_inverse=True)
        sizes = np.bincount(inv.ravel())
        order = sorted(range(uniq.size), key=lambda g: (-sizes[g], first[g]))
        new = np.empty(uniq.size, dtype=int)
        new[order] = np.arange(1, uniq.size + 1)
        return cls(new[inv.ravel()])

    def to_dict(self) -> dict[str, Any]:
        return {"c": self.c, "sizes": self.sizes, "labels": self.labels.tolist()}


@dataclass
class WeightState:
    """Iteration state.

    ``pairs`` lists the unordered pairs ``(i, j)``, ``i < j``, where either
    geographic weight is positive; ``factor`` and ``chi`` are aligned with it.
    ``chi`` holds the Wald statistics of the current ``fits``.
    """

    iteration: int
    pairs: tuple[np.ndarray, np.ndarray]
    factor: np.ndarray
    weights: sparse.csr_array
    fits: LocalFits
    chi: np.ndarray
    converged: bool = False
    max_change: float = math.nan
    trace: list[dict[str, Any]] = field(default_factory=list)

    def factor_matrix(self) -> sparse.csr_array:
        """Symmetric n x n matrix of statistical factors (unit diagonal)."""
        n = self.weights.shape[0]
        i, j = self.pairs
        d = np.arange(n)
        S = sparse.csr_array(
            (
                np.concatenate([self.factor, self.factor, np.ones(n)]),
                (np.concatenate([i, j, d]), np.concatenate([j, i, d])),
            ),
            shape=(n, n),
        )
        S.sort_indices()
        return S

    def chi_matrix(self) -> sparse.csr_array:
        n = self.weights.shape[0]
        i, j = self.pairs
        S = sparse.csr_array(
            (np.concatenate([self.chi, self.chi]), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(n, n),
        )
        S.sort_indices()
        return S


def _difference_cov(
    X: np.ndarray, W: sparse.csr_array, sigma2: np.ndarray, i: np.ndarray, j: np.ndarray
) -> np.ndarray:
    """Covariance of ``beta_i - beta_j`` when both fits share data.

    With ``beta_i = A_i^-1 X' W_i y`` and a common error variance ``s2``
    (the mean of the two local estimates)
    ``Var = s2 (V_i + V_j - M_ij - M_ij')`` where ``V_i = A_i^-1 B_i A_i^-1``
    and ``M_ij = A_i^-1 X' W_i W_j X A_j^-1``.
    """
    n, p = X.shape
    W = sparse.csr_array(W)
    XX = (X[:, :, None] * X[:, None, :]).reshape(n, p * p)
    A = (W @ XX).reshape(n, p, p)
    Ainv = np.linalg.inv(0.5 * (A + A.transpose(0, 2, 1)))
    B = (W.power(2) @ XX).reshape(n, p, p)
    V = Ainv @ B @ Ainv
    G = np.empty((i.size, p, p))
    dense = W.nnz > DENSE_FRACTION * n * n
    Wd = W.toarray() if dense else None
    WT = None if dense else sparse.csc_array(W.T)
    for a in range(p):
        for b in range(a, p):
            xx = XX[:, a * p + b]
            if dense:
                v = ((Wd * xx) @ Wd.T)[i, j]
            else:
                prod = sparse.csr_array(W @ (sparse.diags_array(xx) @ WT))
                v = np.asarray(prod[i, j]).ravel()
            G[:, a, b] = v
            G[:, b, a] = v
    M = Ainv[i] @ G @ Ainv[j]
    s2 = 0.5 * (sigma2[i] + sigma2[j])
    S = s2[:, None, None] * (V[i] + V[j] - M - M.transpose(0, 2, 1))
    return 0.5 * (S + S.transpose(0, 2, 1))


def _wald_batch(
    beta: np.ndarray,
    cov: np.ndarray,
    i: np.ndarray,
    j: np.ndarray,
    mode: str = "sum",
    diff_cov: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Wald statistics for pairs ``(i, j)`` and the number of pairs that needed
    a pseudo-inverse.  ``mode="difference"`` needs ``diff_cov`` (one matrix
    per pair)."""
    if i.size == 0:
        return np.zeros(0), 0
    diff = beta[i] - beta[j]
    if mode == "difference":
        if diff_cov is None:
            raise ValueError("difference mode needs the pair covariances")
        covs = [diff_cov]
    elif mode == "sum":
        covs = [cov[i] + cov[j]]
    elif mode == "pooled":
        covs = [0.5 * (cov[i] + cov[j])]
    else:
        covs = [cov[i], cov[j]]
    out = np.zeros(i.size)
    n_singular = 0
    for S in covs:
        if not np.all(np.isfinite(S)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(S), axis=(1, 2)))[0])
            raise NumericalError(
                f"non-finite covariance in Wald comparison of {int(i[bad])} and {int(j[bad])}"
            )
        w, V = np.linalg.eigh(S)
        top = np.abs(w).max(axis=1, keepdims=True)
        keep = w > 1e-10 * top
        n_singular += int(np.count_nonzero(~keep.all(axis=1)))
        proj = np.einsum("nij,ni->nj", V, diff)
        with np.errstate(divide="ignore", invalid="ignore"):
            out += np.where(keep, proj * proj / w, 0.0).sum(axis=1)
    return out / len(covs), n_singular


def wald_pair(fit_i: LocalFit, fit_j: LocalFit, mode: str = "sum") -> float:
    """``(b_i - b_j)' S^-1 (b_i - b_j)`` with ``S = cov_i + cov_j``.

    Two standalone fits carry no record of shared data, so they are treated
    as independent (``"difference"`` reduces to ``"sum"``); use
    ``pair_wald`` for fits that share observations.  A singular ``S`` falls
    back to the pseudo-inverse with a warning.
    """
    if mode == "difference":
        mode = "sum"
    beta = np.stack([np.atleast_1d(fit_i.beta), np.atleast_1d(fit_j.beta)]).astype(float)
    cov = np.stack([np.atleast_2d(fit_i.cov), np.atleast_2d(fit_j.cov)]).astype(float)
    chi, n_sing = _wald_batch(beta, cov, np.array([0]), np.array([1]), mode)
    if n_sing:
        logger.warning("singular Wald covariance; pseudo-inverse used")
    return float(chi[0])


def _support_pairs(w0: sparse.csr_array) -> tuple[np.ndarray, np.ndarray]:
    coo = w0.tocoo()
    r, c = coo.row, coo.col
    off = r != c
    a = np.minimum(r[off], c[off])
    b = np.maximum(r[off], c[off])
    key = np.unique(a.astype(np.int64) * w0.shape[0] + b)
    return (key // w0.shape[0]).astype(np.intp), (key % w0.shape[0]).astype(np.intp)


class _PairIndex:
    """Maps stored entries of ``w0`` to positions in the pair vector."""

    def __init__(self, w0: sparse.csr_array, pairs: tuple[np.ndarray, np.ndarray]):
        n = w0.shape[0]
        self.w0 = w0.copy()
        self.w0.sort_indices()
        coo = self.w0.tocoo()
        r, c = coo.row, coo.col
        keys = np.minimum(r, c).astype(np.int64) * n + np.maximum(r, c)
        pair_keys = pairs[0].astype(np.int64) * n + pairs[1]
        pos = np.searchsorted(pair_keys, keys)
        self.diag = r == c
        pos[self.diag] = 0
        self.pos = pos
        self.rows = r

    def weights(self, factor: np.ndarray) -> sparse.csr_array:
        f = np.where(self.diag, 1.0, factor[self.pos] if factor.size else 1.0)
        out = self.w0.copy()
        out.data = self.w0.data * f
        return out

    def row_sums(self, factor: np.ndarray) -> np.ndarray:
        f = np.where(self.diag, 1.0, factor[self.pos] if factor.size else 1.0)
        return np.bincount(self.rows, weights=self.w0.data * f, minlength=self.w0.shape[0])

    def max_change(self, old: np.ndarray, new: np.ndarray) -> float:
        if old.size == 0:
            return 0.0
        d = np.where(self.diag, 0.0, np.abs(new[self.pos] - old[self.pos]))
        return float(np.max(self.w0.data * d)) if d.size else 0.0


def _as_sparse(a) -> sparse.csr_array:
    if sparse.issparse(a):
        out = sparse.csr_array(a)
    else:
        out = sparse.csr_array(np.asarray(a, dtype=float))
    out.sort_indices()
    return out


def pair_wald(
    X: np.ndarray,
    weights: sparse.csr_array,
    fits: LocalFits,
    i: np.ndarray,
    j: np.ndarray,
    mode: str = "difference",
) -> np.ndarray:
    """Wald statistics of ``beta_i - beta_j`` for the local fits made with
    ``weights``; singular covariances fall back to the pseudo-inverse."""
    diff_cov = _difference_cov(X, weights, fits.sigma2, i, j) if mode == "difference" and i.size else None
    chi, n_sing = _wald_batch(fits.beta, fits.cov, i, j, mode, diff_cov)
    if n_sing:
        logger.warning("%d singular Wald covariance(s); pseudo-inverse used", n_sing)
    return chi


def update_weights(state: WeightState, initial: LocalWeightSet, cfg: AwsConfig) -> sparse.csr_array:
    """Raw weights ``w0[i, j] * K(chi[i, j]; scale)`` on the initial support,
    with ``chi`` the Wald statistics stored in ``state``."""
    p = state.fits.beta.shape[1]
    stat = state.chi / p if cfg.normalize_df else state.chi
    factor = gaussian_kernel(stat, cfg.kernel_scale(p))
    return _PairIndex(initial.weights, state.pairs).weights(np.atleast_1d(factor))


def blend(prev, raw, eta: float) -> sparse.csr_array:
    """``(1 - eta) * prev + eta * raw`` on a common sparsity pattern."""
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    a, b = _as_sparse(prev), _as_sparse(raw)
    if a.shape != b.shape or not (
        np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices)
    ):
        raise ValueError("prev and raw weights must share the same support")
    out = a.copy()
    out.data = (1.0 - eta) * a.data + eta * b.data
    return out


def converged(prev, cur, omega: float) -> bool:
    """True when the largest absolute elementwise change is below ``omega``."""
    a, b = _as_sparse(prev), _as_sparse(cur)
    d = abs(a - b)
    return bool(d.nnz == 0 or d.max() < omega)


def run_aws(
    X: np.ndarray,
    y: np.ndarray,
    coords: np.ndarray | None,
    k_opt: int | None,
    cfg: AwsConfig | None = None,
    initial: LocalWeightSet | None = None,
) -> WeightState:
    """Iterate Wald comparison, reweighting, blending and refitting.

    ``initial`` may be given instead of ``coords``/``k_opt``.  When a weight
    update would leave some local fit with a row weight sum below the
    support floor, the pairs of that observation keep their previous factor
    (logged).  Hitting ``max_iter`` returns the last state with
    ``converged=False``.
    """
    from .weights import initial_weights

    cfg = cfg or AwsConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    p = X.shape[1]
    if initial is None:
        initial = initial_weights(coords, k_opt)
    w0 = initial.weights.copy()
    w0.sort_indices()
    pairs = _support_pairs(w0)
    index = _PairIndex(w0, pairs)
    scale = cfg.kernel_scale(p)
    floor = cfg.min_support if cfg.min_support is not None else float(p)
    floor = np.minimum(floor, index.row_sums(np.ones(pairs[0].size)))

    def wald(fits: LocalFits, weights: sparse.csr_array) -> np.ndarray:
        return pair_wald(X, weights, fits, pairs[0], pairs[1], cfg.wald_cov)

    factor = np.ones(pairs[0].size)
    fits = local_fit_all(X, y, w0, cfg.sigma2_method)
    chi = wald(fits, w0)
    state = WeightState(0, pairs, factor, index.weights(factor), fits, chi)

    for it in range(1, cfg.max_iter + 1):
        stat = chi / p if cfg.normalize_df else chi
        raw = gaussian_kernel(stat, scale) if stat.size else stat
        new = (1.0 - cfg.eta) * factor + cfg.eta * raw
        sums = index.row_sums(new)
        low = np.flatnonzero(sums < floor - 1e-12)
        if low.size:
            hold = np.isin(pairs[0], low) | np.isin(pairs[1], low)
            new = np.where(hold, factor, new)
            logger.warning(
                "iteration %d: %d local fit(s) at the support floor; their weights are held",
                it,
                low.size,
            )
        change = index.max_change(factor, new)
        factor = new
        weights = index.weights(factor)
        try:
            fits = local_fit_all(X, y, weights, cfg.sigma2_method)
        except NumericalError as exc:
            raise NumericalError(f"AWS iteration {it}: {exc}") from exc
        chi = wald(fits, weights)
        state.trace.append(
            {
                "iteration": it,
                "max_change": change,
                "mean_factor": float(factor.mean()) if factor.size else 1.0,
                "active_pairs": int(np.count_nonzero(factor >= cfg.theta)),
                "held_rows": int(low.size),
            }
        )
        state = replace(
            state,
            iteration=it,
            factor=factor,
            weights=weights,
            fits=fits,
            chi=chi,
            max_change=change,
            converged=change < cfg.omega,
        )
        if state.converged:
            break
    if not state.converged and cfg.max_iter > 0:
        logger.warning("AWS did not converge in %d iterations", cfg.max_iter)
    return state


def _merge_small(
    comp: np.ndarray,
    pairs: tuple[np.ndarray, np.ndarray],
    chi: np.ndarray,
    min_size: int,
    fits: LocalFits | None,
    mode: str,
) -> np.ndarray:
    comp = comp.copy()
    pi, pj = pairs
    while True:
        ids, sizes = np.unique(comp, return_counts=True)
        if ids.size <= 1:
            return comp
        small = [(s, int(np.flatnonzero(comp == g)[0]), g) for g, s in zip(ids, sizes) if s < min_size]
        if not small:
            return comp
        _, _, g = min(small)
        ci, cj = comp[pi], comp[pj]
        cross = (ci == g) ^ (cj == g)
        other = np.where(ci[cross] == g, cj[cross], ci[cross])
        if other.size:
            cand = np.unique(other)
            means = [chi[cross][other == h].mean() for h in cand]
        elif fits is not None:
            members = np.flatnonzero(comp == g)
            cand = ids[ids != g]
            means = []
            for h in cand:
                rest = np.flatnonzero(comp == h)
                a = np.repeat(members, rest.size)
                b = np.tile(rest, members.size)
                # disjoint regions share no data, so the independent form applies
                sub = "sum" if mode == "difference" else mode
                means.append(_wald_batch(fits.beta, fits.cov, a, b, sub)[0].mean())
        else:
            cand = ids[ids != g]
            means = [0.0] * cand.size
        # ties: the larger candidate, then the lower id
        best = min(range(len(cand)), key=lambda t: (means[t], -sizes[ids == cand[t]][0], cand[t]))
        comp[comp == g] = cand[best]


def _rss(X: np.ndarray, y: np.ndarray) -> float:
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    e = y - X @ beta
    return float(e @ e)


def _chow_p(X: np.ndarray, y: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """p-value of the Chow F test that index sets ``a`` and ``b`` share one
    coefficient vector (1 when either is too small to fit on its own)."""
    p = X.shape[1]
    if a.size <= p or b.size <= p:
        return 1.0
    ru = _rss(X[a], y[a]) + _rss(X[b], y[b])
    both = np.concatenate([a, b])
    rp = _rss(X[both], y[both])
    df2 = a.size + b.size - 2 * p
    if ru <= 0:
        return 0.0 if rp > 0 else 1.0
    F = max(rp - ru, 0.0) / p / (ru / df2)
    return float(stats.f.sf(F, p, df2))


def _members(comp: np.ndarray) -> dict[int, np.ndarray]:
    order = np.argsort(comp, kind="stable")
    ids, starts = np.unique(comp[order], return_index=True)
    return {int(g): m for g, m in zip(ids, np.split(order, starts[1:]))}


def _ward_split(feat: np.ndarray, adj: sparse.csr_array, members: np.ndarray, min_size: int):
    """Top split of the contiguity-constrained Ward tree of ``members``."""
    m = members.size
    if m < 2 * min_size:
        return None
    sub = adj[members][:, members]
    n_sub, _ = connected_components(sub, directed=False)
    if n_sub > 1:
        return None
    tree = AgglomerativeClustering(
        n_clusters=2, connectivity=sub, linkage="ward", compute_full_tree=False
    ).fit(feat[members])
    a = members[tree.labels_ == 0]
    b = members[tree.labels_ == 1]
    if a.size < min_size or b.size < min_size:
        return None
    return a, b


def _adjacent(comp: np.ndarray, pairs: tuple[np.ndarray, np.ndarray]) -> list[tuple[int, int]]:
    a, b = comp[pairs[0]], comp[pairs[1]]
    m = a != b
    lo, hi = np.minimum(a[m], b[m]), np.maximum(a[m], b[m])
    return sorted(set(zip(lo.tolist(), hi.tolist())))


def _chow_merge(comp, pairs, X, y, alpha: float) -> np.ndarray:
    """Merge adjacent regions, most alike first, while the Chow test of the
    pair does not reject at ``alpha``."""
    comp = comp.copy()
    cache: dict[tuple[int, int], float] = {}
    while True:
        members = _members(comp)
        best = None
        for g, h in _adjacent(comp, pairs):
            if (g, h) not in cache:
                cache[(g, h)] = _chow_p(X, y, members[g], members[h])
            pv = cache[(g, h)]
            if best is None or pv > best[0]:
                best = (pv, g, h)
        if best is None or best[0] < alpha:
            return comp
        _, g, h = best
        comp[comp == h] = g
        cache = {key: v for key, v in cache.items() if g not in key and h not in key}


def _dissolve(comp, pairs, X, y, alpha: float) -> np.ndarray:
    """Dissolve regions that add nothing once their members join neighbours.

    Each member of a region is tentatively assigned to whichever adjacent
    region's regression fits it best.  The region is dissolved when the F
    test of its p coefficients does not reject at ``alpha``; the candidate
    with the largest p-value goes first.  Mixed zones on a boundary between
    several regimes fit worse than the reassignment and disappear.
    """
    comp = comp.copy()
    n, p = X.shape
    while True:
        members = _members(comp)
        ids = sorted(members)
        if len(ids) < 2 or any(members[g].size <= p for g in ids):
            return comp
        betas = {g: np.linalg.lstsq(X[m], y[m], rcond=None)[0] for g, m in members.items()}
        rss_old = sum(float(((y[m] - X[m] @ betas[g]) ** 2).sum()) for g, m in members.items())
        dof = n - len(ids) * p
        if dof <= 0 or rss_old <= 0:
            return comp
        adj: dict[int, set[int]] = {g: set() for g in ids}
        for g, h in _adjacent(comp, pairs):
            adj[g].add(h)
            adj[h].add(g)
        best = None
        for g in ids:
            if not adj[g]:
                continue
            m = members[g]
            cand = sorted(adj[g])
            res = np.column_stack([(y[m] - X[m] @ betas[h]) ** 2 for h in cand])
            trial = comp.copy()
            trial[m] = np.asarray(cand)[np.argmin(res, axis=1)]
            tm = _members(trial)
            if any(tm[h].size <= p for h in cand):
                continue
            rss_new = sum(_rss(X[tm[h]], y[tm[h]]) for h in cand) + sum(
                float(((y[members[h]] - X[members[h]] @ betas[h]) ** 2).sum())
                for h in ids
                if h != g and h not in adj[g]
            )
            F = max(rss_new - rss_old, 0.0) / p / (rss_old / dof)
            pv = float(stats.f.sf(F, p, dof))
            if pv >= alpha and (best is None or pv > best[0]):
                best = (pv, trial)
        if best is None:
            return comp
        comp = best[1]


def _polish(comp, pairs, X, y, alpha: float, max_iter: int = 20) -> np.ndarray:
    """Move single observations to an adjacent regime whose regression fits
    them significantly better.

    The squared residual must drop by more than the upper-``alpha`` chi2(1)
    quantile times the pooled residual variance, a per-observation
    likelihood-ratio criterion.
    """
    comp = comp.copy()
    n, p = X.shape
    i, j = pairs
    cut = float(stats.chi2.isf(alpha, 1))
    for _ in range(max_iter):
        members = _members(comp)
        ids = sorted(members)
        if any(members[g].size <= p for g in ids):
            return comp
        R = np.empty((n, len(ids)))
        rss = 0.0
        for col, g in enumerate(ids):
            m = members[g]
            beta, *_ = np.linalg.lstsq(X[m], y[m], rcond=None)
            R[:, col] = (y - X @ beta) ** 2
            rss += float(R[m, col].sum())
        dof = n - len(ids) * p
        if dof <= 0 or rss <= 0:
            return comp
        s2 = rss / dof
        col_of = {g: c for c, g in enumerate(ids)}
        own = np.array([col_of[int(g)] for g in comp])
        # candidate regimes: those of geographic neighbours
        cand = np.zeros((n, len(ids)), dtype=bool)
        cand[np.arange(n), own] = True
        cand[i, own[j]] = True
        cand[j, own[i]] = True
        Rc = np.where(cand, R, np.inf)
        new = np.argmin(Rc, axis=1)
        gain = R[np.arange(n), own] - Rc[np.arange(n), new]
        move = (new != own) & (gain > cut * s2)
        if not move.any():
            return comp
        comp = comp.copy()
        comp[move] = np.asarray(ids)[new[move]]
    return comp


def extract_regimes(
    state: WeightState,
    initial: LocalWeightSet | None = None,
    cfg: AwsConfig | None = None,
    X: np.ndarray | None = None,
    y: np.ndarray | None = None,
) -> RegimeAssignment:
    """Read regimes off the final smoothing state.

    Pairs whose statistical factor is at least ``theta`` are linked and the
    connected components of that graph are the candidate regimes;
    components smaller than ``min_regime_size`` are merged, smallest first,
    into the adjacent component with the lowest mean Wald statistic across
    the connecting pairs.

    With ``cfg.readoff == "tested"`` and the data ``X``, ``y`` supplied, the
    candidates are then refined with Chow tests at level ``alpha``:

    1. a component is split in two along its contiguity-constrained Ward
       tree of local coefficients (measured as differences in fitted values
       over the sample) while the two halves differ significantly;
    2. adjacent regions that do not differ significantly are merged;
    3. regions whose members are fitted as well by their neighbouring
       regimes are dissolved into them;
    4. single observations move to an adjacent regime that fits them
       significantly better, followed by another merge pass.

    A handful of mixed observations on a regime boundary can link two
    regimes into one component; step 1 undoes such bridges.  Labels are
    numbered by decreasing regime size.
    """
    cfg = cfg or AwsConfig()
    n = state.weights.shape[0]
    p = state.fits.beta.shape[1]
    min_size = cfg.min_regime_size if cfg.min_regime_size is not None else p + 1
    pi, pj = state.pairs
    linked = state.factor >= cfg.theta
    A = sparse.csr_array((np.ones(int(linked.sum())), (pi[linked], pj[linked])), shape=(n, n))
    _, comp = connected_components(A, directed=False)
    comp = _merge_small(comp, state.pairs, state.chi, min_size, state.fits, cfg.wald_cov)
    if cfg.readoff == "tested" and X is not None and y is not None:
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        L = np.linalg.cholesky(X.T @ X / n)
        feat = state.fits.beta @ L
        A = A + A.T
        todo = [m for _, m in sorted(_members(comp).items())]
        done: list[np.ndarray] = []
        while todo:
            m = todo.pop(0)
            split = _ward_split(feat, A, m, max(min_size, p + 1))
            if split is not None and _chow_p(X, y, *split) < cfg.alpha:
                todo.extend(split)
            else:
                done.append(m)
        comp = np.empty(n, dtype=int)
        for g, m in enumerate(done):
            comp[m] = g
        comp = _chow_merge(comp, state.pairs, X, y, cfg.alpha)
        comp = _dissolve(comp, state.pairs, X, y, cfg.alpha)
        comp = _polish(comp, state.pairs, X, y, cfg.alpha)
        comp = _chow_merge(comp, state.pairs, X, y, cfg.alpha)
        comp = _merge_small(comp, state.pairs, state.chi, min_size, state.fits, cfg.wald_cov)
    return RegimeAssignment.from_labels(comp)
