"""OLS, SAE, SAR and SARAR models (global or with regime coefficient blocks)
fitted by concentrated maximum likelihood.

The model is ``y = rho W1 y + X b + u``, ``u = lam W2 u + e`` with
``e ~ N(0, sigma2 I)``.  SAE fixes ``rho = 0``, SAR fixes ``lam = 0`` and OLS
fixes both.  For given spatial parameters the coefficients and ``sigma2``
have closed forms, so only one or two parameters are searched numerically.
Standard errors come from a central-difference Hessian of the full
log-likelihood.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import pandas as pd
from scipy import optimize, sparse, stats
from scipy.sparse.linalg import splu

from .errors import NumericalError, RankError
from .regimes import RegimeAssignment
from .weights import SpatialWeightMatrix

logger = logging.getLogger(__name__)

KINDS = ("OLS", "SAE", "SAR", "SARAR")
BOUND = 0.995
SIGMA2_FLOOR = 1e-12
EIG_MAX_N = 2000
LOG2PI1 = math.log(2 * math.pi) + 1.0


def significance_stars(p: float) -> str:
    """``***`` below 0.001, ``**`` below 0.01, ``*`` below 0.05, ``.`` below 0.1."""
    if not np.isfinite(p):
        return ""
    for cut, mark in ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, ".")):
        if p < cut:
            return mark
    return ""


def _labels(labels) -> tuple[np.ndarray, int]:
    if isinstance(labels, RegimeAssignment):
        return labels.labels, labels.c
    lab = np.asarray(labels)
    if lab.ndim != 1 or lab.size == 0:
        raise ValueError("labels must be a nonempty vector")
    if not np.issubdtype(lab.dtype, np.integer):
        if not np.all(lab == np.round(lab)):
            raise ValueError("labels must be integers")
        lab = lab.astype(int)
    return lab, int(lab.max())


def build_regime_design(X: np.ndarray, labels, c: int | None = None) -> np.ndarray:
    """Block design: row i holds X's row in the column block of its regime.

    Columns are regime-major (all coefficients of regime 1, then regime 2,
    ...).  ``c`` defaults to the number of regimes in ``labels``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    lab, c_lab = _labels(labels)
    c = c_lab if c is None else int(c)
    if lab.size != X.shape[0]:
        raise ValueError("labels and X differ in length")
    if lab.min() < 1 or lab.max() > c:
        raise ValueError(f"regime label out of range 1..{c}")
    n, p = X.shape
    out = np.zeros((n, p * c))
    for g in range(c):
        rows = lab == g + 1
        out[rows, g * p : (g + 1) * p] = X[rows]
    return out


def regime_term_names(names: Sequence[str], c: int) -> tuple[list[str], list[str]]:
    """Term and cluster labels for a regime-major block design."""
    terms = [t for _ in range(c) for t in names]
    clusters = [str(g + 1) for g in range(c) for _ in names]
    return terms, clusters


class LogDet:
    """``ln|I - a W|`` for a fixed W.

    Up to ``EIG_MAX_N`` observations the eigenvalues of W are computed once
    and the log-determinant is ``sum ln|1 - a w_r|``; above that each call
    factorises ``I - a W`` with a sparse LU.
    """

    def __init__(self, W, method: str = "auto"):
        W = W.W if isinstance(W, SpatialWeightMatrix) else W
        self.W = sparse.csc_array(W) if sparse.issparse(W) else sparse.csc_array(np.asarray(W, dtype=float))
        n = self.W.shape[0]
        if method == "auto":
            method = "eig" if n <= EIG_MAX_N else "lu"
        if method not in ("eig", "lu"):
            raise ValueError("method must be 'auto', 'eig' or 'lu'")
        self.method = method
        self.n = n
        self.empty = self.W.nnz == 0
        self.eigenvalues = None
        if method == "eig" and not self.empty:
            self.eigenvalues = np.linalg.eigvals(self.W.toarray())

    def __call__(self, a: float) -> float:
        if not abs(a) < 1:
            raise ValueError(f"spatial parameter {a} outside (-1, 1)")
        if a == 0 or self.empty:
            return 0.0
        if self.method == "eig":
            return float(np.sum(np.log(np.abs(1.0 - a * self.eigenvalues))))
        lu = splu(sparse.identity(self.n, format="csc") - a * self.W)
        return float(np.sum(np.log(np.abs(lu.U.diagonal()))))


def log_det_factor(W, lam: float, method: str = "auto") -> float:
    """``ln|I - lam W|`` (see ``LogDet``)."""
    if not abs(lam) < 1:
        raise ValueError(f"spatial parameter {lam} outside (-1, 1)")
    return LogDet(W, method)(lam)


@dataclass(frozen=True)
class FitResult:
    """Estimates of one model.

    ``cov`` is the covariance of ``beta`` (the coefficient block of the
    inverse negative Hessian for ML fits).  ``rho`` / ``lam`` are ``None``
    for models without that parameter.
    """

    kind: str
    beta: np.ndarray
    se: np.ndarray
    cov: np.ndarray
    terms: tuple[str, ...]
    clusters: tuple[str, ...]
    sigma2: float
    logL: float
    n: int
    rho: float | None = None
    rho_se: float | None = None
    lam: float | None = None
    lam_se: float | None = None
    regimes: RegimeAssignment | None = None
    at_bound: bool = False
    identification_caveat: bool = False
    identification_p: float | None = None
    nesting_fallback: bool = False
    dof: int | None = None
    notes: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        for name in ("rho", "lam"):
            v = getattr(self, name)
            if v is not None and not abs(v) < 1:
                raise ValueError(f"{name} = {v} outside (-1, 1)")

    @property
    def has_regimes(self) -> bool:
        return self.regimes is not None and self.regimes.c > 1

    @property
    def label(self) -> str:
        return f"{self.kind}-regimes" if self.regimes is not None else self.kind

    @property
    def n_params(self) -> int:
        """Coefficients + spatial parameters + sigma2."""
        return self.beta.size + (self.rho is not None) + (self.lam is not None) + 1

    @property
    def aic(self) -> float:
        return 2.0 * self.n_params - 2.0 * self.logL

    def p_values(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.abs(self.beta / self.se)
        if self.dof is not None:
            return 2.0 * stats.t.sf(z, self.dof)
        return 2.0 * stats.norm.sf(z)

    def coef_table(self) -> pd.DataFrame:
        """One row per coefficient (then rho and lambda): term, cluster,
        estimate, se, statistic, p_value, stars."""
        pv = self.p_values()
        rows = [
            {
                "term": t,
                "cluster": c,
                "estimate": float(b),
                "se": float(s),
                "statistic": float(b / s) if s > 0 else math.nan,
                "p_value": float(p),
                "stars": significance_stars(p),
            }
            for t, c, b, s, p in zip(self.terms, self.clusters, self.beta, self.se, pv)
        ]
        for name, v, s in (("rho", self.rho, self.rho_se), ("lambda", self.lam, self.lam_se)):
            if v is None:
                continue
            s = math.nan if s is None else s
            z = v / s if s and np.isfinite(s) and s > 0 else math.nan
            p = float(2 * stats.norm.sf(abs(z))) if np.isfinite(z) else math.nan
            rows.append(
                {"term": name, "cluster": "", "estimate": v, "se": s, "statistic": z,
                 "p_value": p, "stars": significance_stars(p)}
            )
        return pd.DataFrame(rows, columns=["term", "cluster", "estimate", "se", "statistic", "p_value", "stars"])

    def fitted_mean(self, X: np.ndarray, W1=None) -> np.ndarray:
        """Expected log output.  For OLS and SAE this is ``X beta`` whatever
        lambda is; a nonzero rho needs ``W1`` for ``(I - rho W1)^-1 X beta``."""
        mu = np.asarray(X, dtype=float) @ self.beta
        if self.rho is None or self.rho == 0:
            return mu
        if W1 is None:
            raise ValueError("the reduced form of a lag model needs W1")
        W = W1.W if isinstance(W1, SpatialWeightMatrix) else sparse.csr_array(W1)
        A = sparse.identity(W.shape[0], format="csc") - self.rho * sparse.csc_array(W)
        return splu(A).solve(mu)

    def elasticities(self) -> dict[str, float]:
        """Coefficients read directly as output elasticities.

        Valid without a spatial lag; with rho != 0 the effects would need a
        direct/indirect decomposition, which is not implemented.
        """
        if self.rho is not None and self.rho != 0:
            raise NotImplementedError(
                "with a spatial lag (rho != 0) coefficients are not elasticities; "
                "direct/indirect/total effects are not implemented"
            )
        return {
            (t if c in ("", "global") else f"{t} [cluster {c}]"): float(b)
            for t, c, b in zip(self.terms, self.clusters, self.beta)
        }

    def to_dict(self) -> dict[str, Any]:
        def num(v):
            if v is None:
                return None
            v = float(v)
            return v if math.isfinite(v) else None

        return {
            "model": self.label,
            "kind": self.kind,
            "regimes": self.regimes is not None,
            "c": self.regimes.c if self.regimes is not None else 1,
            "n": self.n,
            "n_params": self.n_params,
            "logL": num(self.logL),
            "aic": num(self.aic),
            "sigma2": num(self.sigma2),
            "rho": num(self.rho),
            "rho_se": num(self.rho_se),
            "lambda": num(self.lam),
            "lambda_se": num(self.lam_se),
            "at_bound": self.at_bound,
            "identification_caveat": self.identification_caveat,
            "identification_p": num(self.identification_p),
            "nesting_fallback": self.nesting_fallback,
            "coefficients": [
                {k: (num(v) if isinstance(v, float) else v) for k, v in row.items()}
                for row in self.coef_table().to_dict(orient="records")
            ],
            "notes": list(self.notes),
        }


# ---------------------------------------------------------------------------
# likelihood machinery


def _check_design(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ValueError("X and y differ in length")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("X and y must be finite")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankError(f"design matrix has rank {np.linalg.matrix_rank(X)} < {X.shape[1]} columns")
    if X.shape[0] <= X.shape[1]:
        raise RankError("need more observations than coefficients")
    return X, y


def _as_W(W, n: int) -> sparse.csr_array:
    if W is None:
        return sparse.csr_array((n, n))
    W = W.W if isinstance(W, SpatialWeightMatrix) else W
    W = sparse.csr_array(W) if sparse.issparse(W) else sparse.csr_array(np.asarray(W, dtype=float))
    if W.shape != (n, n):
        raise ValueError(f"weight matrix is {W.shape}, expected {(n, n)}")
    return W


class _Model:
    """Concentrated and full log-likelihood of the SARAR family for fixed data."""

    def __init__(self, X, y, W1=None, W2=None, logdet1: LogDet | None = None, logdet2: LogDet | None = None):
        self.X, self.y = X, y
        self.n, self.p = X.shape
        self.W1 = _as_W(W1, self.n)
        self.W2 = _as_W(W2, self.n)
        self.W1y = self.W1 @ y
        self.W2X = self.W2 @ X
        self.W2y = self.W2 @ y
        self.W2W1y = self.W2 @ self.W1y
        self.ld1 = logdet1 if logdet1 is not None else (LogDet(self.W1) if self.W1.nnz else None)
        self.ld2 = logdet2 if logdet2 is not None else (LogDet(self.W2) if self.W2.nnz else None)

    def _filtered(self, rho: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
        # B A y and B X with A = I - rho W1, B = I - lam W2
        Ay = self.y - rho * self.W1y
        BAy = Ay - lam * (self.W2y - rho * self.W2W1y)
        BX = self.X - lam * self.W2X
        return BAy, BX

    def _logdets(self, rho: float, lam: float) -> float:
        out = 0.0
        if rho != 0:
            out += self.ld1(rho) if self.ld1 is not None else 0.0
        if lam != 0:
            out += self.ld2(lam) if self.ld2 is not None else 0.0
        return out

    def profile(self, rho: float, lam: float) -> tuple[float, np.ndarray, float]:
        """Concentrated logL, beta and sigma2 at (rho, lam)."""
        ys, Xs = self._filtered(rho, lam)
        beta, *_ = np.linalg.lstsq(Xs, ys, rcond=None)
        e = ys - Xs @ beta
        sigma2 = max(float(e @ e) / self.n, SIGMA2_FLOOR)
        logL = -0.5 * self.n * (LOG2PI1 + math.log(sigma2)) + self._logdets(rho, lam)
        return logL, beta, sigma2

    def full(self, beta: np.ndarray, rho: float, lam: float, sigma2: float) -> float:
        if sigma2 <= 0 or not abs(rho) < 1 or not abs(lam) < 1:
            return -math.inf
        ys, Xs = self._filtered(rho, lam)
        e = ys - Xs @ beta
        return (
            -0.5 * self.n * math.log(2 * math.pi * sigma2)
            - float(e @ e) / (2 * sigma2)
            + self._logdets(rho, lam)
        )


def _hessian(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference Hessian with steps ``step * max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    m = x.size
    h = step * np.maximum(1.0, np.abs(x))
    H = np.empty((m, m))
    f0 = f(x)
    for a in range(m):
        ea = np.zeros(m)
        ea[a] = h[a]
        H[a, a] = (f(x + ea) - 2 * f0 + f(x - ea)) / h[a] ** 2
        for b in range(a + 1, m):
            eb = np.zeros(m)
            eb[b] = h[b]
            v = (f(x + ea + eb) - f(x + ea - eb) - f(x - ea + eb) + f(x - ea - eb)) / (4 * h[a] * h[b])
            H[a, b] = H[b, a] = v
    return H


def _ml_covariance(model: _Model, beta, rho, lam, sigma2, free: Sequence[str]) -> np.ndarray:
    """Inverse negative Hessian over (beta, free spatial params, sigma2)."""
    p = beta.size

    def unpack(t):
        r = l = 0.0
        k = p
        if "rho" in free:
            r = t[k]
            k += 1
        if "lam" in free:
            l = t[k]
            k += 1
        return t[:p], r, l, t[k]

    theta = np.concatenate([beta, [rho] if "rho" in free else [], [lam] if "lam" in free else [], [sigma2]])
    # stay inside the admissible box for the difference stencil
    for idx in range(p, theta.size - 1):
        theta[idx] = float(np.clip(theta[idx], -BOUND + 1e-4, BOUND - 1e-4))
    H = _hessian(lambda t: model.full(*unpack(t)), theta)
    if not np.all(np.isfinite(H)):
        raise NumericalError("non-finite Hessian of the log-likelihood")
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular Hessian of the log-likelihood") from exc
    return 0.5 * (cov + cov.T)


def _se(cov_diag: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.where(cov_diag > 0, np.sqrt(np.abs(cov_diag)), np.nan)


def _names(names, p, regimes: RegimeAssignment | None) -> tuple[tuple[str, ...], tuple[str, ...]]:
    if regimes is not None and p % regimes.c == 0 and (names is None or len(names) * regimes.c == p):
        if names is None:
            names = [f"b{j}" for j in range(p // regimes.c)]
        terms, clusters = regime_term_names(names, regimes.c)
        return tuple(terms), tuple(clusters)
    if names is None:
        names = [f"b{j}" for j in range(p)]
    if len(names) != p:
        raise ValueError(f"{len(names)} names for {p} coefficients")
    return tuple(names), tuple("global" for _ in range(p))


def _same_W(W1, W2) -> bool:
    if W1 is W2:
        return True
    a = W1.W if isinstance(W1, SpatialWeightMatrix) else W1
    b = W2.W if isinstance(W2, SpatialWeightMatrix) else W2
    if a is None or b is None:
        return False
    a, b = sparse.csr_array(a), sparse.csr_array(b)
    return a.shape == b.shape and (a != b).nnz == 0


def _identification(beta, cov, regimes) -> float | None:
    """p-value of the joint Wald test that every regime coefficient is zero."""
    if regimes is None or regimes.c < 2:
        return None
    try:
        stat = float(beta @ np.linalg.solve(cov, beta))
    except np.linalg.LinAlgError:
        return None
    return float(stats.chi2.sf(stat, beta.size))


def ols_fit(X, y, names=None, regimes: RegimeAssignment | None = None) -> FitResult:
    """Least squares with Gaussian log-likelihood
    ``-(n/2)(ln 2pi + 1) - (n/2) ln(RSS/n)`` (RSS/n floored at 1e-12).

    Standard errors use ``RSS / (n - p)``; ``sigma2`` is the ML value RSS/n.
    """
    X, y = _check_design(X, y)
    n, p = X.shape
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    e = y - X @ beta
    rss = float(e @ e)
    sigma2 = max(rss / n, SIGMA2_FLOOR)
    logL = -0.5 * n * (LOG2PI1 + math.log(sigma2))
    s2 = rss / (n - p)
    cov = s2 * np.linalg.inv(X.T @ X)
    cov = 0.5 * (cov + cov.T)
    terms, clusters = _names(names, p, regimes)
    return FitResult(
        kind="OLS", beta=beta, se=_se(np.diag(cov)), cov=cov, terms=terms, clusters=clusters,
        sigma2=sigma2, logL=logL, n=n, regimes=regimes, dof=n - p,
    )


def _grid_then_brent(f, grid_points: int = 41) -> tuple[float, float]:
    """Maximise ``f`` on (-BOUND, BOUND): coarse grid, then bounded Brent in
    the bracket around the best grid point."""
    grid = np.linspace(-BOUND, BOUND, grid_points)
    vals = np.array([f(a) for a in grid])
    if not np.any(np.isfinite(vals)):
        raise NumericalError("log-likelihood is not finite anywhere on the grid")
    b = int(np.nanargmax(np.where(np.isfinite(vals), vals, -np.inf)))
    lo, hi = grid[max(b - 1, 0)], grid[min(b + 1, grid.size - 1)]
    res = optimize.minimize_scalar(lambda a: -f(a), bounds=(lo, hi), method="bounded", options={"xatol": 1e-8})
    a, v = float(res.x), -float(res.fun)
    if vals[b] > v:
        a, v = float(grid[b]), float(vals[b])
    return a, v


def _one_param_fit(kind, X, y, W, names, regimes, logdet) -> FitResult:
    X, y = _check_design(X, y)
    n, p = X.shape
    Wm = _as_W(W, n)
    if kind == "SAE":
        model = _Model(X, y, W2=Wm, logdet2=logdet)
        prof = lambda a: model.profile(0.0, a)
    else:
        model = _Model(X, y, W1=Wm, logdet1=logdet)
        prof = lambda a: model.profile(a, 0.0)
    terms, clusters = _names(names, p, regimes)
    if Wm.nnz == 0:
        base = ols_fit(X, y, names, regimes)
        logL, beta, sigma2 = prof(0.0)
        cov = sigma2 * np.linalg.inv(X.T @ X)
        extra = {"lam": 0.0, "lam_se": math.nan} if kind == "SAE" else {"rho": 0.0, "rho_se": math.nan}
        return FitResult(
            kind=kind, beta=beta, se=_se(np.diag(cov)), cov=cov, terms=terms, clusters=clusters,
            sigma2=sigma2, logL=base.logL, n=n, regimes=regimes,
            notes=("empty weight matrix: spatial parameter fixed at 0",), **extra,
        )
    a, _ = _grid_then_brent(lambda v: prof(v)[0])
    logL, beta, sigma2 = prof(a)
    at_bound = abs(a) > BOUND - 1e-6
    if at_bound:
        logger.warning("%s: spatial parameter at the optimiser bound (%.4f)", kind, a)
    free = ("lam",) if kind == "SAE" else ("rho",)
    cov = _ml_covariance(model, beta, 0.0 if kind == "SAE" else a, a if kind == "SAE" else 0.0, sigma2, free)
    se_all = _se(np.diag(cov))
    extra = {"lam": a, "lam_se": float(se_all[p])} if kind == "SAE" else {"rho": a, "rho_se": float(se_all[p])}
    return FitResult(
        kind=kind, beta=beta, se=se_all[:p], cov=cov[:p, :p], terms=terms, clusters=clusters,
        sigma2=sigma2, logL=logL, n=n, regimes=regimes, at_bound=at_bound, **extra,
    )


def sae_fit(X, y, W2, names=None, regimes: RegimeAssignment | None = None, logdet: LogDet | None = None) -> FitResult:
    """Spatial error model by concentrated ML over lambda in (-0.995, 0.995).

    An empty ``W2`` gives the OLS fit with lambda reported as 0.
    """
    return _one_param_fit("SAE", X, y, W2, names, regimes, logdet)


def sar_fit(X, y, W1, names=None, regimes: RegimeAssignment | None = None, logdet: LogDet | None = None) -> FitResult:
    """Spatial lag model by concentrated ML over rho in (-0.995, 0.995)."""
    return _one_param_fit("SAR", X, y, W1, names, regimes, logdet)


def sarar_fit(
    X,
    y,
    W1,
    W2,
    names=None,
    regimes: RegimeAssignment | None = None,
    logdet1: LogDet | None = None,
    logdet2: LogDet | None = None,
    nested: Sequence[FitResult] = (),
) -> FitResult:
    """Lag plus error model: 21 x 21 grid over (rho, lam), then Nelder-Mead
    from the best grid point and from the SAE and SAR optima.

    The result never has a lower log-likelihood than the SAE or SAR fit on
    the same data (those optima are admissible SARAR points); if the polish
    ends below them the better nested optimum is returned with
    ``nesting_fallback`` set.  Pass already computed SAE/SAR fits as
    ``nested`` to skip refitting them.
    """
    X, y = _check_design(X, y)
    n, p = X.shape
    W1m, W2m = _as_W(W1, n), _as_W(W2, n)
    if logdet1 is None and W1m.nnz:
        logdet1 = LogDet(W1m)
    if logdet2 is None:
        logdet2 = logdet1 if _same_W(W1m, W2m) and W2m.nnz else (LogDet(W2m) if W2m.nnz else None)
    model = _Model(X, y, W1m, W2m, logdet1, logdet2)
    terms, clusters = _names(names, p, regimes)

    def negf(t):
        if not (abs(t[0]) <= BOUND and abs(t[1]) <= BOUND):
            return math.inf
        return -model.profile(float(t[0]), float(t[1]))[0]

    grid = np.linspace(-BOUND, BOUND, 21)
    best = min(((negf((r, l)), r, l) for r in grid for l in grid))
    if not math.isfinite(best[0]):
        raise NumericalError("SARAR log-likelihood is not finite anywhere on the grid")

    sae = next((f for f in nested if f.kind == "SAE"), None)
    sar = next((f for f in nested if f.kind == "SAR"), None)
    if sae is None:
        sae = sae_fit(X, y, W2m, names, regimes, logdet2)
    if sar is None:
        sar = sar_fit(X, y, W1m, names, regimes, logdet1)
    starts = [(best[1], best[2]), (0.0, sae.lam or 0.0), (sar.rho or 0.0, 0.0)]
    cands = []
    for s in starts:
        res = optimize.minimize(
            negf, np.array(s, dtype=float), method="Nelder-Mead",
            bounds=[(-BOUND, BOUND), (-BOUND, BOUND)],
            options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 2000},
        )
        cands.append((float(res.fun), float(res.x[0]), float(res.x[1])))
    cands.append(best)
    fbest, rho, lam = min(cands)
    logL = -fbest

    fallback = False
    target = max(sae.logL, sar.logL)
    if logL < target - 1e-6:
        fallback = True
        if sae.logL >= sar.logL:
            rho, lam = 0.0, float(sae.lam or 0.0)
        else:
            rho, lam = float(sar.rho or 0.0), 0.0
        logger.warning("SARAR polish ended below a nested optimum; using the nested point")
    logL, beta, sigma2 = model.profile(rho, lam)
    at_bound = max(abs(rho), abs(lam)) > BOUND - 1e-6
    free = [v for v, W in (("rho", W1m), ("lam", W2m)) if W.nnz]
    cov = _ml_covariance(model, beta, rho, lam, sigma2, free)
    se_all = _se(np.diag(cov))
    k = p
    rho_se = lam_se = math.nan
    if "rho" in free:
        rho_se = float(se_all[k])
        k += 1
    if "lam" in free:
        lam_se = float(se_all[k])
    same = _same_W(W1m, W2m)
    ident_p = _identification(beta, cov[:p, :p], regimes) if same else None
    notes = []
    if same and regimes is not None and regimes.c > 1:
        notes.append("W1 = W2: identification rests on jointly significant regime coefficients")
    return FitResult(
        kind="SARAR", beta=beta, se=se_all[:p], cov=cov[:p, :p], terms=terms, clusters=clusters,
        sigma2=sigma2, logL=logL, n=n, rho=rho, rho_se=rho_se, lam=lam, lam_se=lam_se,
        regimes=regimes, at_bound=at_bound,
        identification_caveat=bool(same and regimes is not None and regimes.c > 1),
        identification_p=ident_p, nesting_fallback=fallback, notes=tuple(notes),
    )


def aic(fit: FitResult) -> float:
    """``2 k - 2 logL`` with k = coefficients + spatial parameters + 1."""
    if not math.isfinite(fit.logL):
        raise ValueError("log-likelihood is not finite")
    return fit.aic


def fit_model(
    kind: str,
    X,
    y,
    W=None,
    names=None,
    regimes: RegimeAssignment | None = None,
    logdet: LogDet | None = None,
    nested: Sequence[FitResult] = (),
) -> FitResult:
    """Dispatch on ``kind``; with ``regimes`` the block design is built here
    from the global ``X``.  ``W`` serves as both W1 and W2."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if regimes is not None:
        Xd = build_regime_design(X, regimes)
    else:
        Xd = X
    if kind == "OLS":
        return ols_fit(Xd, y, names, regimes)
    if kind == "SAE":
        return sae_fit(Xd, y, W, names, regimes, logdet)
    if kind == "SAR":
        return sar_fit(Xd, y, W, names, regimes, logdet)
    return sarar_fit(Xd, y, W, W, names, regimes, logdet, logdet, nested=nested)
