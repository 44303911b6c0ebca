"""Chow and spatial Chow tests, likelihood-ratio tests and AIC comparison."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import DataError, NumericalError
from .regimes import RegimeAssignment
from .spatial_fit import FitResult, _labels

LR_TOL = 1e-6


@dataclass(frozen=True)
class TestResult:
    """One hypothesis test.  ``df`` is an int for chi2 and a pair for F."""

    __test__ = False  # not a pytest class

    name: str
    statistic: float
    distribution: str
    df: Any
    p_value: float
    models: tuple[str, ...] = ()
    n_params: int | None = None
    secondary: "TestResult | None" = None
    notes: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.distribution not in ("F", "chi2"):
            raise ValueError("distribution must be 'F' or 'chi2'")
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")
        if self.distribution == "chi2" and self.statistic < 0:
            raise ValueError("chi2 statistic must be nonnegative")

    def to_dict(self) -> dict[str, Any]:
        df = list(self.df) if isinstance(self.df, tuple) else self.df
        return {
            "name": self.name,
            "statistic": float(self.statistic),
            "distribution": self.distribution,
            "df": df,
            "p_value": float(self.p_value),
            "models": list(self.models),
            "n_params": self.n_params,
            "secondary": self.secondary.to_dict() if self.secondary is not None else None,
            "notes": list(self.notes),
        }


def _rss(X: np.ndarray, y: np.ndarray) -> float:
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    e = y - X @ beta
    return float(e @ e)


def chow_test(X, y, labels, compat_df: bool = False) -> TestResult:
    """F test that all regimes share one coefficient vector.

    ``F = [(RSS_pooled - sum RSS_j) / ((c-1) p)] / [sum RSS_j / (n - c p)]``
    with p = k + 1.  ``compat_df`` uses p numerator degrees of freedom
    whatever c is.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    lab, c = _labels(labels)
    n, p = X.shape
    if lab.size != n:
        raise DataError("labels and X differ in length")
    if c < 2 or np.unique(lab).size < 2:
        raise DataError("the Chow test needs at least two regimes")
    rss_parts = 0.0
    for g in np.unique(lab):
        rows = lab == g
        if rows.sum() <= p or np.linalg.matrix_rank(X[rows]) < p:
            raise DataError(f"regime {int(g)} is too small for a separate regression ({int(rows.sum())} rows)")
        rss_parts += _rss(X[rows], y[rows])
    rss_pooled = _rss(X, y)
    c = int(np.unique(lab).size)
    df1 = p if compat_df else (c - 1) * p
    df2 = n - c * p
    if df2 <= 0:
        raise DataError("no residual degrees of freedom for the Chow test")
    num = max(rss_pooled - rss_parts, 0.0) / df1
    # regime fits that are exact up to round-off
    if rss_parts <= 1e-14 * max(rss_pooled, 1e-300):
        F, pv = (math.inf, 0.0) if num > 0 else (0.0, 1.0)
    else:
        F = num / (rss_parts / df2)
        pv = float(stats.f.sf(F, df1, df2))
    return TestResult(
        "chow", float(F), "F", (df1, df2), pv, ("OLS", "OLS-regimes"), n_params=p,
        notes=("numerator df = p convention",) if compat_df else (),
    )


def _restrictions(c: int, p: int) -> np.ndarray:
    """Rows equating each block to block 1: ``b_g - b_1 = 0`` for g = 2..c."""
    R = np.zeros(((c - 1) * p, c * p))
    for g in range(1, c):
        for j in range(p):
            R[(g - 1) * p + j, j] = -1.0
            R[(g - 1) * p + j, g * p + j] = 1.0
    return R


def spatial_chow_test(
    global_fit: FitResult | None,
    regime_fit: FitResult,
    labels=None,
    compat_df: bool = False,
) -> TestResult:
    """Wald test of equal regime coefficient blocks in a spatial fit.

    The statistic uses the regime fit's coefficient covariance; chi2 with
    ``(c-1) p`` degrees of freedom (``p`` with ``compat_df``).  When the
    global fit is given, the likelihood-ratio form is attached as
    ``secondary``.
    """
    regimes = regime_fit.regimes
    if labels is not None:
        lab, c = _labels(labels)
    elif regimes is not None:
        lab, c = regimes.labels, regimes.c
    else:
        raise DataError("the regime fit carries no regime assignment")
    if c < 2:
        raise DataError("the spatial Chow test needs at least two regimes")
    P = regime_fit.beta.size
    if P % c:
        raise DataError(f"{P} coefficients do not split into {c} regime blocks")
    p = P // c
    R = _restrictions(c, p)
    d = R @ regime_fit.beta
    V = R @ regime_fit.cov @ R.T
    if not np.all(np.isfinite(V)):
        raise NumericalError("non-finite coefficient covariance in the spatial Chow test")
    try:
        wald = float(d @ np.linalg.solve(V, d))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular covariance of the regime restrictions") from exc
    if np.linalg.cond(V) > 1e14:
        raise NumericalError("singular covariance of the regime restrictions")
    wald = max(wald, 0.0)
    df = p if compat_df else (c - 1) * p
    models = (regime_fit.kind, f"{regime_fit.kind}-regimes")
    secondary = None
    if global_fit is not None:
        if global_fit.n != regime_fit.n:
            raise DataError("global and regime fits use different samples")
        lr = 2.0 * (regime_fit.logL - global_fit.logL)
        if lr < -LR_TOL:
            raise NumericalError(f"regime fit has a lower log-likelihood than the global fit (LR = {lr:.3g})")
        lr = max(lr, 0.0)
        secondary = TestResult("spatial_chow_lr", lr, "chi2", df, float(stats.chi2.sf(lr, df)), models, n_params=p)
    return TestResult(
        "spatial_chow", wald, "chi2", df, float(stats.chi2.sf(wald, df)), models, n_params=p,
        secondary=secondary, notes=("numerator df = p convention",) if compat_df else (),
    )


def lr_test(full: FitResult, nested: FitResult, tol: float = LR_TOL) -> TestResult:
    """``2 (logL_full - logL_nested)`` against chi2 with the difference in
    parameter counts as degrees of freedom.

    A statistic below ``-tol`` means the full model was not maximised and
    raises; smaller negative values are clamped to 0.
    """
    if full.n != nested.n:
        raise DataError("models fitted on different samples")
    df = full.n_params - nested.n_params
    if df < 1:
        raise DataError(f"{full.label} does not have more parameters than {nested.label}")
    stat = 2.0 * (full.logL - nested.logL)
    if stat < -tol:
        raise NumericalError(
            f"LR statistic {stat:.3g} < 0: {full.label} has a lower log-likelihood than the nested {nested.label}"
        )
    stat = max(stat, 0.0)
    return TestResult("lr", stat, "chi2", df, float(stats.chi2.sf(stat, df)), (full.label, nested.label))


def model_comparison(fits: Sequence[FitResult]) -> pd.DataFrame:
    """Models sorted by AIC (ties keep input order) with the best flagged."""
    fits = list(fits)
    if len(fits) < 2:
        raise DataError("model comparison needs at least two fits")
    if len({f.n for f in fits}) != 1:
        raise DataError("fits use different numbers of observations")
    df = pd.DataFrame(
        {
            "model": [f.label for f in fits],
            "kind": [f.kind for f in fits],
            "regimes": [f.regimes is not None for f in fits],
            "logL": [f.logL for f in fits],
            "k": [f.n_params for f in fits],
            "AIC": [f.aic for f in fits],
        }
    )
    df = df.sort_values("AIC", kind="mergesort").reset_index(drop=True)
    df["best"] = False
    df.loc[0, "best"] = True
    return df
