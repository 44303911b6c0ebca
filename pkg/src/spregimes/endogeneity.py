"""First-stage diagnostics and the 2SLS projection of endogenous inputs.

The projection is applied once, on the full sample, before the local
regressions start; the projected design then replaces the observed one in
every local fit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import stats

from .errors import RankError

logger = logging.getLogger(__name__)

WEAK_F = 10.0


@dataclass(frozen=True)
class FirstStage:
    name: str
    r2: float
    f: float
    p_value: float
    df: tuple[int, int]
    instruments: tuple[str, ...] = ()

    @property
    def weak(self) -> bool:
        return bool(self.f < WEAK_F)

    def to_dict(self) -> dict[str, Any]:
        return {
            "variable": self.name,
            "instruments": list(self.instruments),
            "r2": self.r2,
            "F": self.f,
            "df": list(self.df),
            "p_value": self.p_value,
            "weak": self.weak,
        }


@dataclass(frozen=True)
class InstrumentSet:
    """``Z = [X1, P]`` with the positions of the endogenous columns of X."""

    Z: np.ndarray
    endogenous: tuple[int, ...]
    n_exog: int
    first_stage: tuple[FirstStage, ...] = field(default=())

    def __post_init__(self) -> None:
        _check_rank(self.Z)
        if self.Z.shape[1] - self.n_exog < len(self.endogenous):
            raise RankError("fewer external instruments than endogenous regressors")


def _check_rank(Z: np.ndarray) -> None:
    if Z.ndim != 2 or Z.shape[1] == 0:
        raise RankError("instrument matrix has no columns")
    rank = np.linalg.matrix_rank(Z)
    if rank < Z.shape[1]:
        raise RankError(f"instrument matrix has rank {rank} < {Z.shape[1]} columns")


def _rss(A: np.ndarray, v: np.ndarray) -> float:
    coef, *_ = np.linalg.lstsq(A, v, rcond=None)
    r = v - A @ coef
    return float(r @ r)


def first_stage_diagnostics(
    X2: np.ndarray,
    Z: np.ndarray,
    n_exog: int,
    names: Sequence[str] | None = None,
    instrument_names: Sequence[str] | None = None,
) -> list[FirstStage]:
    """Regress each endogenous column on ``Z`` and test the excluded instruments.

    The first ``n_exog`` columns of ``Z`` are the included exogenous
    regressors (intercept first when present).  F is the partial F of the
    remaining columns; R2 is centred when ``Z`` has a constant column and
    uncentred otherwise.  ``weak`` flags F < 10.
    """
    X2 = np.asarray(X2, dtype=float)
    if X2.ndim == 1:
        X2 = X2[:, None]
    Z = np.asarray(Z, dtype=float)
    _check_rank(Z)
    n, m = Z.shape
    q = m - n_exog
    if q < 1:
        raise RankError("no excluded instruments")
    if n <= m:
        raise RankError(f"need more observations ({n}) than instrument columns ({m})")
    names = list(names) if names is not None else [f"x{j}" for j in range(X2.shape[1])]
    inames = tuple(instrument_names) if instrument_names is not None else ()
    has_const = any(np.ptp(Z[:, j]) == 0 and Z[0, j] != 0 for j in range(m))
    out = []
    for j in range(X2.shape[1]):
        v = X2[:, j]
        rss_u = _rss(Z, v)
        rss_r = _rss(Z[:, :n_exog], v) if n_exog else float(v @ v)
        tss = float(np.sum((v - v.mean()) ** 2)) if has_const else float(v @ v)
        r2 = 1.0 - rss_u / tss if tss > 0 else 1.0
        df2 = n - m
        if rss_u <= 1e-300:
            f, pval = np.inf, 0.0
        else:
            f = ((rss_r - rss_u) / q) / (rss_u / df2)
            pval = float(stats.f.sf(f, q, df2))
        res = FirstStage(names[j], float(r2), float(f), pval, (q, df2), inames)
        if res.weak:
            logger.warning("weak instruments for %s: first-stage F = %.3g < %g", names[j], f, WEAK_F)
        out.append(res)
    return out


def project(X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Fitted values ``Z (Z'Z)^-1 Z'X`` of the first stage.

    Columns of ``X`` that coincide with a column of ``Z`` are copied through
    unchanged, so exogenous regressors are reproduced exactly.
    """
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    one_d = X.ndim == 1
    if one_d:
        X = X[:, None]
    _check_rank(Z)
    Q, _ = np.linalg.qr(Z)
    Xhat = Q @ (Q.T @ X)
    for j in range(X.shape[1]):
        if any(np.array_equal(X[:, j], Z[:, i]) for i in range(Z.shape[1])):
            Xhat[:, j] = X[:, j]
    return Xhat[:, 0] if one_d else Xhat
