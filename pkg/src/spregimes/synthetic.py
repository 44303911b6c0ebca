"""Data-generating processes with known regimes, spatial parameters and
endogeneity, plus the adjusted Rand index used to score regime recovery."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.special import comb

from .errors import ConfigError
from .geodata import GeoDataset
from .weights import SpatialWeightMatrix, knn_row_normalized_W


@dataclass(frozen=True)
class SyntheticScenario:
    """Regime-wise Cobb-Douglas data with spatial lag and error processes.

    ``betas`` has one row per regime: intercept followed by the k input
    elasticities.  Log inputs are drawn iid normal with ``input_mean`` and
    ``input_sd`` (so inputs in levels are log-normal).
    """

    n: int
    betas: np.ndarray
    lam: float = 0.0
    rho: float = 0.0
    sigma_eps: float = 0.1
    input_mean: np.ndarray | None = None
    input_sd: np.ndarray | None = None
    seed: int = 0
    centers: np.ndarray | None = None
    w_k: int = 10
    name: str = "scenario"

    def __post_init__(self) -> None:
        betas = np.atleast_2d(np.asarray(self.betas, dtype=float))
        object.__setattr__(self, "betas", betas)
        k = betas.shape[1] - 1
        if k < 1:
            raise ConfigError("betas need an intercept and at least one elasticity")
        mean = np.zeros(k) if self.input_mean is None else np.asarray(self.input_mean, float)
        sd = np.ones(k) if self.input_sd is None else np.asarray(self.input_sd, float)
        if mean.shape != (k,) or sd.shape != (k,):
            raise ConfigError("input_mean/input_sd must have one entry per input")
        object.__setattr__(self, "input_mean", mean)
        object.__setattr__(self, "input_sd", sd)
        if self.centers is not None:
            centers = np.asarray(self.centers, dtype=float)
            if centers.shape != (self.c, 2):
                raise ConfigError("centers must be a (c, 2) array")
            object.__setattr__(self, "centers", centers)
        if self.c > self.n:
            raise ConfigError("more regimes than observations")
        if not (abs(self.lam) < 1 and abs(self.rho) < 1):
            raise ConfigError("|lam| and |rho| must be below 1")
        if not self.sigma_eps > 0:
            raise ConfigError("sigma_eps must be positive")

    @property
    def c(self) -> int:
        return self.betas.shape[0]

    @property
    def k(self) -> int:
        return self.betas.shape[1] - 1

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SyntheticScenario":
        known = {
            "n", "betas", "lam", "rho", "sigma_eps", "input_mean", "input_sd",
            "seed", "centers", "w_k", "name",
        }
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario key(s): {sorted(unknown)}")
        if "n" not in d or "betas" not in d:
            raise ConfigError("scenario needs 'n' and 'betas'")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid scenario: {exc}") from exc

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticScenario":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "n": self.n,
            "betas": self.betas.tolist(),
            "lambda": self.lam,
            "rho": self.rho,
            "sigma_eps": self.sigma_eps,
            "input_mean": self.input_mean.tolist(),
            "input_sd": self.input_sd.tolist(),
            "seed": self.seed,
            "centers": None if self.centers is None else self.centers.tolist(),
            "w_k": self.w_k,
        }


@dataclass(frozen=True)
class Landscape:
    coords: np.ndarray
    labels: np.ndarray
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))


def gen_landscape(n: int, c: int, seed: int, centers: np.ndarray | None = None) -> Landscape:
    """Uniform points on the unit square labelled by their nearest regime
    centre (a Voronoi partition, hence contiguous regimes).  Labels are
    1..c by centre; a centre that attracts no point leaves its label unused."""
    if c > n:
        raise ConfigError("more regimes than observations")
    rng = np.random.default_rng(seed)
    coords = rng.uniform(size=(n, 2))
    ctr = rng.uniform(size=(c, 2)) if centers is None else np.asarray(centers, dtype=float)
    d = ((coords[:, None, :] - ctr[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d, axis=1) + 1
    return Landscape(coords, labels, ctr)


def regime_design(X: np.ndarray, labels: np.ndarray, c: int) -> np.ndarray:
    n, p = X.shape
    out = np.zeros((n, p * c))
    for g in range(c):
        rows = labels == g + 1
        out[rows, g * p : (g + 1) * p] = X[rows]
    return out


def gen_data(
    scenario: SyntheticScenario,
    landscape: Landscape,
    W: SpatialWeightMatrix | None = None,
    seed: int | None = None,
) -> GeoDataset:
    """Draw a dataset in levels from the solved spatial model

    ``log y = (I - rho W)^-1 (X_regimes beta + (I - lam W)^-1 eps)``.

    Exponentiating makes ``log_transform`` recover the linear model exactly.
    """
    seed = scenario.seed if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    n, k = landscape.coords.shape[0], scenario.k
    if W is None:
        W = knn_row_normalized_W(landscape.coords, scenario.w_k)
    logx = scenario.input_mean + scenario.input_sd * rng.standard_normal((n, k))
    X = np.column_stack([np.ones(n), logx])
    mean = np.einsum("ij,ij->i", X, scenario.betas[landscape.labels - 1])
    eps = scenario.sigma_eps * rng.standard_normal(n)
    I = sparse.identity(n, format="csc")
    u = splu((I - scenario.lam * W.W).tocsc()).solve(eps) if scenario.lam else eps
    logy = mean + u
    if scenario.rho:
        logy = splu((I - scenario.rho * W.W).tocsc()).solve(logy)
    return GeoDataset(
        ids=tuple(str(i + 1) for i in range(n)),
        coords=landscape.coords,
        response=np.exp(logy),
        inputs=np.exp(logx),
        response_name="output",
        input_names=tuple(f"input{j + 1}" for j in range(k)),
        coord_names=("x", "y"),
    )


def simulate(scenario: SyntheticScenario, seed: int | None = None):
    """Landscape, weight matrix and dataset for one replication."""
    seed = scenario.seed if seed is None else seed
    land = gen_landscape(scenario.n, scenario.c, seed, scenario.centers)
    W = knn_row_normalized_W(land.coords, scenario.w_k)
    return land, W, gen_data(scenario, land, W, seed)


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Hubert-Arabie adjusted Rand index of two partitions."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError("label vectors differ in length")
    n = a.size
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia.ravel(), ib.ravel()), 1)
    sum_cells = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    total = comb(n, 2)
    expected = sum_a * sum_b / total if total else 0.0
    top = 0.5 * (sum_a + sum_b)
    if top == expected:
        return 1.0
    return float((sum_cells - expected) / (top - expected))


@dataclass(frozen=True)
class EndogenousTruth:
    beta: np.ndarray
    endogenous: int
    first_stage_strength: float


def endogenous_scenario(
    n: int,
    seed: int,
    strength: float = 2.0,
    gamma: float = 1.0,
    delta: float = 1.0,
    beta: tuple[float, float, float] = (1.0, 0.5, 0.3),
) -> tuple[GeoDataset, EndogenousTruth]:
    """Omitted-variable endogeneity with one valid external instrument.

    ``log x2 = strength * z + gamma * w + v`` and the error carries
    ``delta * w``, so OLS on ``log x2`` is biased by roughly
    ``gamma * delta / (strength^2 + gamma^2 + 1)`` (positive when gamma and
    delta share a sign).  The instrument ``z`` is stored in levels and may be
    negative; use ``log=False`` for it in the model spec.  ``strength=0``
    gives an irrelevant instrument.
    """
    rng = np.random.default_rng([seed, 7])
    coords = rng.uniform(size=(n, 2))
    x1 = rng.standard_normal(n)
    z = rng.standard_normal(n)
    w = rng.standard_normal(n)
    x2 = strength * z + gamma * w + rng.standard_normal(n)
    eps = delta * w + rng.standard_normal(n)
    b = np.asarray(beta, dtype=float)
    logy = b[0] + b[1] * x1 + b[2] * x2 + eps
    ds = GeoDataset(
        ids=tuple(str(i + 1) for i in range(n)),
        coords=coords,
        response=np.exp(logy),
        inputs=np.exp(np.column_stack([x1, x2])),
        instruments=z[:, None],
        response_name="output",
        input_names=("exog_input", "endog_input"),
        instrument_names=("instrument",),
        coord_names=("x", "y"),
    )
    return ds, EndogenousTruth(beta=b, endogenous=2, first_stage_strength=strength)
