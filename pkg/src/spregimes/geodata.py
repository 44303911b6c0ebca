"""Geocoded production data: model spec, CSV ingestion, validation and logs.

A dataset holds one row per farm (or firm): an identifier, two planar
coordinates, a strictly positive output quantity and a block of strictly
positive inputs.  ``log_transform`` turns it into the log-log Cobb-Douglas
design used everywhere downstream.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

_MISSING = {"", "na", "nan", "null", "none"}
EARTH_RADIUS_KM = 6371.0088


@dataclass(frozen=True)
class InputSpec:
    name: str
    endogenous: bool = False
    log: bool = True


@dataclass(frozen=True)
class InstrumentSpec:
    name: str
    log: bool = True


@dataclass(frozen=True)
class ModelSpec:
    """Which CSV columns play which role in the production function.

    Parameters
    ----------
    response : str
        Output column (levels; logged by ``log_transform``).
    inputs : sequence of InputSpec
        Ordered inputs.  ``endogenous`` marks columns to be replaced by their
        first-stage projection; ``log`` controls the transform (default on).
    instruments : sequence of InstrumentSpec
        External instruments.  Quantities (lagged inputs) are usually logged,
        prices and opportunity costs usually enter in levels.
    coords : (str, str)
        Coordinate columns, x first.
    intercept : bool
        Prepend a column of ones to the design.
    id : str
        Identifier column.
    """

    response: str
    inputs: tuple[InputSpec, ...]
    instruments: tuple[InstrumentSpec, ...] = ()
    coords: tuple[str, str] = ("lon", "lat")
    intercept: bool = True
    id: str = "id"

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "instruments", tuple(self.instruments))
        object.__setattr__(self, "coords", tuple(self.coords))
        if not self.inputs:
            raise ConfigError("model spec needs at least one input")
        if len(self.coords) != 2:
            raise ConfigError("coords must name exactly two columns")
        names = [self.response, *self.input_names, *self.instrument_names]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ConfigError(f"column used in more than one role: {sorted(dup)}")
        n_endog = sum(inp.endogenous for inp in self.inputs)
        if n_endog and len(self.instruments) < n_endog:
            raise ConfigError(
                f"{n_endog} endogenous inputs need at least as many external "
                f"instruments, got {len(self.instruments)}"
            )

    @property
    def input_names(self) -> list[str]:
        return [inp.name for inp in self.inputs]

    @property
    def instrument_names(self) -> list[str]:
        return [ins.name for ins in self.instruments]

    @property
    def endogenous(self) -> list[bool]:
        return [inp.endogenous for inp in self.inputs]

    @property
    def n_params(self) -> int:
        return len(self.inputs) + int(self.intercept)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        if not isinstance(d, dict):
            raise ConfigError("model spec must be a JSON object")
        unknown = set(d) - {"response", "inputs", "instruments", "coords", "intercept", "id"}
        if unknown:
            raise ConfigError(f"unknown model spec key(s): {sorted(unknown)}")
        try:
            inputs = [
                InputSpec(i) if isinstance(i, str) else InputSpec(**i) for i in d["inputs"]
            ]
            instruments = [
                InstrumentSpec(i) if isinstance(i, str) else InstrumentSpec(**i)
                for i in d.get("instruments", [])
            ]
            return cls(
                response=d["response"],
                inputs=tuple(inputs),
                instruments=tuple(instruments),
                coords=tuple(d.get("coords", ("lon", "lat"))),
                intercept=bool(d.get("intercept", True)),
                id=d.get("id", "id"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid model spec: {exc}") from exc

    @classmethod
    def from_json(cls, path: str | Path) -> "ModelSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict[str, Any]:
        return {
            "response": self.response,
            "inputs": [vars(i) for i in self.inputs],
            "instruments": [vars(i) for i in self.instruments],
            "coords": list(self.coords),
            "intercept": self.intercept,
            "id": self.id,
        }


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GeoDataset:
    """Immutable table of geocoded observations (levels, not logs)."""

    ids: tuple[str, ...]
    coords: np.ndarray
    response: np.ndarray
    inputs: np.ndarray
    instruments: np.ndarray | None = None
    response_name: str = "output"
    input_names: tuple[str, ...] = ()
    instrument_names: tuple[str, ...] = ()
    coord_names: tuple[str, str] = ("x", "y")

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "coords", _readonly(self.coords))
        object.__setattr__(self, "response", _readonly(self.response))
        inputs = np.asarray(self.inputs, dtype=float)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        object.__setattr__(self, "inputs", _readonly(inputs))
        if self.instruments is not None:
            ins = np.asarray(self.instruments, dtype=float)
            if ins.ndim == 1:
                ins = ins[:, None]
            object.__setattr__(self, "instruments", _readonly(ins))
        n, k = self.inputs.shape
        if not self.input_names:
            object.__setattr__(self, "input_names", tuple(f"x{j + 1}" for j in range(k)))
        if self.instruments is not None and not self.instrument_names:
            object.__setattr__(
                self,
                "instrument_names",
                tuple(f"z{j + 1}" for j in range(self.instruments.shape[1])),
            )
        object.__setattr__(self, "input_names", tuple(self.input_names))
        object.__setattr__(self, "instrument_names", tuple(self.instrument_names))

        if self.coords.shape != (n, 2) or self.response.shape != (n,):
            raise DataError("coords, response and inputs disagree on the number of rows")
        if len(self.ids) != n:
            raise DataError("ids length does not match the number of rows")
        if self.instruments is not None and self.instruments.shape[0] != n:
            raise DataError("instruments length does not match the number of rows")
        if len(set(self.ids)) != n:
            raise DataError("observation ids are not unique")
        if not np.all(np.isfinite(self.coords)):
            raise DataError("coordinates must be finite")
        if not (np.all(self.response > 0) and np.all(self.inputs > 0)):
            raise DataError("response and inputs must be strictly positive")
        if n < 2 * (k + 1):
            raise DataError(f"need at least {2 * (k + 1)} observations for {k} inputs, got {n}")

    @property
    def n(self) -> int:
        return self.response.shape[0]

    @property
    def k(self) -> int:
        return self.inputs.shape[1]

    def subset(self, rows: Sequence[int] | np.ndarray) -> "GeoDataset":
        rows = np.asarray(rows)
        return GeoDataset(
            ids=tuple(self.ids[i] for i in rows),
            coords=self.coords[rows],
            response=self.response[rows],
            inputs=self.inputs[rows],
            instruments=None if self.instruments is None else self.instruments[rows],
            response_name=self.response_name,
            input_names=self.input_names,
            instrument_names=self.instrument_names,
            coord_names=self.coord_names,
        )

    def with_coords(self, coords: np.ndarray) -> "GeoDataset":
        return GeoDataset(
            ids=self.ids,
            coords=coords,
            response=self.response,
            inputs=self.inputs,
            instruments=self.instruments,
            response_name=self.response_name,
            input_names=self.input_names,
            instrument_names=self.instrument_names,
            coord_names=self.coord_names,
        )


@dataclass(frozen=True)
class DesignMatrices:
    """Log-log design: ``y`` (n,), ``X`` (n, p) and instrument matrix ``Z``."""

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    x_names: tuple[str, ...]
    z_names: tuple[str, ...]
    endogenous: tuple[int, ...] = ()

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def exogenous(self) -> tuple[int, ...]:
        return tuple(j for j in range(self.p) if j not in self.endogenous)


def equirectangular(lonlat: np.ndarray) -> np.ndarray:
    """Project lon/lat degrees to planar km around the mean latitude."""
    lonlat = np.asarray(lonlat, dtype=float)
    lat0 = math.radians(float(np.mean(lonlat[:, 1])))
    rad = np.radians(lonlat)
    return np.column_stack(
        [EARTH_RADIUS_KM * rad[:, 0] * math.cos(lat0), EARTH_RADIUS_KM * rad[:, 1]]
    )


def _parse_column(values: Sequence[str], name: str, allow_missing: bool) -> np.ndarray:
    out = np.empty(len(values))
    for r, raw in enumerate(values):
        s = raw.strip()
        if s.lower() in _MISSING:
            if not allow_missing:
                raise DataError(f"row {r + 1}: missing value in column {name!r}")
            out[r] = np.nan
            continue
        try:
            out[r] = float(s)
        except ValueError:
            raise DataError(f"row {r + 1}: non-numeric value {raw!r} in column {name!r}") from None
    return out


def load_csv(
    path: str | Path,
    spec: ModelSpec,
    drop_nonpositive: bool = False,
    project_lonlat: bool = False,
) -> GeoDataset:
    """Read and validate a dataset described by ``spec``.

    Rows are numbered from 1 (the first line after the header) in error
    messages.  With ``drop_nonpositive`` rows with a nonpositive response or
    input are dropped with a logged warning instead of raising.  Rows with a
    missing instrument value are always dropped with a warning, since the
    first-stage projection must exist on every retained row.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    required = [spec.id, *spec.coords, spec.response, *spec.input_names, *spec.instrument_names]
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    if not rows:
        raise DataError(f"{path}: no data rows")

    def col(name: str) -> list[str]:
        return [row[name] if row[name] is not None else "" for row in rows]

    ids = [s.strip() for s in col(spec.id)]
    seen: dict[str, int] = {}
    for r, i in enumerate(ids):
        if i in seen:
            raise DataError(f"row {r + 1}: duplicate id {i!r} (first seen in row {seen[i] + 1})")
        seen[i] = r

    coords = np.column_stack([_parse_column(col(c), c, False) for c in spec.coords])
    for r in np.flatnonzero(~np.all(np.isfinite(coords), axis=1)):
        raise DataError(f"row {r + 1}: non-finite coordinate")
    response = _parse_column(col(spec.response), spec.response, False)
    inputs = np.column_stack([_parse_column(col(c), c, False) for c in spec.input_names])
    instruments = None
    if spec.instruments:
        instruments = np.column_stack(
            [_parse_column(col(c), c, True) for c in spec.instrument_names]
        )

    keep = np.ones(len(rows), dtype=bool)
    bad = (response <= 0) | np.any(inputs <= 0, axis=1)
    for r in np.flatnonzero(bad):
        cols = [spec.response] if response[r] <= 0 else []
        cols += [c for j, c in enumerate(spec.input_names) if inputs[r, j] <= 0]
        msg = f"row {r + 1}: nonpositive value in {cols}"
        if not drop_nonpositive:
            raise DataError(msg)
        logger.warning("%s; row dropped", msg)
        keep[r] = False
    if instruments is not None:
        for r in np.flatnonzero(np.any(np.isnan(instruments), axis=1) & keep):
            logger.warning("row %d: missing instrument value; row dropped", r + 1)
            keep[r] = False

    if project_lonlat:
        coords = equirectangular(coords)
    idx = np.flatnonzero(keep)
    return GeoDataset(
        ids=tuple(ids[i] for i in idx),
        coords=coords[idx],
        response=response[idx],
        inputs=inputs[idx],
        instruments=None if instruments is None else instruments[idx],
        response_name=spec.response,
        input_names=tuple(spec.input_names),
        instrument_names=tuple(spec.instrument_names),
        coord_names=tuple(spec.coords),
    )


def write_csv(ds: GeoDataset, path: str | Path, extra: dict[str, Sequence[Any]] | None = None) -> None:
    """Write ``ds`` in the ingestion schema; floats are written with ``repr``
    so that ``load_csv`` reads back identical values."""
    header = [
        "id",
        *ds.coord_names,
        ds.response_name,
        *ds.input_names,
        *ds.instrument_names,
    ]
    extra = extra or {}
    header += list(extra)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in range(ds.n):
            row: list[Any] = [ds.ids[r], *map(repr, map(float, ds.coords[r]))]
            row.append(repr(float(ds.response[r])))
            row += [repr(float(v)) for v in ds.inputs[r]]
            if ds.instruments is not None:
                row += [repr(float(v)) for v in ds.instruments[r]]
            row += [extra[c][r] for c in extra]
            w.writerow(row)


def log_transform(ds: GeoDataset, spec: ModelSpec | None = None) -> DesignMatrices:
    """Build the log-log design matrices.

    ``y`` is the log response, ``X`` is ``[1, log inputs]`` (the intercept
    column only when ``spec.intercept``) and ``Z`` is the exogenous columns
    of ``X`` followed by the external instruments (logged or not per spec).
    Without a spec every input is logged, exogenous, and an intercept is used.
    """
    if spec is None:
        spec = ModelSpec(response=ds.response_name, inputs=tuple(InputSpec(n) for n in ds.input_names))
    if len(spec.inputs) != ds.k:
        raise ConfigError("model spec and dataset disagree on the number of inputs")
    if np.any(ds.response <= 0):
        raise DataError("nonpositive response cannot be logged")
    y = np.log(ds.response)

    cols, names, endog = [], [], []
    if spec.intercept:
        cols.append(np.ones(ds.n))
        names.append("Intercept")
    for j, inp in enumerate(spec.inputs):
        v = ds.inputs[:, j]
        if inp.log:
            if np.any(v <= 0):
                raise DataError(f"nonpositive value in input {inp.name!r} cannot be logged")
            v = np.log(v)
        if inp.endogenous:
            endog.append(len(cols))
        cols.append(v)
        names.append(inp.name)
    X = np.column_stack(cols)

    zcols = [X[:, j] for j in range(X.shape[1]) if j not in endog]
    znames = [names[j] for j in range(X.shape[1]) if j not in endog]
    if spec.instruments:
        if ds.instruments is None:
            raise DataError("model spec names instruments but the dataset has none")
        for j, ins in enumerate(spec.instruments):
            v = ds.instruments[:, j]
            if ins.log:
                if np.any(v <= 0):
                    raise DataError(f"nonpositive value in instrument {ins.name!r} cannot be logged")
                v = np.log(v)
            zcols.append(v)
            znames.append(ins.name)
    Z = np.column_stack(zcols) if zcols else np.empty((ds.n, 0))
    return DesignMatrices(
        y=y, X=X, Z=Z, x_names=tuple(names), z_names=tuple(znames), endogenous=tuple(endog)
    )


@dataclass
class ValidationReport:
    duplicate_pairs: list[tuple[str, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    summary: pd.DataFrame = field(default_factory=pd.DataFrame)

    def to_dict(self) -> dict[str, Any]:
        return {
            "duplicate_pairs": [list(p) for p in self.duplicate_pairs],
            "warnings": list(self.warnings),
            "summary": {
                var: {stat: float(v) for stat, v in row.items()}
                for var, row in self.summary.iterrows()
            },
        }


def validate(ds: GeoDataset) -> ValidationReport:
    """Report duplicate locations, rank problems and summary statistics.

    The summary table has one row per variable and the columns
    ``min, median, mean, max, sd`` (sample sd).  Nothing is modified.
    """
    report = ValidationReport()
    tree = cKDTree(ds.coords)
    for a, b in sorted(tree.query_pairs(r=0.0)):
        report.duplicate_pairs.append((ds.ids[a], ds.ids[b]))
    if report.duplicate_pairs:
        report.warnings.append(
            f"{len(report.duplicate_pairs)} pair(s) of observations share coordinates"
        )

    for j, name in enumerate(ds.input_names):
        if np.ptp(ds.inputs[:, j]) == 0:
            report.warnings.append(f"input {name!r} is constant: design is rank deficient")
    X = np.column_stack([np.ones(ds.n), np.log(ds.inputs)])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        report.warnings.append("log design matrix [1, log inputs] is rank deficient")

    table = {ds.response_name: ds.response}
    table.update({name: ds.inputs[:, j] for j, name in enumerate(ds.input_names)})
    if ds.instruments is not None:
        table.update({name: ds.instruments[:, j] for j, name in enumerate(ds.instrument_names)})
    report.summary = pd.DataFrame(
        {
            name: {
                "min": np.min(v),
                "median": np.median(v),
                "mean": np.mean(v),
                "max": np.max(v),
                "sd": np.std(v, ddof=1),
            }
            for name, v in table.items()
        }
    ).T[["min", "median", "mean", "max", "sd"]]
    return report
