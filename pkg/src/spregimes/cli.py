"""Command line pipeline: ingest, detect regimes, fit spatial models, test.

Subcommands
-----------
run        full pipeline
simulate   Monte Carlo over a synthetic scenario
bandwidth  bandwidth search only
regimes    stop after the regime read-off
fit        skip the smoothing step and fit models on given labels

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import datetime as _dt
import io
import json
import logging
import math
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from . import __version__
from .endogeneity import first_stage_diagnostics, project
from .errors import ConfigError, DataError, NumericalError, SpRegimesError
from .geodata import GeoDataset, ModelSpec, equirectangular, load_csv, log_transform, validate, write_csv
from .inference import TestResult, chow_test, lr_test, model_comparison, spatial_chow_test
from .local_regression import BandwidthScore, select_bandwidth
from .regimes import AwsConfig, RegimeAssignment, extract_regimes, run_aws
from .spatial_fit import FitResult, LogDet, build_regime_design, fit_model
from .synthetic import SyntheticScenario, adjusted_rand_index, simulate as simulate_data
from .weights import SpatialWeightMatrix, knn_row_normalized_W

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
KIND_ORDER = ("OLS", "SAE", "SAR", "SARAR")
ALL_MODELS = tuple(m for k in KIND_ORDER for m in (k, f"{k}-regimes"))
DEFAULT_MODELS = ("OLS", "OLS-regimes", "SAE", "SAE-regimes", "SARAR", "SARAR-regimes")
STAR_LEGEND = "***, **, * and . denote significance at the 0.1%, 1%, 5% and 10% levels"
PALETTE = (
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02",
    "#a6761d", "#666666", "#1f78b4", "#b2df8a", "#fb9a99", "#cab2d6",
)

CHOW_PAIRS = (("OLS", "OLS-regimes"), ("SAE", "SAE-regimes"))
LR_PAIRS = (("SARAR", "SAE"), ("SARAR-regimes", "SAE-regimes"))
COMPARISON_MODELS = ("OLS", "OLS-regimes", "SAE", "SAE-regimes")
CHOW_COLUMNS = ["Regions", "n"] + [
    f"{a} vs. {b} {col}" for a, b in CHOW_PAIRS for col in ("statistic", "p-value", "k (# par.)")
]
LR_COLUMNS = ["LR test"] + [f"{a} vs. {b} {col}" for a, b in LR_PAIRS for col in ("DF", "Chisq.", "Prob.")]
COMPARISON_COLUMNS = ["AIC", *COMPARISON_MODELS]
COEF_COLUMNS = ["model", "term", "cluster", "estimate", "se", "stars", "cell"]


@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run depends on."""

    data: str
    spec: ModelSpec
    aws: AwsConfig = field(default_factory=AwsConfig)
    w_k: int = 10
    weights: str | None = None
    k_min: int | None = None
    k_max: int | None = None
    models: tuple[str, ...] = DEFAULT_MODELS
    output: str = "spregimes-out"
    paper_df: bool = False
    drop_nonpositive: bool = False
    project_lonlat: bool = False
    truth: str | None = None
    labels: str | None = None
    region: str | None = None
    timestamp: bool = True

    def __post_init__(self) -> None:
        models = tuple(self.models)
        if not models:
            raise ConfigError("at least one model must be requested")
        bad = [m for m in models if m not in ALL_MODELS]
        if bad:
            raise ConfigError(f"unknown model(s) {bad}; choose from {list(ALL_MODELS)}")
        object.__setattr__(self, "models", tuple(m for m in ALL_MODELS if m in models))
        if self.w_k < 1:
            raise ConfigError("w_k must be at least 1")

    @property
    def region_name(self) -> str:
        return self.region or Path(self.data).stem

    @classmethod
    def from_dict(cls, d: dict[str, Any], base: Path | None = None) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        spec = d.get("spec")
        if isinstance(spec, str):
            path = Path(spec) if base is None else base / spec
            d["spec"] = _load_spec(path)
        elif isinstance(spec, dict):
            d["spec"] = ModelSpec.from_dict(spec)
        else:
            raise ConfigError("config needs a 'spec' (path or object)")
        if isinstance(d.get("aws"), dict):
            try:
                d["aws"] = AwsConfig(**{k: (math.inf if v is None and k == "tau" else v) for k, v in d["aws"].items()})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid aws settings: {exc}") from exc
        if "models" in d:
            d["models"] = tuple(d["models"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "data": self.data,
            "spec": self.spec.to_dict(),
            "aws": self.aws.to_dict(),
            "w_k": self.w_k,
            "weights": self.weights,
            "k_min": self.k_min,
            "k_max": self.k_max,
            "models": list(self.models),
            "paper_df": self.paper_df,
            "drop_nonpositive": self.drop_nonpositive,
            "project_lonlat": self.project_lonlat,
            "truth": self.truth,
            "labels": self.labels,
            "region": self.region_name,
        }


# ---------------------------------------------------------------------------
# helpers


def _load_spec(path: str | Path) -> ModelSpec:
    try:
        return ModelSpec.from_json(path)
    except OSError as exc:
        raise ConfigError(f"cannot read model spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


_STAGE_ERRORS = {"config": ConfigError, "data": DataError}


@contextlib.contextmanager
def _stage(name: str) -> Iterator[None]:
    """Prefix errors with the stage name; map foreign exceptions to the
    error class the stage implies."""
    try:
        yield
    except SpRegimesError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc
    except (OSError, ValueError, KeyError, TypeError, np.linalg.LinAlgError, FloatingPointError) as exc:
        cls = _STAGE_ERRORS.get(name)
        if cls is None:
            cls = DataError if isinstance(exc, OSError) else NumericalError
        raise cls(f"[{name}] {exc}") from exc


def _clean(v: Any) -> Any:
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def _dumps(obj: Any) -> str:
    return json.dumps(_clean(obj), indent=2, allow_nan=False) + "\n"


def _csv(df: pd.DataFrame) -> str:
    buf = io.StringIO()
    df.to_csv(buf, index=False, lineterminator="\n", float_format="%.10g")
    return buf.getvalue()


def _read_labels(path: str | Path, ids: Sequence[str]) -> np.ndarray:
    """``id,regime`` CSV aligned to ``ids``."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read labels {path}: {exc}") from exc
    if not rows or not {"id", "regime"} <= set(rows[0]):
        raise DataError(f"{path}: expected columns 'id' and 'regime'")
    table = {r["id"].strip(): r["regime"].strip() for r in rows}
    missing = [i for i in ids if i not in table]
    if missing:
        raise DataError(f"{path}: no regime for id(s) {missing[:5]}")
    try:
        return np.array([int(table[i]) for i in ids])
    except ValueError as exc:
        raise DataError(f"{path}: regimes must be integers ({exc})") from exc


def _labels_csv(ids: Sequence[str], labels: np.ndarray) -> str:
    return _csv(pd.DataFrame({"id": list(ids), "regime": labels}))


def _geojson(ds: GeoDataset, coords: np.ndarray, regimes: RegimeAssignment, betas, names) -> str:
    """Point features with the regime id, a colour per regime and the local
    coefficients."""
    feats = []
    for i in range(ds.n):
        g = int(regimes.labels[i])
        props = {"id": ds.ids[i], "regime": g, "color": PALETTE[(g - 1) % len(PALETTE)]}
        if betas is not None:
            props.update({f"beta_{nm}": float(betas[i, j]) for j, nm in enumerate(names)})
        feats.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [float(coords[i, 0]), float(coords[i, 1])]},
                "properties": props,
            }
        )
    return _dumps({"type": "FeatureCollection", "features": feats})


def _trace_jsonl(trace: list[dict[str, Any]]) -> str:
    return "".join(json.dumps(_clean(rec), allow_nan=False) + "\n" for rec in trace)


def _cell(est: float, se: float, stars: str) -> str:
    if not math.isfinite(est):
        return ""
    s = f"{est:.3f}{stars}"
    return f"{s} ({se:.3f})" if math.isfinite(se) else s


def coefficient_table(fits: Sequence[FitResult]) -> pd.DataFrame:
    """Long coefficient table: term, cluster, estimate, se, stars and the
    printed cell ``estimate<stars> (se)``."""
    rows = []
    for f in fits:
        for r in f.coef_table().to_dict(orient="records"):
            rows.append(
                {
                    "model": f.label,
                    "term": r["term"],
                    "cluster": r["cluster"],
                    "estimate": r["estimate"],
                    "se": r["se"],
                    "stars": r["stars"],
                    "cell": _cell(r["estimate"], r["se"], r["stars"]),
                }
            )
    return pd.DataFrame(rows, columns=COEF_COLUMNS)


def comparison_table(region: str, fits: dict[str, FitResult]) -> pd.DataFrame:
    """One row per region with the AIC of the four benchmark models."""
    row = {"AIC": region}
    for m in COMPARISON_MODELS:
        row[m] = fits[m].aic if m in fits else math.nan
    return pd.DataFrame([row], columns=COMPARISON_COLUMNS)


def chow_table(region: str, n: int, tests: dict[str, TestResult]) -> pd.DataFrame:
    row: dict[str, Any] = {"Regions": region, "n": n}
    for (a, b), key in zip(CHOW_PAIRS, ("chow", "spatial_chow")):
        t = tests.get(key)
        row[f"{a} vs. {b} statistic"] = t.statistic if t else math.nan
        row[f"{a} vs. {b} p-value"] = t.p_value if t else math.nan
        row[f"{a} vs. {b} k (# par.)"] = t.n_params if t else None
    return pd.DataFrame([row], columns=CHOW_COLUMNS)


def lr_table(region: str, tests: dict[str, TestResult], compat_df: bool = False) -> pd.DataFrame:
    """The DF column is ``full - nested``; ``compat_df`` prints it as
    ``nested - full``."""
    row: dict[str, Any] = {"LR test": region}
    for (a, b), key in zip(LR_PAIRS, ("lr_global", "lr_regimes")):
        t = tests.get(key)
        df = None if t is None else (-t.df if compat_df else t.df)
        row[f"{a} vs. {b} DF"] = df
        row[f"{a} vs. {b} Chisq."] = t.statistic if t else math.nan
        row[f"{a} vs. {b} Prob."] = t.p_value if t else math.nan
    return pd.DataFrame([row], columns=LR_COLUMNS)


def tests_long(tests: dict[str, TestResult]) -> pd.DataFrame:
    rows = []
    for key, t in tests.items():
        for tt, label in ((t, key), (t.secondary, f"{key}_lr")):
            if tt is None:
                continue
            rows.append(
                {
                    "test": label,
                    "models": " vs. ".join(tt.models),
                    "distribution": tt.distribution,
                    "df": " ".join(str(v) for v in tt.df) if isinstance(tt.df, tuple) else tt.df,
                    "statistic": tt.statistic,
                    "p_value": tt.p_value,
                    "n_params": tt.n_params,
                }
            )
    return pd.DataFrame(rows, columns=["test", "models", "distribution", "df", "statistic", "p_value", "n_params"])


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class Prepared:
    ds: GeoDataset
    coords_in: np.ndarray
    X: np.ndarray
    Xhat: np.ndarray
    y: np.ndarray
    names: tuple[str, ...]
    validation: dict[str, Any]
    endogeneity: dict[str, Any] | None


def prepare(cfg: RunConfig) -> Prepared:
    """Ingest, validate, log-transform and (if needed) project."""
    with _stage("ingest"):
        if not Path(cfg.data).is_file():
            raise DataError(f"data file {cfg.data} not found")
        ds = load_csv(cfg.data, cfg.spec, drop_nonpositive=cfg.drop_nonpositive)
    coords_in = np.array(ds.coords)
    if cfg.project_lonlat:
        with _stage("ingest"):
            ds = ds.with_coords(equirectangular(ds.coords))
    with _stage("validate"):
        val = validate(ds).to_dict()
    with _stage("transform"):
        dm = log_transform(ds, cfg.spec)
    endog = None
    Xhat = dm.X
    if dm.endogenous:
        with _stage("endogeneity"):
            n_exog = dm.X.shape[1] - len(dm.endogenous)
            fs = first_stage_diagnostics(
                dm.X[:, list(dm.endogenous)],
                dm.Z,
                n_exog,
                [dm.x_names[j] for j in dm.endogenous],
                cfg.spec.instrument_names,
            )
            Xhat = project(dm.X, dm.Z)
            endog = {
                "endogenous": [dm.x_names[j] for j in dm.endogenous],
                "first_stage": [f.to_dict() for f in fs],
            }
    return Prepared(ds, coords_in, dm.X, Xhat, dm.y, dm.x_names, val, endog)


def _bandwidth(cfg: RunConfig, pr: Prepared) -> tuple[int, dict[int, BandwidthScore]]:
    scores: dict[int, BandwidthScore] = {}
    with _stage("bandwidth"):
        k = select_bandwidth(pr.Xhat, pr.y, pr.ds.coords, cfg.k_min, cfg.k_max, scores=scores)
    return k, scores


def _spatial_W(cfg: RunConfig, ds: GeoDataset) -> SpatialWeightMatrix:
    with _stage("weights"):
        if cfg.weights:
            return SpatialWeightMatrix.load(cfg.weights, ids=ds.ids)
        return knn_row_normalized_W(ds.coords, cfg.w_k)


def fit_all(
    cfg: RunConfig,
    pr: Prepared,
    regimes: RegimeAssignment | None,
    W: SpatialWeightMatrix,
) -> tuple[dict[str, FitResult], list[str]]:
    """Fit the requested models in a fixed order; regime models are skipped
    (with a note) when there is a single regime."""
    fits: dict[str, FitResult] = {}
    skipped: list[str] = []
    logdet = None
    for label in cfg.models:
        kind, _, suffix = label.partition("-")
        use = regimes if suffix else None
        if suffix and (regimes is None or regimes.c < 2):
            skipped.append(f"{label}: a single regime, nothing to fit")
            continue
        if kind != "OLS" and logdet is None:
            with _stage("weights"):
                logdet = LogDet(W)
        nested = [fits[m] for m in (f"SAE{'-regimes' if suffix else ''}", f"SAR{'-regimes' if suffix else ''}") if m in fits]
        with _stage(f"fit {label}"):
            fits[label] = fit_model(kind, pr.Xhat, pr.y, W, pr.names, use, logdet, nested=nested)
    return fits, skipped


def run_tests(cfg: RunConfig, pr: Prepared, regimes, fits) -> dict[str, TestResult]:
    tests: dict[str, TestResult] = {}
    with _stage("tests"):
        if regimes is not None and regimes.c > 1 and "OLS-regimes" in fits:
            tests["chow"] = chow_test(pr.Xhat, pr.y, regimes, compat_df=cfg.paper_df)
        if "SAE-regimes" in fits:
            tests["spatial_chow"] = spatial_chow_test(
                fits.get("SAE"), fits["SAE-regimes"], compat_df=cfg.paper_df
            )
        for (full, nested), key in zip(LR_PAIRS, ("lr_global", "lr_regimes")):
            if full in fits and nested in fits:
                tests[key] = lr_test(fits[full], fits[nested])
    return tests


def decide(fits: dict[str, FitResult], regimes: RegimeAssignment | None, tests) -> dict[str, Any]:
    """Best model by AIC and what that means for the detected regimes."""
    out: dict[str, Any] = {"best_model": None, "regimes_status": None, "note": ""}
    if not fits:
        return out
    comp = model_comparison(list(fits.values())) if len(fits) > 1 else None
    best = comp.loc[0, "model"] if comp is not None else next(iter(fits))
    out["best_model"] = best
    c = regimes.c if regimes is not None else 1
    if c < 2:
        out["regimes_status"] = "none"
        out["note"] = "a single regime was detected"
    elif fits[best].regimes is not None:
        out["regimes_status"] = "preferred"
        out["note"] = f"the regime model {best} has the lowest AIC"
    else:
        out["regimes_status"] = "descriptive"
        sc = tests.get("spatial_chow")
        extra = f"; spatial Chow p-value {sc.p_value:.3g}" if sc is not None else ""
        out["note"] = (
            f"{c} regimes detected but the global {best} has the lowest AIC; "
            f"the regime assignment is kept for descriptive purposes{extra}"
        )
    return out


def _bandwidth_report(k: int, scores: dict[int, BandwidthScore], cfg: RunConfig, n: int, p: int) -> dict[str, Any]:
    s = scores.get(k)
    return {
        "k": k,
        "aicc": s.aicc if s else None,
        "hat_trace": s.hat_trace if s else None,
        "range": [cfg.k_min if cfg.k_min is not None else 2 * p, cfg.k_max if cfg.k_max is not None else n - 1],
        "evaluated": [{"k": kk, "aicc": v.aicc, "hat_trace": v.hat_trace} for kk, v in sorted(scores.items())],
    }


def run_pipeline(cfg: RunConfig, stop_after: str | None = None) -> tuple[dict[str, Any], dict[str, str]]:
    """Run the pipeline and return the report and the output files (name
    to text).  ``stop_after`` is ``"bandwidth"`` or ``"regimes"``, or
    ``"global"`` to fit the global models without smoothing; with
    ``cfg.labels`` the smoothing step is skipped."""
    with threadpool_limits(limits=1):
        return _run(cfg, stop_after)


def _run(cfg: RunConfig, stop_after: str | None) -> tuple[dict[str, Any], dict[str, str]]:
    pr = prepare(cfg)
    n, p = pr.Xhat.shape
    report: dict[str, Any] = {"tool": "spregimes", "version": __version__}
    if cfg.timestamp:
        report["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    report["config"] = cfg.to_dict()
    report["data"] = {"n": n, "inputs": list(cfg.spec.input_names), "validation": pr.validation}
    report["endogeneity"] = pr.endogeneity
    files: dict[str, str] = {}

    regimes: RegimeAssignment | None = None
    betas = None
    if cfg.labels:
        with _stage("labels"):
            regimes = RegimeAssignment.from_labels(_read_labels(cfg.labels, pr.ds.ids))
        report["regimes"] = {"source": "labels", **regimes.to_dict()}
    elif stop_after == "global":
        report["regimes"] = {"source": "none", "c": 1}
    else:
        k, scores = _bandwidth(cfg, pr)
        report["bandwidth"] = _bandwidth_report(k, scores, cfg, n, p)
        if stop_after == "bandwidth":
            files["report.json"] = _dumps(report)
            return report, files
        with _stage("aws"):
            state = run_aws(pr.Xhat, pr.y, pr.ds.coords, k, cfg.aws)
        with _stage("regimes"):
            regimes = extract_regimes(state, cfg=cfg.aws, X=pr.Xhat, y=pr.y)
        betas = state.fits.beta
        report["aws"] = {
            "iterations": state.iteration,
            "converged": state.converged,
            "max_change": state.max_change,
            "kernel_scale": cfg.aws.kernel_scale(p),
            "mean_factor": float(state.factor.mean()) if state.factor.size else 1.0,
        }
        report["regimes"] = {"source": "aws", **regimes.to_dict()}
        files["aws_trace.jsonl"] = _trace_jsonl(state.trace)
        files["local_fits.csv"] = _csv(state.fits.to_frame(pr.ds.ids, pr.coords_in, pr.names))
    if cfg.truth and regimes is not None:
        with _stage("truth"):
            truth = _read_labels(cfg.truth, pr.ds.ids)
        report["regimes"]["ari"] = adjusted_rand_index(regimes.labels, truth)
    if regimes is not None:
        files["regimes.csv"] = _labels_csv(pr.ds.ids, regimes.labels)
        files["regimes.geojson"] = _geojson(pr.ds, pr.coords_in, regimes, betas, pr.names)
    if stop_after == "regimes":
        files["report.json"] = _dumps(report)
        return report, files

    W = _spatial_W(cfg, pr.ds)
    fits, skipped = fit_all(cfg, pr, regimes, W)
    tests = run_tests(cfg, pr, regimes, fits)
    report["spatial_weights"] = {"source": cfg.weights or f"knn k={cfg.w_k}", "nnz": int(W.W.nnz)}
    report["fits"] = [f.to_dict() for f in fits.values()]
    report["skipped"] = skipped
    report["tests"] = {key: t.to_dict() for key, t in tests.items()}
    if len(fits) > 1:
        report["comparison"] = model_comparison(list(fits.values())).to_dict(orient="records")
    report["decision"] = decide(fits, regimes, tests)
    report["star_legend"] = STAR_LEGEND

    files["coefficients.csv"] = _csv(coefficient_table(list(fits.values())))
    files["comparison.csv"] = _csv(comparison_table(cfg.region_name, fits))
    files["tests.csv"] = _csv(tests_long(tests))
    files["chow_tests.csv"] = _csv(chow_table(cfg.region_name, n, tests))
    files["lr_tests.csv"] = _csv(lr_table(cfg.region_name, tests, cfg.paper_df))
    files["report.json"] = _dumps(report)
    return report, files


def write_outputs(files: dict[str, str], out: str | Path) -> list[Path]:
    """Write all files or none: they are staged in a temporary directory
    next to ``out`` and moved in only when every write succeeded."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    stage = Path(tempfile.mkdtemp(prefix=".partial-", dir=out))
    written = []
    try:
        for name, text in files.items():
            with open(stage / name, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        for name in files:
            dest = out / name
            (stage / name).replace(dest)
            written.append(dest)
    except OSError as exc:
        for path in written:
            path.unlink(missing_ok=True)
        raise ConfigError(f"cannot write outputs to {out}: {exc}") from exc
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return written


# ---------------------------------------------------------------------------
# simulation


METRIC_COLUMNS = [
    "replication", "seed", "n", "c_true", "bandwidth_k", "aws_iterations", "c_hat", "ari",
    "coef_rmse", "lambda_hat", "lambda_bias", "rho_hat", "rho_bias",
    "chow_p", "spatial_chow_p", "lr_p", "oracle_chow_p", "oracle_spatial_chow_p",
]


def _oracle_partition(labels: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """The true partition, or the halves x < 0.5 / x >= 0.5 for a single
    regime: a fixed partition for the size of the Chow tests."""
    if np.unique(labels).size > 1:
        return labels
    return np.where(coords[:, 0] < 0.5, 1, 2)


def simulate_replication(
    scenario: SyntheticScenario,
    seed: int,
    cfg: RunConfig,
    workdir: Path,
) -> dict[str, Any]:
    """One replication through the CLI pipeline on level data written as CSV."""
    land, W, ds = simulate_data(scenario, seed)
    data = workdir / "data.csv"
    write_csv(ds, data)
    spec = ModelSpec.from_dict({"response": ds.response_name, "inputs": list(ds.input_names), "coords": ["x", "y"]})
    rcfg = replace(cfg, data=str(data), spec=spec, timestamp=False, truth=None, labels=None)
    report, _ = run_pipeline(rcfg)
    fits = {f["model"]: f for f in report["fits"]}
    c_hat = report["regimes"]["c"]
    row: dict[str, Any] = {
        "replication": None, "seed": seed, "n": scenario.n, "c_true": int(np.unique(land.labels).size),
        "bandwidth_k": report["bandwidth"]["k"], "aws_iterations": report["aws"]["iterations"],
        "c_hat": c_hat,
        "ari": adjusted_rand_index(report["regimes"]["labels"], land.labels),
    }
    # per-observation coefficient error of the preferred SAE (or OLS) fit
    est = None
    for name in ("SAE-regimes", "SAE", "OLS-regimes", "OLS"):
        if name in fits:
            est = fits[name]
            break
    if est is not None:
        p = scenario.k + 1
        coefs = np.array([r["estimate"] for r in est["coefficients"][: len(est["coefficients"]) - (est["rho"] is not None) - (est["lambda"] is not None)]])
        blocks = coefs.reshape(-1, p)
        lab = np.asarray(report["regimes"]["labels"]) if est["regimes"] else np.ones(scenario.n, dtype=int)
        err = blocks[lab - 1] - scenario.betas[land.labels - 1]
        row["coef_rmse"] = float(np.sqrt(np.mean(err**2)))
    sae = fits.get("SAE-regimes") or fits.get("SAE")
    row["lambda_hat"] = sae["lambda"] if sae else None
    row["lambda_bias"] = sae["lambda"] - scenario.lam if sae and sae["lambda"] is not None else None
    sarar = fits.get("SARAR-regimes") or fits.get("SARAR")
    row["rho_hat"] = sarar["rho"] if sarar else None
    row["rho_bias"] = sarar["rho"] - scenario.rho if sarar and sarar["rho"] is not None else None
    t = report["tests"]
    row["chow_p"] = t["chow"]["p_value"] if "chow" in t else None
    row["spatial_chow_p"] = t["spatial_chow"]["p_value"] if "spatial_chow" in t else None
    lr = t.get("lr_regimes") or t.get("lr_global")
    row["lr_p"] = lr["p_value"] if lr else None

    # tests on a partition fixed in advance
    with threadpool_limits(limits=1):
        dm = log_transform(ds)
        oracle = RegimeAssignment.from_labels(_oracle_partition(land.labels, ds.coords))
        row["oracle_chow_p"] = chow_test(dm.X, dm.y, oracle, compat_df=cfg.paper_df).p_value
        if any(m.startswith("SAE") for m in cfg.models):
            ld = LogDet(W)
            g = fit_model("SAE", dm.X, dm.y, W, dm.x_names, None, ld)
            r = fit_model("SAE", dm.X, dm.y, W, dm.x_names, oracle, ld)
            row["oracle_spatial_chow_p"] = spatial_chow_test(g, r, compat_df=cfg.paper_df).p_value
        else:
            row["oracle_spatial_chow_p"] = None
    return row


def summarize(metrics: pd.DataFrame, level: float = 0.05) -> pd.DataFrame:
    """Means of the metrics and rejection rates of each test at ``level``."""
    rows = []
    for col in ("ari", "coef_rmse", "lambda_hat", "lambda_bias", "rho_hat", "rho_bias", "c_hat"):
        v = pd.to_numeric(metrics[col], errors="coerce").dropna()
        rows.append({"metric": f"mean_{col}", "value": float(v.mean()) if len(v) else math.nan, "count": len(v)})
    for col in ("chow_p", "spatial_chow_p", "lr_p", "oracle_chow_p", "oracle_spatial_chow_p"):
        v = pd.to_numeric(metrics[col], errors="coerce").dropna()
        name = col[:-2] + "_rejection"
        rows.append({"metric": name, "value": float((v < level).mean()) if len(v) else math.nan, "count": len(v)})
    return pd.DataFrame(rows, columns=["metric", "value", "count"])


def run_simulation(
    scenario: SyntheticScenario, replications: int, seed: int, cfg: RunConfig
) -> tuple[pd.DataFrame, pd.DataFrame]:
    if replications < 1:
        raise ConfigError("replications must be at least 1")
    rows = []
    with tempfile.TemporaryDirectory(prefix="spregimes-sim-") as tmp:
        for r in range(replications):
            row = simulate_replication(scenario, seed + r, cfg, Path(tmp))
            row["replication"] = r + 1
            rows.append(row)
    metrics = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    return metrics, summarize(metrics)


# ---------------------------------------------------------------------------
# argument parsing


def _add_aws_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("smoothing")
    g.add_argument("--tau", type=float, help="kernel tail probability (inf disables the statistical factor)")
    g.add_argument("--tau-mode", choices=("quantile", "literal"))
    g.add_argument("--eta", type=float)
    g.add_argument("--omega", type=float)
    g.add_argument("--max-iter", type=int)
    g.add_argument("--theta", type=float)
    g.add_argument("--min-regime-size", type=int)
    g.add_argument("--wald-cov", choices=("sum", "difference", "pooled", "own"))
    g.add_argument("--readoff", choices=("tested", "components"))
    g.add_argument("--alpha", type=float, help="test level of the tested read-off")


def _add_common(p: argparse.ArgumentParser, data: bool = True) -> None:
    if data:
        p.add_argument("data", nargs="?", help="CSV dataset")
        p.add_argument("--spec", help="model spec JSON")
    p.add_argument("--config", help="run config JSON; command line flags override it")
    p.add_argument("-o", "--out", help="output directory")
    p.add_argument("--models", nargs="+", choices=ALL_MODELS, help="models to fit")
    p.add_argument("--w-k", type=int, help="neighbours in the spatial weight matrix (default 10)")
    p.add_argument("--weights", help="spatial weight matrix file (row_id col_id weight)")
    p.add_argument("--k-min", type=int, help="smallest bandwidth searched")
    p.add_argument("--k-max", type=int, help="largest bandwidth searched")
    p.add_argument("--paper-df", action="store_true", default=None, help="Chow tests with p numerator degrees of freedom")
    p.add_argument("--drop-nonpositive", action="store_true", default=None)
    p.add_argument("--lonlat", action="store_true", default=None, help="project lon/lat coordinates before computing distances")
    p.add_argument("--truth", help="CSV with id,regime for the adjusted Rand index")
    p.add_argument("--region", help="row label in the comparison and test tables")
    p.add_argument("--no-timestamp", action="store_true", help="omit the creation time from report.json")
    p.add_argument("-v", "--verbose", action="count", default=0)
    _add_aws_args(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spregimes", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="full pipeline")
    _add_common(p)
    p = sub.add_parser("bandwidth", help="bandwidth search only")
    _add_common(p)
    p = sub.add_parser("regimes", help="stop after regime extraction")
    _add_common(p)
    p = sub.add_parser("fit", help="fit models on user-supplied regime labels")
    _add_common(p)
    p.add_argument("--labels", help="CSV with id,regime (omit to fit global models only)")
    p = sub.add_parser("simulate", help="Monte Carlo over a synthetic scenario")
    p.add_argument("scenario", help="scenario JSON")
    p.add_argument("-r", "--replications", type=int, default=1)
    p.add_argument("--seed", type=int, help="seed of the first replication (default: the scenario's)")
    p.add_argument("--emit-data", help="write the first replication as data.csv, spec.json, truth.csv here")
    _add_common(p, data=False)
    return parser


_AWS_FLAGS = {
    "tau": "tau", "tau_mode": "tau_mode", "eta": "eta", "omega": "omega", "max_iter": "max_iter",
    "theta": "theta", "min_regime_size": "min_regime_size", "wald_cov": "wald_cov",
    "readoff": "readoff", "alpha": "alpha",
}
_RUN_FLAGS = {
    "w_k": "w_k", "weights": "weights", "k_min": "k_min", "k_max": "k_max", "paper_df": "paper_df",
    "drop_nonpositive": "drop_nonpositive", "lonlat": "project_lonlat", "truth": "truth", "region": "region",
    "out": "output",
}


def config_from_args(args: argparse.Namespace) -> RunConfig:
    base: dict[str, Any] = {}
    root = None
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                base = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(base, dict):
            raise ConfigError("config must be a JSON object")
        root = Path(args.config).parent
        for key in ("data", "truth", "labels", "weights"):
            if isinstance(base.get(key), str):
                base[key] = str(root / base[key])
    aws = dict(base.pop("aws", None) or {})
    for flag, key in _AWS_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            aws[key] = v
    base["aws"] = aws
    for flag, key in _RUN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
    if getattr(args, "models", None):
        base["models"] = args.models
    if getattr(args, "data", None):
        base["data"] = args.data
    if getattr(args, "spec", None):
        base["spec"] = str(Path(args.spec).resolve()) if root is not None else args.spec
    if getattr(args, "labels", None):
        base["labels"] = args.labels
    if args.command == "simulate":
        base.setdefault("data", "")
        base.setdefault("spec", {"response": "output", "inputs": ["input1"]})
    if "data" not in base:
        raise ConfigError("no dataset given (positional argument or 'data' in --config)")
    if "spec" not in base:
        raise ConfigError("no model spec given (--spec or 'spec' in --config)")
    base["timestamp"] = not args.no_timestamp
    return RunConfig.from_dict(base, base=None)


def _summary_line(report: dict[str, Any]) -> str:
    parts = [f"n={report['data']['n']}"]
    if "bandwidth" in report:
        parts.append(f"k={report['bandwidth']['k']}")
    if "regimes" in report:
        parts.append(f"c={report['regimes']['c']}")
        if "ari" in report["regimes"]:
            parts.append(f"ARI={report['regimes']['ari']:.3f}")
    dec = report.get("decision")
    if dec and dec.get("best_model"):
        parts.append(f"best={dec['best_model']} ({dec['regimes_status']})")
    return " ".join(parts)


def _simulate_command(args: argparse.Namespace, cfg: RunConfig) -> int:
    with _stage("config"):
        scenario = SyntheticScenario.from_json(args.scenario)
    seed = scenario.seed if args.seed is None else args.seed
    out = Path(cfg.output)
    files: dict[str, str] = {}
    if args.emit_data:
        land, _, ds = simulate_data(scenario, seed)
        emit = Path(args.emit_data)
        emit.mkdir(parents=True, exist_ok=True)
        write_csv(ds, emit / "data.csv")
        spec = {"response": ds.response_name, "inputs": list(ds.input_names), "coords": ["x", "y"]}
        (emit / "spec.json").write_text(json.dumps(spec, indent=2) + "\n", encoding="utf-8")
        (emit / "truth.csv").write_text(_labels_csv(ds.ids, land.labels), encoding="utf-8")
    metrics, summary = run_simulation(scenario, args.replications, seed, cfg)
    files["metrics.csv"] = _csv(metrics)
    files["summary.csv"] = _csv(summary)
    write_outputs(files, out)
    print(summary.to_string(index=False))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _stage("config"):
            cfg = config_from_args(args)
        if args.command == "simulate":
            return _simulate_command(args, cfg)
        stop = {"bandwidth": "bandwidth", "regimes": "regimes"}.get(args.command)
        if args.command == "fit" and not cfg.labels:
            stop = "global"
        if args.command != "fit" and cfg.labels:
            raise ConfigError("--labels is only valid with the fit subcommand")
        report, files = run_pipeline(cfg, stop_after=stop)
        write_outputs(files, cfg.output)
        print(_summary_line(report))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
