"""Experiment orchestration: fit, time, score and report each method."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import STGPR_KERNEL, mtkronprod_fit, stgpr_fit
from .io import load_matrix
from .kernels import KernelSpec
from .model import ModelConfig, fit
from .normative import (
    ROBUST_MEANS,
    abnormality_probability,
    abnormality_score,
    auc,
    compute_npm,
    fit_gevd,
    r_squared,
)
from .optimize import OptimizerSettings
from .synthetic import SyntheticSpec, generate_synthetic

log = logging.getLogger(__name__)

SMTGPR = "S-MTGPR"
STGPR = "STGPR"
KRONPROD = "MT-Kronprod"
METHODS = (STGPR, KRONPROD, SMTGPR)
_METHOD_ALIASES = {
    "s-mtgpr": SMTGPR,
    "smtgpr": SMTGPR,
    "stgpr": STGPR,
    "mt-kronprod": KRONPROD,
    "mtkronprod": KRONPROD,
    "kronprod": KRONPROD,
}
GEV_REFERENCES = ("normal", "all")
FILE_KEYS = ("x_train", "y_train", "x_test", "y_test", "labels")


class ConfigError(ValueError):
    pass


def canonical_method(name):
    key = str(name).strip().lower()
    if key not in _METHOD_ALIASES:
        raise ConfigError(f"unknown method {name!r}; expected one of {METHODS}")
    return _METHOD_ALIASES[key]


@dataclass(frozen=True)
class ScoringSettings:
    top_fraction: float = 0.05
    robust_mean: str = "trimmed"
    trim: float = 0.1
    gev_reference: str = "normal"

    def __post_init__(self):
        if not 0 < self.top_fraction <= 1:
            raise ConfigError("scoring.top_fraction must lie in (0, 1]")
        if self.robust_mean not in ROBUST_MEANS:
            raise ConfigError(f"scoring.robust_mean must be one of {ROBUST_MEANS}")
        if not 0 <= self.trim < 0.5:
            raise ConfigError("scoring.trim must lie in [0, 0.5)")
        if self.gev_reference not in GEV_REFERENCES:
            raise ConfigError(f"scoring.gev_reference must be one of {GEV_REFERENCES}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything ``run_experiment`` needs. See the README for the file format."""

    seed: int = 0
    repetitions: int = 1
    methods: tuple = METHODS
    p_grid: tuple = (5, 10, 25, 50)
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    files: dict | None = None
    sample_kernel: KernelSpec = field(default_factory=KernelSpec)
    task_kernel: KernelSpec = field(default_factory=KernelSpec)
    stgpr_kernel: KernelSpec = STGPR_KERNEL
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    variance_batch: int = 256
    scoring: ScoringSettings = field(default_factory=ScoringSettings)
    output: str | None = None

    def __post_init__(self):
        if int(self.repetitions) < 1:
            raise ConfigError("repetitions must be >= 1")
        object.__setattr__(self, "repetitions", int(self.repetitions))
        object.__setattr__(self, "seed", int(self.seed))
        methods = tuple(dict.fromkeys(canonical_method(m) for m in self.methods))
        if not methods:
            raise ConfigError("at least one method is required")
        object.__setattr__(self, "methods", methods)
        grid = tuple(int(p) for p in self.p_grid)
        if any(p < 1 for p in grid):
            raise ConfigError("p_grid values must be >= 1")
        if SMTGPR in methods and not grid:
            raise ConfigError("S-MTGPR needs a non-empty p_grid")
        object.__setattr__(self, "p_grid", tuple(dict.fromkeys(grid)))
        if (self.synthetic is None) == (self.files is None):
            raise ConfigError("exactly one data source is required: data.synthetic or data.files")
        if self.files is not None:
            missing = [k for k in FILE_KEYS if k not in self.files]
            if missing:
                raise ConfigError(f"data.files is missing {missing}")
        if int(self.variance_batch) < 1:
            raise ConfigError("variance_batch must be >= 1")

    @classmethod
    def from_dict(cls, cfg):
        cfg = dict(cfg or {})
        known = {"seed", "repetitions", "methods", "p_grid", "data", "model", "optimizer", "variance_batch", "scoring", "output"}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(cfg.get("data") or {"synthetic": {}})
        unknown = set(data) - {"synthetic", "files"}
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        model = dict(cfg.get("model") or {})
        unknown = set(model) - {"sample_kernel", "task_kernel", "stgpr_kernel"}
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        synthetic = data.get("synthetic")
        try:
            return cls(
                seed=cfg.get("seed", 0),
                repetitions=cfg.get("repetitions", 1),
                methods=tuple(cfg.get("methods", METHODS)),
                p_grid=tuple(cfg.get("p_grid", (5, 10, 25, 50))),
                synthetic=None if synthetic is None else SyntheticSpec.from_config(synthetic),
                files=data.get("files"),
                sample_kernel=KernelSpec.from_config(model.get("sample_kernel", KernelSpec().to_config())),
                task_kernel=KernelSpec.from_config(model.get("task_kernel", KernelSpec().to_config())),
                stgpr_kernel=KernelSpec.from_config(model.get("stgpr_kernel", STGPR_KERNEL.to_config())),
                optimizer=OptimizerSettings.from_config(cfg.get("optimizer")),
                variance_batch=cfg.get("variance_batch", 256),
                scoring=ScoringSettings(**dict(cfg.get("scoring") or {})),
                output=cfg.get("output"),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        data = {"synthetic": self.synthetic.to_config()} if self.synthetic is not None else {"files": dict(self.files)}
        return {
            "seed": self.seed,
            "repetitions": self.repetitions,
            "methods": list(self.methods),
            "p_grid": list(self.p_grid),
            "data": data,
            "model": {
                "sample_kernel": self.sample_kernel.to_config(),
                "task_kernel": self.task_kernel.to_config(),
                "stgpr_kernel": self.stgpr_kernel.to_config(),
            },
            "optimizer": self.optimizer.to_config(),
            "variance_batch": self.variance_batch,
            "scoring": asdict(self.scoring),
            "output": self.output,
        }


def load_config(path):
    import yaml

    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    if cfg is not None and not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return ExperimentConfig.from_dict(cfg)


@dataclass
class ReportRow:
    method: str
    p: int | None
    repetition: int | str
    optimization_seconds: float
    prediction_seconds: float
    mean_r2: float
    auc: float
    final_lml: float
    parameter_count: float
    warnings: str = ""


REPORT_COLUMNS = tuple(f.name for f in fields(ReportRow))
TIMING_COLUMNS = ("optimization_seconds", "prediction_seconds")
_NUMERIC = ("optimization_seconds", "prediction_seconds", "mean_r2", "auc", "final_lml", "parameter_count")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def load_data(files):
    fmt = files.get("format")
    header = bool(files.get("header", False))
    x_train, y_train, x_test, y_test, labels = (load_matrix(files[k], fmt, header=header) for k in FILE_KEYS)
    labels = labels.ravel()
    if x_train.shape[0] != y_train.shape[0]:
        raise ConfigError(f"x_train has {x_train.shape[0]} rows, y_train has {y_train.shape[0]}")
    if x_test.shape[0] != y_test.shape[0] or labels.size != y_test.shape[0]:
        raise ConfigError("x_test, y_test and labels must have the same number of rows")
    if x_train.shape[1] != x_test.shape[1] or y_train.shape[1] != y_test.shape[1]:
        raise ConfigError("train and test matrices disagree in column count")
    if not np.all(np.isin(labels, (0.0, 1.0))):
        raise ConfigError("labels must be 0 (normal) or 1 (abnormal)")
    return x_train, y_train, x_test, y_test, labels.astype(np.int64)


def experiment_data(config, repetition):
    if config.synthetic is not None:
        return tuple(generate_synthetic(config.synthetic, config.seed + repetition))
    return load_data(config.files)


# ---------------------------------------------------------------------------
# one method on one split
# ---------------------------------------------------------------------------


@dataclass
class MethodResult:
    method: str
    p: int | None
    model: object
    prediction: object
    optimization_seconds: float
    prediction_seconds: float
    warnings: list = field(default_factory=list)


@dataclass
class Evaluation:
    r2: float
    auc: float
    scores: np.ndarray
    probabilities: np.ndarray | None
    r2_masked: int
    warnings: list = field(default_factory=list)


def fit_method(config, method, x_train, y_train, x_test, p=None):
    """Fit and predict one method, timing each phase with a monotonic clock.

    ``y_train`` should already be centered; predictions are on that scale.
    """
    method = canonical_method(method)
    t0 = time.perf_counter()
    if method == SMTGPR:
        mc = ModelConfig(
            sample_kernel=config.sample_kernel,
            task_kernel=config.task_kernel,
            p=p,
            optimizer=config.optimizer,
            variance_batch=config.variance_batch,
        )
        model = fit(mc, x_train, y_train)
    elif method == KRONPROD:
        model = mtkronprod_fit(
            x_train,
            y_train,
            task_kernel=config.task_kernel,
            sample_kernel=config.sample_kernel,
            optimizer=config.optimizer,
            variance_batch=config.variance_batch,
        )
    else:
        model = stgpr_fit(x_train, y_train, kernel_spec=config.stgpr_kernel, optimizer=config.optimizer)
    t1 = time.perf_counter()
    pred = model.predict(x_test)
    t2 = time.perf_counter()
    return MethodResult(method, p, model, pred, t1 - t0, t2 - t1, list(model.warnings))


def evaluate(prediction, y_test, labels, scoring=None):
    """R² on the normal rows, abnormality scores and AUC on all rows.

    The GEV is fit on the reference split's scores; AUC uses the raw scores,
    which rank identically to the GEV probabilities.
    """
    scoring = scoring or ScoringSettings()
    labels = np.asarray(labels).ravel()
    normal = labels == 0
    warn = []
    r2 = r_squared(y_test[normal], prediction.mean[normal]) if normal.any() else None
    if r2 is not None and r2.masked:
        warn.append(f"{r2.masked} tasks excluded from R2")
    npm = compute_npm(y_test, prediction)
    if npm.masked_tasks:
        warn.append(f"{npm.masked_tasks} tasks masked in NPM")
    scores = abnormality_score(npm, scoring.top_fraction, mode=scoring.robust_mean, trim=scoring.trim)
    value = auc(scores[normal], scores[~normal]) if normal.any() and (~normal).any() else float("nan")
    ref = scores[normal] if scoring.gev_reference == "normal" else scores
    probs = None
    try:
        probs = abnormality_probability(fit_gevd(ref), scores)
    except ValueError as exc:
        warn.append(f"GEV fit skipped: {exc}")
    return Evaluation(
        r2=float("nan") if r2 is None else r2.mean,
        auc=value,
        scores=scores,
        probabilities=probs,
        r2_masked=0 if r2 is None else r2.masked,
        warnings=warn,
    )


def _failed_row(method, p, rep, exc):
    nan = float("nan")
    return ReportRow(method, p, rep, nan, nan, nan, nan, nan, nan, f"{type(exc).__name__}: {exc}")


def run_method(config, method, p, repetition, data):
    """One ``ReportRow``; failures are caught and recorded in ``warnings``."""
    x_train, y_train, x_test, y_test, labels = data
    means = y_train.mean(axis=0)
    try:
        res = fit_method(config, method, x_train, y_train - means, x_test, p=p)
        ev = evaluate(res.prediction, y_test - means, labels, config.scoring)
    except Exception as exc:  # a failing method must not stop the run
        log.warning("%s p=%s rep=%s failed: %s", method, p, repetition, exc)
        return _failed_row(method, p, repetition, exc)
    model = res.model
    return ReportRow(
        method=method,
        p=p,
        repetition=repetition,
        optimization_seconds=res.optimization_seconds,
        prediction_seconds=res.prediction_seconds,
        mean_r2=ev.r2,
        auc=ev.auc,
        final_lml=model.final_lml,
        parameter_count=model.parameter_count,
        warnings="; ".join(res.warnings + ev.warnings),
    )


# ---------------------------------------------------------------------------
# full experiment
# ---------------------------------------------------------------------------


def planned_runs(config, n_train, n_tasks):
    """``(method, p)`` pairs in execution order; invalid ``p`` values are skipped."""
    runs = []
    for method in config.methods:
        if method != SMTGPR:
            runs.append((method, None))
            continue
        for p in config.p_grid:
            if p > min(n_train, n_tasks):
                log.warning("skipping P=%d: exceeds min(N, T)=%d", p, min(n_train, n_tasks))
                continue
            runs.append((method, p))
    return runs


def aggregate(rows):
    """Mean and sample sd (``ddof=1``; 0 for a single repetition) per ``(method, p)``."""
    groups = {}
    for r in rows:
        groups.setdefault((r.method, r.p), []).append(r)
    out = []
    for (method, p), grp in groups.items():
        stats = {"mean": {}, "sd": {}}
        for col in _NUMERIC:
            v = np.array([getattr(r, col) for r in grp], dtype=np.float64)
            ok = v[~np.isnan(v)]
            stats["mean"][col] = float(ok.mean()) if ok.size else float("nan")
            stats["sd"][col] = float(ok.std(ddof=1)) if ok.size > 1 else (0.0 if ok.size else float("nan"))
        n_fail = sum(1 for r in grp if math.isnan(r.auc))
        note = f"{n_fail} of {len(grp)} repetitions failed" if n_fail else ""
        for kind in ("mean", "sd"):
            out.append(ReportRow(method=method, p=p, repetition=kind, warnings=note, **stats[kind]))
    return out


@dataclass
class ExperimentReport:
    rows: list
    aggregates: list
    csv_path: Path | None = None
    jsonl_path: Path | None = None

    @property
    def all_rows(self):
        return self.rows + self.aggregates


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_report(report, stem):
    """Write ``<stem>.csv`` and ``<stem>.jsonl``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path = stem.with_suffix(".csv")
    jsonl_path = stem.with_suffix(".jsonl")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in report.all_rows:
            writer.writerow([_cell(getattr(r, c)) for c in REPORT_COLUMNS])
    with open(jsonl_path, "w") as fh:
        for r in report.all_rows:
            rec = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(r).items()}
            fh.write(json.dumps(rec) + "\n")
    report.csv_path, report.jsonl_path = csv_path, jsonl_path
    return report


def run_experiment(config, output=None):
    """Run every repetition and method sequentially and write the report.

    Methods run one after another so their timings never overlap. Returns
    an :class:`ExperimentReport`; files are written when an output stem is
    given here or in the config.
    """
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config)
    rows = []
    for rep in range(config.repetitions):
        data = experiment_data(config, rep)
        n_train, n_tasks = data[1].shape
        for method, p in planned_runs(config, n_train, n_tasks):
            row = run_method(config, method, p, rep, data)
            log.info("rep %d %s p=%s auc=%.3f r2=%.3f", rep, method, p, row.auc, row.mean_r2)
            rows.append(row)
    report = ExperimentReport(rows, aggregate(rows))
    stem = output or config.output
    if stem:
        write_report(report, stem)
    return report


def read_report(path):
    """Rows of a CSV report as dicts of strings."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
