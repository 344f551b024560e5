"""Metrics, recovery/source-correlation analyses and the epoch timing harness."""
from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import MIN_COLABELED, TEST, TaskDataset, colabeled_correlation

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def _pair(y, y_hat, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.size != y_hat.size:
        raise MetricError(f"length mismatch: {y.size} vs {y_hat.size}")
    if y.size < min_len:
        raise MetricError(f"need at least {min_len} values, got {y.size}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(y_hat))):
        raise MetricError("inputs must be finite (mask missing labels first)")
    return y, y_hat


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat, 1)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def pearson(y, y_hat) -> float:
    """Sample Pearson correlation. Constant input raises instead of returning 0."""
    y, y_hat = _pair(y, y_hat, 2)
    dy = y - y.mean()
    dh = y_hat - y_hat.mean()
    sy = np.sqrt(np.dot(dy, dy))
    sh = np.sqrt(np.dot(dh, dh))
    if sy == 0 or sh == 0:
        raise MetricError("pearson correlation is undefined for constant input")
    r = float(np.dot(dy, dh) / (sy * sh))
    return min(1.0, max(-1.0, r))


def recovery_rate(added_corr: float, vanilla_corr: float) -> float:
    if vanilla_corr is None or not np.isfinite(vanilla_corr) or vanilla_corr == 0:
        raise MetricError(f"recovery rate undefined for vanilla correlation {vanilla_corr!r}")
    return float(added_corr) / float(vanilla_corr)


def source_correlation_analysis(ds: TaskDataset, target: str, sources: Sequence[str] | None = None,
                                min_colabeled: int = MIN_COLABELED) -> float:
    """Max |corr| between the target labels and any source with enough co-labeled samples."""
    sources = [t for t in (sources if sources is not None else ds.tasks) if t != target]
    best = None
    for s in sources:
        r = colabeled_correlation(ds, s, target, min_colabeled)
        if np.isnan(r):
            continue
        best = abs(r) if best is None else max(best, abs(r))
    if best is None:
        raise MetricError(f"no source shares {min_colabeled} co-labeled samples with {target!r}")
    return float(best)


# -- reports ------------------------------------------------------------------

@dataclass
class TaskMetrics:
    task: str
    n: int
    rmse: float
    rmse_std_units: float
    pearson: float

    def row(self) -> dict:
        return {"task": self.task, "n": self.n, "rmse": self.rmse,
                "rmse_standardized": self.rmse_std_units, "pearson": self.pearson}


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class MetricReport:
    run: str
    tasks: dict[str, TaskMetrics]
    split: dict = field(default_factory=dict)
    recovery_rate: dict[str, float] = field(default_factory=dict)
    max_source_correlation: dict[str, float] = field(default_factory=dict)
    folds: dict[str, dict[str, TaskMetrics]] = field(default_factory=dict)

    def aggregates(self) -> dict[str, float]:
        """Mean and population std across tasks of RMSE and Pearson."""
        if not self.tasks:
            return {}
        r_mean, r_std = _mean_std([m.rmse for m in self.tasks.values()])
        p_mean, p_std = _mean_std([m.pearson for m in self.tasks.values()])
        return {"rmse_mean": r_mean, "rmse_std": r_std, "pearson_mean": p_mean, "pearson_std": p_std}

    def fold_aggregates(self) -> dict[str, dict[str, float]]:
        """Per-task mean/std over folds, for the folds-then-tasks reading."""
        out = {}
        for task in self.tasks:
            per = [f[task] for f in self.folds.values() if task in f]
            if not per:
                continue
            r_mean, r_std = _mean_std([m.rmse for m in per])
            p_mean, p_std = _mean_std([m.pearson for m in per])
            out[task] = {"rmse_mean": r_mean, "rmse_std": r_std,
                         "pearson_mean": p_mean, "pearson_std": p_std, "folds": len(per)}
        return out

    def to_dict(self) -> dict:
        return {
            "run": self.run,
            "split": self.split,
            "tasks": {t: m.row() for t, m in sorted(self.tasks.items())},
            "aggregates": self.aggregates(),
            "folds": {k: {t: m.row() for t, m in sorted(v.items())} for k, v in sorted(self.folds.items())},
            "fold_aggregates": self.fold_aggregates(),
            "recovery_rate": dict(sorted(self.recovery_rate.items())),
            "max_source_correlation": dict(sorted(self.max_source_correlation.items())),
        }


def task_metrics(ds: TaskDataset, task: str, predictions: np.ndarray, idx: np.ndarray) -> TaskMetrics:
    """Metrics for standardized predictions on rows ``idx``, RMSE also in original units."""
    y = ds.labels[task][idx]
    y_hat = np.asarray(predictions, dtype=np.float64).reshape(-1)
    raw = rmse(ds.destandardize(task, y), ds.destandardize(task, y_hat))
    return TaskMetrics(task, int(idx.size), raw, rmse(y, y_hat), pearson(y, y_hat))


def evaluate_model(model, ds: TaskDataset, tasks: Sequence[str], run: str = "run",
                   buckets: Sequence[int] = (TEST,)) -> MetricReport:
    """Score ``model.predict`` on the held-out rows of each task (test bucket by default)."""
    metrics = {}
    for task in tasks:
        idx = ds.indices(task, list(buckets))
        if idx.size < 2:
            raise MetricError(f"task {task!r} has {idx.size} labeled rows in buckets {list(buckets)}")
        metrics[task] = task_metrics(ds, task, model.predict(task, ds.features[idx]), idx)
    split = {"buckets": [int(b) for b in buckets],
             "split_seed": ds.metadata.get("split_seed"),
             "n_rows": int(ds.n_samples)}
    return MetricReport(run, metrics, split)


def attach_recovery(report: MetricReport, vanilla: MetricReport) -> MetricReport:
    for task, m in report.tasks.items():
        ref = vanilla.tasks.get(task)
        if ref is None:
            continue
        report.recovery_rate[task] = recovery_rate(m.pearson, ref.pearson)
    return report


# -- writers --------------------------------------------------------------------

TASK_COLUMNS = ["run", "task", "n", "rmse", "rmse_standardized", "pearson",
                "recovery_rate", "max_source_correlation"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def report_rows(reports: Sequence[MetricReport]) -> list[dict]:
    rows = []
    for rep in reports:
        for task, m in sorted(rep.tasks.items()):
            rows.append({"run": rep.run, **m.row(),
                         "recovery_rate": rep.recovery_rate.get(task),
                         "max_source_correlation": rep.max_source_correlation.get(task)})
    return rows


def write_metrics_csv(reports: Sequence[MetricReport], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TASK_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in report_rows(reports):
        w.writerow({k: _fmt(row.get(k)) for k in TASK_COLUMNS})
    path.write_text(buf.getvalue())
    return path


def write_report_json(report: MetricReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_report_json(path: str | Path) -> MetricReport:
    d = json.loads(Path(path).read_text())

    def tm(task, row):
        return TaskMetrics(task, row["n"], row["rmse"], row["rmse_standardized"], row["pearson"])

    return MetricReport(
        d["run"], {t: tm(t, r) for t, r in d["tasks"].items()}, d.get("split", {}),
        dict(d.get("recovery_rate", {})), dict(d.get("max_source_correlation", {})),
        {k: {t: tm(t, r) for t, r in v.items()} for k, v in d.get("folds", {}).items()})


def summary_text(reports: Sequence[MetricReport]) -> str:
    lines = [f"{'run':<24} {'task':<10} {'rmse':>9} {'rmse(std)':>10} {'pearson':>8} {'recov':>7}"]
    for rep in reports:
        for task, m in sorted(rep.tasks.items()):
            rr = rep.recovery_rate.get(task)
            lines.append(f"{rep.run:<24} {task:<10} {m.rmse:9.4f} {m.rmse_std_units:10.4f} "
                         f"{m.pearson:8.4f} {'' if rr is None else f'{rr:7.3f}':>7}")
        agg = rep.aggregates()
        if len(rep.tasks) > 1:
            lines.append(f"{rep.run:<24} {'mean':<10} {agg['rmse_mean']:9.4f} {'':>10} {agg['pearson_mean']:8.4f}")
            lines.append(f"{rep.run:<24} {'std':<10} {agg['rmse_std']:9.4f} {'':>10} {agg['pearson_std']:8.4f}")
    return "\n".join(lines) + "\n"


# -- timing -------------------------------------------------------------------

@dataclass
class TimingCell:
    model_kind: str
    regime: str
    n_tasks: int
    seconds_per_epoch: float
    epoch_seconds: list[float]
    alignment_terms: int
    regression_terms: int

    def row(self) -> dict:
        return {"model_kind": self.model_kind, "regime": self.regime, "n_tasks": self.n_tasks,
                "seconds_per_epoch": self.seconds_per_epoch,
                "alignment_terms": self.alignment_terms, "regression_terms": self.regression_terms}


def median_epoch_seconds(trace: Sequence[Mapping], warmup: int = 1) -> float:
    times = [row["seconds"] for row in trace][warmup:]
    if len(times) < 3:
        raise MetricError(f"need >= 3 measured epochs after warm-up, got {len(times)}")
    return float(statistics.median(times))


def time_cell(model_kind: str, regime: str, n_tasks: int, run: Callable[[], object],
              warmup: int = 1) -> TimingCell:
    """Run ``run()`` (returns a RunRecord) and summarise its per-epoch timings."""
    t0 = time.perf_counter()
    try:
        record = run()
    except Exception as exc:
        raise RuntimeError(f"timing cell {model_kind}/{regime}/N={n_tasks} failed: {exc}") from exc
    log.info("timing cell %s/%s/N=%d finished in %.1fs", model_kind, regime, n_tasks,
             time.perf_counter() - t0)
    secs = [row["seconds"] for row in record.trace]
    return TimingCell(model_kind, regime, n_tasks, median_epoch_seconds(record.trace, warmup), secs,
                      record.alignment_terms_per_step, record.regression_terms_per_step)


def timing_harness(cells: Sequence[tuple[str, str, int, Callable[[], object]]],
                   warmup: int = 1) -> list[TimingCell]:
    """Time each (model_kind, regime, N, runner) cell sequentially."""
    return [time_cell(kind, regime, n, fn, warmup) for kind, regime, n, fn in cells]


def write_timing_csv(cells: Sequence[TimingCell], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["model_kind", "regime", "n_tasks", "seconds_per_epoch", "alignment_terms", "regression_terms"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for c in cells:
        w.writerow({k: _fmt(v) for k, v in c.row().items()})
    path.write_text(buf.getvalue())
    return path
