"""Task datasets: CSV ingestion, standardisation, splits, and a synthetic suite generator."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

TEST = 0          # split bucket for held-out test samples; folds are 1..n_folds
MIN_COLABELED = 10
STD_CONVENTION = "population"
FUNCTIONS = ("linear", "quadratic", "sinusoidal")


class DataError(ValueError):
    pass


class ConstantLabelError(DataError):
    pass


class InfeasibleCorrelationError(DataError):
    pass


@dataclass
class TaskDataset:
    features: np.ndarray                      # [n_samples, n_features]
    labels: dict[str, np.ndarray]             # task -> [n_samples], NaN = missing
    feature_names: list[str] = field(default_factory=list)
    split: np.ndarray | None = None           # per-sample bucket: 0 = test, 1..folds
    task_stats: dict[str, tuple[float, float]] = field(default_factory=dict)
    feature_stats: tuple[np.ndarray, np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise DataError("feature matrix must be a non-empty 2-d array")
        n = self.features.shape[0]
        for task, col in self.labels.items():
            col = np.asarray(col, dtype=np.float64)
            if col.shape != (n,):
                raise DataError(f"label column {task!r} has shape {col.shape}, expected ({n},)")
            self.labels[task] = col
        if not self.feature_names:
            self.feature_names = [f"f_{k}" for k in range(self.features.shape[1])]

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def tasks(self) -> list[str]:
        return list(self.labels)

    def labeled(self, task: str) -> np.ndarray:
        return ~np.isnan(self.labels[task])

    def indices(self, task: str | None = None, buckets=None) -> np.ndarray:
        """Sample indices in ``buckets`` (all when None) carrying a label for ``task``."""
        mask = np.ones(self.n_samples, dtype=bool)
        if buckets is not None:
            if self.split is None:
                raise DataError("dataset has no split assignment")
            mask &= np.isin(self.split, list(buckets))
        if task is not None:
            mask &= self.labeled(task)
        return np.flatnonzero(mask)

    def train_buckets(self, validation_fold: int | None = None) -> list[int]:
        folds = self.metadata.get("folds", 4)
        return [k for k in range(1, folds + 1) if k != validation_fold]

    def destandardize(self, task: str, values: np.ndarray) -> np.ndarray:
        mean, std = self.task_stats.get(task, (0.0, 1.0))
        return np.asarray(values) * std + mean

    def subset_tasks(self, tasks: list[str]) -> "TaskDataset":
        return replace(self, labels={t: self.labels[t] for t in tasks},
                       task_stats={t: s for t, s in self.task_stats.items() if t in tasks})


# -- CSV ----------------------------------------------------------------------

def load_csv(path: str | Path) -> TaskDataset:
    """Read ``f_*`` feature columns and ``y_<task>`` label columns.

    Empty cells and ``NaN`` mark missing labels. Features must be numeric.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            dupes = sorted({h for h in header if header.count(h) > 1})
            raise DataError(f"{path}: duplicate column names {dupes}")
        feat_cols = [k for k, h in enumerate(header) if h.startswith("f_")]
        label_cols = [k for k, h in enumerate(header) if h.startswith("y_") and len(h) > 2]
        unknown = [h for k, h in enumerate(header) if k not in feat_cols and k not in label_cols]
        if unknown:
            raise DataError(f"{path}: unrecognised columns {unknown}")
        if not feat_cols:
            raise DataError(f"{path}: no feature columns")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                feats.append([float(row[k]) for k in feat_cols])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric feature value") from None
            lab = []
            for k in label_cols:
                cell = row[k].strip()
                if cell == "" or cell.lower() == "nan":
                    lab.append(math.nan)
                else:
                    try:
                        lab.append(float(cell))
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: non-numeric label {cell!r}") from None
            labels.append(lab)
    if not feats:
        raise DataError(f"{path}: zero samples")
    features = np.array(feats, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise DataError(f"{path}: non-finite feature values")
    label_arr = np.array(labels, dtype=np.float64).reshape(len(feats), len(label_cols))
    return TaskDataset(
        features=features,
        labels={header[k][2:]: label_arr[:, j] for j, k in enumerate(label_cols)},
        feature_names=[header[k] for k in feat_cols],
    )


def save_csv(ds: TaskDataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ds.feature_names + [f"y_{t}" for t in ds.tasks])
        for i in range(ds.n_samples):
            row = [repr(float(v)) for v in ds.features[i]]
            for t in ds.tasks:
                v = ds.labels[t][i]
                row.append("" if math.isnan(v) else repr(float(v)))
            writer.writerow(row)


# -- splits and standardisation ------------------------------------------------

def split(ds_or_n, ratio: float = 0.8, folds: int = 4, seed: int = 0) -> np.ndarray:
    """Seeded shuffle; first 20% (by default) go to test, the rest round-robin into folds 1..folds."""
    n = ds_or_n if isinstance(ds_or_n, (int, np.integer)) else ds_or_n.n_samples
    if n < folds + 1:
        raise DataError(f"need at least {folds + 1} samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * (1.0 - ratio)))
    assignment = np.empty(n, dtype=np.int64)
    assignment[order[:n_test]] = TEST
    assignment[order[n_test:]] = 1 + np.arange(n - n_test) % folds
    return assignment


def assign_split(ds: TaskDataset, ratio: float = 0.8, folds: int = 4, seed: int = 0) -> TaskDataset:
    meta = dict(ds.metadata, split_seed=seed, split_ratio=ratio, folds=folds)
    return replace(ds, split=split(ds, ratio, folds, seed), metadata=meta)


def standardize(ds: TaskDataset, features: bool = True) -> TaskDataset:
    """Standardise labels (and features) with statistics from the training buckets only.

    Uses the population standard deviation. Labels keep their NaN markers.
    """
    if ds.split is None:
        raise DataError("assign a split before standardising")
    train = ds.split != TEST
    stats: dict[str, tuple[float, float]] = {}
    labels = {}
    for task, col in ds.labels.items():
        vals = col[train & ~np.isnan(col)]
        if vals.size == 0:
            raise DataError(f"task {task!r} has no training labels")
        mean = float(vals.mean())
        std = float(vals.std())
        if std == 0.0 or not math.isfinite(std):
            raise ConstantLabelError(f"task {task!r} has constant training labels")
        # compose with any earlier standardisation so destandardize() still reaches raw units
        prev_mean, prev_std = ds.task_stats.get(task, (0.0, 1.0))
        stats[task] = (prev_mean + prev_std * mean, prev_std * std)
        labels[task] = (col - mean) / std
    feats = ds.features
    fstats = ds.feature_stats
    if features:
        fmean = feats[train].mean(axis=0)
        fstd = feats[train].std(axis=0)
        fstd = np.where(fstd > 0, fstd, 1.0)
        feats = (feats - fmean) / fstd
        fstats = (fmean, fstd)
    meta = dict(ds.metadata, std_convention=STD_CONVENTION)
    return replace(ds, features=feats, labels=labels, task_stats=stats,
                   feature_stats=fstats, metadata=meta)


# -- correlations ------------------------------------------------------------

def colabeled_correlation(ds: TaskDataset, a: str, b: str, min_shared: int = MIN_COLABELED) -> float:
    """Pearson correlation over samples labelled for both tasks; NaN below ``min_shared``."""
    mask = ds.labeled(a) & ds.labeled(b)
    if mask.sum() < min_shared:
        return math.nan
    x, y = ds.labels[a][mask], ds.labels[b][mask]
    if x.std() == 0 or y.std() == 0:
        return math.nan
    return float(np.corrcoef(x, y)[0, 1])


def correlation_matrix(ds: TaskDataset) -> dict[str, dict[str, float]]:
    return {a: {b: colabeled_correlation(ds, a, b) for b in ds.tasks} for a in ds.tasks}


# -- synthetic suite -------------------------------------------------------

@dataclass
class SyntheticTaskSpec:
    task_id: str
    role: str = "source"                  # "source" or "target"
    latent_function: str = "linear"
    reference: str | None = None          # task whose labels this one correlates with
    target_correlation: float = 0.0
    noise_std: float = 0.1
    label_coverage: float = 1.0

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ValueError(f"role must be 'source' or 'target', got {self.role!r}")
        if self.latent_function not in FUNCTIONS:
            raise ValueError(f"latent_function must be one of {FUNCTIONS}")
        if abs(self.target_correlation) > 1:
            raise ValueError("|target_correlation| must be <= 1")
        if not 0 < self.label_coverage <= 1:
            raise ValueError("label_coverage must lie in (0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass
class SuiteConfig:
    tasks: list[SyntheticTaskSpec]
    n_samples: int = 2000
    n_features: int = 16
    seed: int = 0
    ood_test: bool = False
    ood_shift: float = 1.0
    directions_per_task: int = 3
    split_ratio: float = 0.8
    folds: int = 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        d = dict(d)
        d["tasks"] = [SyntheticTaskSpec(**t) for t in d["tasks"]]
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class SyntheticSuite:
    dataset: TaskDataset
    source_tasks: list[str]
    target_tasks: list[str]
    correlations: dict[str, dict[str, float]]


def _unit(v: np.ndarray) -> np.ndarray:
    v = v - v.mean()
    return v / v.std()


def _apply(fn: str, u: np.ndarray) -> np.ndarray:
    if fn == "linear":
        return u
    if fn == "quadratic":
        return u * u
    return np.sin(u)


def generate_synthetic_suite(cfg: SuiteConfig) -> SyntheticSuite:
    """Draw features and per-task labels with designed label correlations.

    Each task owns ``directions_per_task`` directions in feature space
    (orthonormal while there are enough features); its private signal is the
    sum of a fixed function applied to each projection. A task with a ``reference`` mixes the
    reference's signal with its own so that the label correlation equals
    ``target_correlation`` after accounting for both tasks' noise.
    """
    ids = [t.task_id for t in cfg.tasks]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate task ids in suite")
    specs = {t.task_id: t for t in cfg.tasks}
    rng = np.random.default_rng(cfg.seed)
    n, f = cfg.n_samples, cfg.n_features

    x = rng.standard_normal((n, f))
    split_assignment = None
    if cfg.ood_test:
        split_assignment = split(n, cfg.split_ratio, cfg.folds, cfg.seed)
        shift_dir = rng.standard_normal(f)
        shift_dir /= np.linalg.norm(shift_dir)
        x[split_assignment == TEST] += cfg.ood_shift * shift_dir

    k_dir = cfg.directions_per_task
    need = k_dir * len(ids)
    q, _ = np.linalg.qr(rng.standard_normal((f, f)))
    if need > f:
        log.warning("%d task directions exceed %d features: directions overlap", need, f)
        extra = rng.standard_normal((f, need - f))
        q = np.concatenate([q, extra / np.linalg.norm(extra, axis=0)], axis=1)
    own = {}
    for k, t in enumerate(ids):
        u = x @ q[:, k * k_dir:(k + 1) * k_dir]
        own[t] = _unit(_apply(specs[t].latent_function, u).sum(axis=1))

    signals: dict[str, np.ndarray] = {}
    resolving: set[str] = set()

    def signal(task: str) -> np.ndarray:
        if task in signals:
            return signals[task]
        if task in resolving:
            raise DataError(f"reference cycle through task {task!r}")
        resolving.add(task)
        spec = specs[task]
        if spec.reference is None:
            out = own[task]
        else:
            if spec.reference not in specs:
                raise DataError(f"task {task!r} references unknown task {spec.reference!r}")
            ref = signal(spec.reference)
            ref_noise = specs[spec.reference].noise_std
            a = spec.target_correlation * math.sqrt((1 + spec.noise_std ** 2) * (1 + ref_noise ** 2))
            if abs(a) > 1 + 1e-12:
                raise InfeasibleCorrelationError(
                    f"task {task!r}: correlation {spec.target_correlation} unreachable with "
                    f"noise {spec.noise_std} / {ref_noise} (needs mixing weight {a:.3f} > 1)")
            a = max(-1.0, min(1.0, a))
            indep = own[task] - ref * float(np.mean(own[task] * ref))
            indep = _unit(indep) if indep.std() > 1e-12 else np.zeros(n)
            out = a * ref + math.sqrt(max(0.0, 1 - a * a)) * indep
        resolving.discard(task)
        signals[task] = out
        return out

    labels = {}
    for t in ids:
        spec = specs[t]
        y = signal(t) + spec.noise_std * rng.standard_normal(n)
        n_lab = int(round(spec.label_coverage * n))
        if n_lab < n:
            missing = rng.permutation(n)[n_lab:]
            y = y.copy()
            y[missing] = math.nan
        labels[t] = y

    meta = {
        "generator": "synthetic",
        "generator_spec_hash": cfg.digest(),
        "suite": cfg.to_dict(),
        "folds": cfg.folds,
    }
    ds = TaskDataset(features=x, labels=labels, metadata=meta)
    if split_assignment is not None:
        ds = replace(ds, split=split_assignment,
                     metadata=dict(meta, split_seed=cfg.seed, split_ratio=cfg.split_ratio))
    else:
        ds = assign_split(ds, cfg.split_ratio, cfg.folds, cfg.seed)
    sources = [t for t in ids if specs[t].role == "source"]
    targets = [t for t in ids if specs[t].role == "target"]
    return SyntheticSuite(ds, sources, targets, correlation_matrix(ds))


def transfer_suite(n_sources: int = 4, target_correlation: float = 0.9, n_samples: int = 2000,
                   target_labels: int = 200, n_features: int = 16, noise_std: float = 0.1,
                   target_function: str = "sinusoidal", seed: int = 0) -> SuiteConfig:
    """Source tasks with full coverage plus one scarce target correlated with source s1."""
    functions = ["quadratic", "sinusoidal", "linear"]
    tasks = [SyntheticTaskSpec(f"s{k + 1}", "source", functions[k % 3], noise_std=noise_std)
             for k in range(n_sources)]
    tasks.append(SyntheticTaskSpec("t1", "target", target_function, reference="s1",
                                   target_correlation=target_correlation, noise_std=noise_std,
                                   label_coverage=target_labels / n_samples))
    return SuiteConfig(tasks=tasks, n_samples=n_samples, n_features=n_features, seed=seed)


# -- sidecar -------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return _jsonable(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def write_dataset(ds: TaskDataset, directory: str | Path, extra: dict | None = None) -> Path:
    """Write ``data.csv`` plus a ``data.meta.json`` sidecar (tasks, stats, split)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_csv(ds, directory / "data.csv")
    meta = {
        "tasks": ds.tasks,
        "n_samples": ds.n_samples,
        "n_features": ds.n_features,
        "task_stats": {t: list(s) for t, s in ds.task_stats.items()},
        "std_convention": STD_CONVENTION,
        "split": None if ds.split is None else ds.split.tolist(),
        **{k: v for k, v in ds.metadata.items() if k not in ("suite",)},
        "suite": ds.metadata.get("suite"),
        **(extra or {}),
    }
    sidecar = directory / "data.meta.json"
    sidecar.write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n")
    return sidecar


def read_dataset(directory: str | Path) -> TaskDataset:
    """Load ``data.csv`` and restore split/metadata from the sidecar when present."""
    directory = Path(directory)
    csv_path = directory / "data.csv" if directory.is_dir() else directory
    ds = load_csv(csv_path)
    sidecar = csv_path.with_name("data.meta.json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        split_list = meta.pop("split", None)
        ds = replace(ds, metadata=meta)
        if split_list is not None:
            if len(split_list) != ds.n_samples:
                raise DataError("sidecar split length does not match the CSV")
            ds = replace(ds, split=np.asarray(split_list, dtype=np.int64))
    return ds


def dataset_digest(ds: TaskDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.features).tobytes())
    for t in ds.tasks:
        h.update(t.encode())
        h.update(np.ascontiguousarray(ds.labels[t]).tobytes())
    if ds.split is not None:
        h.update(ds.split.tobytes())
    return h.hexdigest()
