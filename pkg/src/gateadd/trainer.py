"""Training regimes: vanilla multi-task, pre-train then add, and single task.

A training step always draws one mini-batch per active task. For GATE the
alignment losses of an ordered pair (a, b) use task b's batch: b plays the
target role, every other task a plays the source role. Each role's loss is
back-propagated separately (gradients accumulate), then one clipped AdamW
step is taken, so memory stays flat while the epoch still covers every pair.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import AdamW, NonFiniteError, Tensor, clip_grad_norm, concat, no_grad
from .data import TEST, TaskDataset, dataset_digest
from .losses import (LossBreakdown, LossWeights, autoencoder_loss, consistency_loss,
                     distance_loss, lf_displacement, mapping_loss, mse, total_loss)
from .model import GateModel, MtlModel, NetworkConfig, SingleModel
from .perturb import PerturbationConfig, sample_perturbations

log = logging.getLogger(__name__)

POLICIES = ("best_validation_rmse", "last")
MAP_TARGETS = ("prediction", "label")


class TrainingError(RuntimeError):
    """Raised when a run cannot continue, e.g. on a non-finite loss."""


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 512
    epochs: int = 1000
    weights: LossWeights = field(default_factory=LossWeights)
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    seed: int = 0
    checkpoint_policy: str = "best_validation_rmse"
    validation_fold: int | None = 1
    weight_decay: float = 0.01
    grad_clip: float = 5.0
    map_target: str = "label"
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.checkpoint_policy not in POLICIES:
            raise ValueError(f"checkpoint_policy must be one of {POLICIES}")
        if self.map_target not in MAP_TARGETS:
            raise ValueError(f"map_target must be one of {MAP_TARGETS}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.perturbation, dict):
            self.perturbation = PerturbationConfig(**self.perturbation)
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class RunRecord:
    model_kind: str
    regime: str
    source_tasks: list[str]
    target_tasks: list[str]
    trace: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_rmse: float | None = None
    alignment_terms_per_step: int = 0
    regression_terms_per_step: int = 0
    trainable_parameters: int = 0
    frozen_digest_before: str | None = None
    frozen_digest_after: str | None = None
    checkpoint: str | None = None
    config: dict = field(default_factory=dict)
    model: object = field(default=None, repr=False, compare=False)

    @property
    def epoch_seconds(self) -> list[float]:
        return [row["seconds"] for row in self.trace]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("model")
        return d


def expected_alignment_terms(kind: str, regime: str, n_sources: int, n_targets: int = 1) -> int:
    """Alignment (cons, map, dis) triples per step; zero for non-GATE models."""
    if kind != "gate":
        return 0
    if regime == "addition":
        return n_targets * n_sources
    n = n_sources + (n_targets if regime == "vanilla" else 0)
    return n * (n - 1)


def expected_regression_terms(kind: str, regime: str, n_sources: int, n_targets: int = 1) -> int:
    if kind == "single":
        return 1
    if regime == "addition":
        return n_targets
    return n_sources + (n_targets if regime == "vanilla" else 0)


# -- batching --------------------------------------------------------------

class _Cycler:
    """Endless shuffled mini-batches over one task's training indices."""

    def __init__(self, indices: np.ndarray, batch_size: int, rng: np.random.Generator):
        if indices.size == 0:
            raise TrainingError("a task has no training samples")
        self.indices = indices
        self.batch_size = min(batch_size, indices.size)
        self.rng = rng
        self._queue: list[np.ndarray] = []

    @property
    def batches_per_pass(self) -> int:
        return math.ceil(self.indices.size / self.batch_size)

    def next(self) -> np.ndarray:
        if not self._queue:
            order = self.indices[self.rng.permutation(self.indices.size)]
            self._queue = [order[k:k + self.batch_size] for k in range(0, order.size, self.batch_size)]
            self._queue.reverse()
        return self._queue.pop()


def _spawn(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# -- evaluation -------------------------------------------------------------

def validation_rmse(model, ds: TaskDataset, tasks: list[str], fold: int | None) -> dict[str, float]:
    if fold is None:
        return {}
    out = {}
    for t in tasks:
        idx = ds.indices(t, [fold])
        if idx.size == 0:
            continue
        pred = model.predict(t, ds.features[idx])
        out[t] = float(np.sqrt(np.mean((pred - ds.labels[t][idx]) ** 2)))
    return out


def _snapshot(model) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def _restore(model, snap: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        p.data[...] = snap[name]


# -- generic epoch loop -------------------------------------------------------

StepFn = Callable[[], tuple[dict[str, float], int, int]]


def _run(model, ds: TaskDataset, active: list[str], cfg: TrainConfig, record: RunRecord,
         step_fn: StepFn, steps_per_epoch: int, optimizer: AdamW,
         log_path: str | Path | None = None) -> RunRecord:
    params = optimizer.params
    best = (math.inf, None, None)
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            sums = dict.fromkeys(("reg", "auto", "cons", "map", "dis", "total"), 0.0)
            for _ in range(steps_per_epoch):
                optimizer.zero_grad()
                values, n_align, n_reg = step_fn()
                if not math.isfinite(values["total"]):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                if record.alignment_terms_per_step and n_align != record.alignment_terms_per_step:
                    raise TrainingError("alignment term count changed between steps")
                record.alignment_terms_per_step = n_align
                record.regression_terms_per_step = n_reg
                if cfg.grad_clip:
                    clip_grad_norm(params, cfg.grad_clip)
                try:
                    optimizer.step()
                except NonFiniteError as exc:
                    raise TrainingError(str(exc)) from exc
                for k in sums:
                    sums[k] += values[k]
            seconds = time.perf_counter() - t0
            val = validation_rmse(model, ds, active, cfg.validation_fold)
            val_mean = float(np.mean(list(val.values()))) if val else None
            row = {"epoch": epoch, **{k: v / steps_per_epoch for k, v in sums.items()},
                   "val_rmse": val_mean, "val_rmse_tasks": val, "seconds": max(seconds, 1e-12)}
            record.trace.append(row)
            if log_fh is not None:
                log_fh.write(json.dumps(row, sort_keys=True) + "\n")
            if cfg.checkpoint_policy == "best_validation_rmse" and val_mean is not None:
                if val_mean < best[0]:
                    best = (val_mean, epoch, _snapshot(model))
    finally:
        if log_fh is not None:
            log_fh.close()
    if best[2] is not None:
        _restore(model, best[2])
        record.best_epoch, record.best_val_rmse = best[1], best[0]
    else:
        last = record.trace[-1]
        record.best_epoch, record.best_val_rmse = last["epoch"], last["val_rmse"]
    record.model = model
    return record


def _active_cyclers(ds: TaskDataset, tasks: list[str], cfg: TrainConfig,
                    rng: np.random.Generator) -> dict[str, _Cycler]:
    buckets = ds.train_buckets(cfg.validation_fold)
    cyclers = {}
    for t in tasks:
        if t not in ds.labels:
            raise TrainingError(f"dataset has no labels for task {t!r}")
        cyclers[t] = _Cycler(ds.indices(t, buckets), cfg.batch_size, rng)
    return cyclers


def _labels(ds: TaskDataset, task: str, idx: np.ndarray) -> np.ndarray:
    return ds.labels[task][idx][:, None]


def _perturbed(emb: Tensor, cfg: PerturbationConfig, rng: np.random.Generator) -> Tensor:
    """emb + eps as a graph node, eps drawn around the (detached) batch."""
    points = sample_perturbations(emb.data, cfg, rng)
    noise = points - emb.data[None]
    m, b, d = points.shape
    return emb.reshape(1, b, d) + noise


def _lf_probe(model: GateModel, task: str, emb: Tensor, pert: Tensor) -> tuple[Tensor, Tensor]:
    """Eval-mode LF centre [batch, d] and displacements [M, batch] in one stacked pass."""
    m, b, d = pert.shape
    lf = model.lf_point(task, concat([emb, pert.reshape(m * b, d)], axis=0), "eval")
    center = lf[:b]
    moved = lf[b:].reshape(m, b, lf.shape[1])
    return center, lf_displacement(center, moved)


def _input_perturbed(model: GateModel, x: np.ndarray, cfg: PerturbationConfig,
                     rng: np.random.Generator) -> Tensor:
    points = sample_perturbations(x, cfg, rng)
    m, b, f = points.shape
    return model.backbone(Tensor(points.reshape(m * b, f)), "eval").reshape(m, b, -1)


# -- GATE ---------------------------------------------------------------------

def _gate_role_loss(model: GateModel, role: str, others: list[str], x: np.ndarray, y: np.ndarray,
                    cfg: TrainConfig, rng: np.random.Generator) -> LossBreakdown:
    """All loss terms with ``role`` as the target of every ordered pair (a, role).

    This is the addition-stage loss with ``role`` as the single target and
    ``others`` as the sources.
    """
    pcfg = cfg.perturbation
    emb = model.embed(x, "train", rng)
    pert = (_perturbed(emb, pcfg, rng) if pcfg.space == "embedding"
            else _input_perturbed(model, x, pcfg, rng))
    out_t = model.forward_embedding(role, emb, "train", rng)
    _, s_t = _lf_probe(model, role, emb, pert)
    lf_src, s_src = [], {}
    for a in others:
        u = model.unit(a)
        lf_src.append(u.transfer(u.encoder(emb, "train", rng), "train", rng))
        s_src[a] = _lf_probe(model, a, emb, pert)[1]
    reg = mse(out_t.prediction, y)
    auto = autoencoder_loss([(out_t.latent, out_t.reconstruction)])
    cons = consistency_loss(lf_src, out_t.lf_point)
    detours = _split_rows(model.decode_lf(role, concat(lf_src, axis=0), "train", rng), len(others))
    map_ref = out_t.prediction if cfg.map_target == "prediction" else Tensor(y)
    mapping = mapping_loss(map_ref, detours)
    dis = distance_loss(s_src, s_t, cfg.weights.c_alpha)
    return total_loss(reg, auto, cons, mapping, dis, cfg.weights)


def _split_rows(t: Tensor, k: int) -> list[Tensor]:
    b = t.shape[0] // k
    return [t[i * b:(i + 1) * b] for i in range(k)]


def _add_values(acc: dict[str, float] | None, br: LossBreakdown) -> dict[str, float]:
    vals = br.values()
    if acc is None:
        return vals
    return {k: acc[k] + vals[k] for k in acc}


def train_vanilla_gate(ds: TaskDataset, tasks: list[str], cfg: TrainConfig,
                       regime: str = "vanilla", log_path=None, model: GateModel | None = None) -> RunRecord:
    """Train backbone and every regression unit jointly on ``tasks`` from scratch."""
    if len(tasks) < 2:
        raise TrainingError("GATE training needs at least two tasks")
    init_rng, batch_rng, noise_rng = _spawn(cfg.seed, 3)
    netcfg = NetworkConfig.from_dict({**cfg.network.to_dict(), "input_dim": ds.n_features})
    if model is None:
        model = GateModel.create(list(tasks), netcfg, seed=int(init_rng.integers(2**31)))
    cyclers = _active_cyclers(ds, tasks, cfg, batch_rng)
    optimizer = AdamW(model.trainable_parameters(), cfg.learning_rate, weight_decay=cfg.weight_decay)
    n = len(tasks)

    def step():
        acc, n_align = None, 0
        for role in tasks:
            idx = cyclers[role].next()
            others = [a for a in tasks if a != role]
            br = _gate_role_loss(model, role, others, ds.features[idx], _labels(ds, role, idx),
                                 cfg, noise_rng)
            br.total.backward()
            n_align += len(others)
            acc = _add_values(acc, br)
        return acc, n_align, n

    record = RunRecord("gate", regime, list(tasks), [],
                       config=cfg.to_dict(), trainable_parameters=model.num_trainable_parameters())
    steps = max(c.batches_per_pass for c in cyclers.values())
    return _run(model, ds, list(tasks), cfg, record, step, steps, optimizer, log_path)


def pretrain_gate(ds: TaskDataset, source_tasks: list[str], cfg: TrainConfig,
                  checkpoint_dir=None, log_path=None) -> RunRecord:
    if len(source_tasks) < 2:
        raise TrainingError("pre-training needs at least two source tasks")
    record = train_vanilla_gate(ds, source_tasks, cfg, regime="pretrain", log_path=log_path)
    if checkpoint_dir is not None:
        from .persist import save
        save(record.model, checkpoint_dir, meta=checkpoint_meta(record, ds, cfg))
        record.checkpoint = str(checkpoint_dir)
    return record


def checkpoint_meta(record: RunRecord, ds: TaskDataset, cfg: TrainConfig) -> dict:
    """Seed lineage and dataset provenance stored alongside a checkpoint."""
    return {"run": record.to_dict(), "seed": cfg.seed, "dataset_digest": dataset_digest(ds),
            "dataset_meta_hash": ds.metadata.get("generator_spec_hash")}


def _load_if_path(model_or_path, kind: str):
    if isinstance(model_or_path, (str, Path)):
        from .persist import load
        return load(model_or_path, expect_kind=kind)[0]
    return model_or_path


def add_and_train_gate(model_or_checkpoint, ds: TaskDataset, target_task: str, cfg: TrainConfig,
                       log_path=None) -> RunRecord:
    """Attach a regression unit for ``target_task`` and train only that unit."""
    model: GateModel = _load_if_path(model_or_checkpoint, "gate")
    if target_task in model.units:
        from .model import DuplicateTaskError
        raise DuplicateTaskError(f"task {target_task!r} already in the model")
    init_rng, batch_rng, noise_rng = _spawn(cfg.seed, 3)
    frozen_names = list(model.blocks())
    model.add_target_unit(target_task, seed=int(init_rng.integers(2**31)))
    digest_before = model.digest(frozen_names)
    sources = [t for t in model.tasks if t != target_task]
    cycler = _active_cyclers(ds, [target_task], cfg, batch_rng)[target_task]
    optimizer = AdamW(model.trainable_parameters(), cfg.learning_rate, weight_decay=cfg.weight_decay)
    pcfg = cfg.perturbation

    # everything upstream of the new unit is frozen, so embeddings and source
    # LF points are fixed per sample; evaluate them once in eval mode
    idx_all = cycler.indices
    with no_grad():
        emb_all = model.embed(ds.features[idx_all], "eval").data
        lf_all = {a: model.lf_point(a, Tensor(emb_all), "eval").data for a in sources}
    row_of = {int(i): k for k, i in enumerate(idx_all)}

    def step():
        idx = cycler.next()
        rows = np.fromiter((row_of[int(i)] for i in idx), dtype=np.int64, count=idx.size)
        emb = Tensor(emb_all[rows])
        y = _labels(ds, target_task, idx)
        with no_grad():
            if pcfg.space == "embedding":
                pert = Tensor(sample_perturbations(emb.data, pcfg, noise_rng))
            else:
                pert = _input_perturbed(model, ds.features[idx], pcfg, noise_rng)
            s_src = {a: _lf_probe(model, a, emb, pert)[1] for a in sources}
        lf_src = [Tensor(lf_all[a][rows]) for a in sources]
        out_t = model.forward_embedding(target_task, emb, "train", noise_rng)
        _, s_t = _lf_probe(model, target_task, emb, pert)
        reg = mse(out_t.prediction, y)
        auto = autoencoder_loss([(out_t.latent, out_t.reconstruction)])
        cons = consistency_loss(lf_src, out_t.lf_point)
        detours = _split_rows(model.decode_lf(target_task, concat(lf_src, axis=0), "train", noise_rng),
                              len(sources))
        map_ref = out_t.prediction if cfg.map_target == "prediction" else Tensor(y)
        mapping = mapping_loss(map_ref, detours)
        dis = distance_loss(s_src, s_t, cfg.weights.c_alpha)
        br = total_loss(reg, auto, cons, mapping, dis, cfg.weights)
        br.total.backward()
        return br.values(), len(sources), 1

    record = RunRecord("gate", "addition", sources, [target_task], config=cfg.to_dict(),
                       trainable_parameters=model.num_trainable_parameters(),
                       frozen_digest_before=digest_before)
    _run(model, ds, [target_task], cfg, record, step, cycler.batches_per_pass, optimizer, log_path)
    record.frozen_digest_after = model.digest(frozen_names)
    if record.frozen_digest_after != digest_before:
        raise TrainingError("pre-trained parameters changed during task addition")
    log.info("frozen parameter digest unchanged after addition: %s", digest_before[:16])
    return record


# -- MTL and SINGLE --------------------------------------------------------------

def train_vanilla_mtl(ds: TaskDataset, tasks: list[str], cfg: TrainConfig,
                      regime: str = "vanilla", log_path=None) -> RunRecord:
    if not tasks:
        raise TrainingError("MTL training needs at least one task")
    init_rng, batch_rng, noise_rng = _spawn(cfg.seed, 3)
    netcfg = NetworkConfig.from_dict({**cfg.network.to_dict(), "input_dim": ds.n_features})
    model = MtlModel.create(list(tasks), netcfg, seed=int(init_rng.integers(2**31)))
    cyclers = _active_cyclers(ds, tasks, cfg, batch_rng)
    optimizer = AdamW(model.trainable_parameters(), cfg.learning_rate, weight_decay=cfg.weight_decay)
    n = len(tasks)

    def step():
        acc = None
        for t in tasks:
            idx = cyclers[t].next()
            pred = model.head(t)(model.latent(ds.features[idx], "train", noise_rng), "train", noise_rng)
            br = total_loss(mse(pred, _labels(ds, t, idx)) * (1.0 / n), weights=cfg.weights)
            br.total.backward()
            acc = _add_values(acc, br)
        return acc, 0, n

    record = RunRecord("mtl", regime, list(tasks), [], config=cfg.to_dict(),
                       trainable_parameters=model.num_trainable_parameters())
    steps = max(c.batches_per_pass for c in cyclers.values())
    return _run(model, ds, list(tasks), cfg, record, step, steps, optimizer, log_path)


def pretrain_mtl(ds: TaskDataset, source_tasks: list[str], cfg: TrainConfig,
                 checkpoint_dir=None, log_path=None) -> RunRecord:
    record = train_vanilla_mtl(ds, source_tasks, cfg, regime="pretrain", log_path=log_path)
    if checkpoint_dir is not None:
        from .persist import save
        save(record.model, checkpoint_dir, meta=checkpoint_meta(record, ds, cfg))
        record.checkpoint = str(checkpoint_dir)
    return record


def add_and_train_mtl(model_or_checkpoint, ds: TaskDataset, target_task: str, cfg: TrainConfig,
                      log_path=None) -> RunRecord:
    model: MtlModel = _load_if_path(model_or_checkpoint, "mtl")
    init_rng, batch_rng, noise_rng = _spawn(cfg.seed, 3)
    frozen_names = list(model.blocks())
    model.add_head(target_task, seed=int(init_rng.integers(2**31)))
    digest_before = model.digest(frozen_names)
    cycler = _active_cyclers(ds, [target_task], cfg, batch_rng)[target_task]
    optimizer = AdamW(model.trainable_parameters(), cfg.learning_rate, weight_decay=cfg.weight_decay)
    head = model.head(target_task)
    with no_grad():
        latent_all = model.latent(ds.features[cycler.indices], "eval").data
    row_of = {int(i): k for k, i in enumerate(cycler.indices)}

    def step():
        idx = cycler.next()
        rows = np.fromiter((row_of[int(i)] for i in idx), dtype=np.int64, count=idx.size)
        pred = head(Tensor(latent_all[rows]), "train", noise_rng)
        br = total_loss(mse(pred, _labels(ds, target_task, idx)), weights=cfg.weights)
        br.total.backward()
        return br.values(), 0, 1

    record = RunRecord("mtl", "addition", list(model.source_tasks), [target_task], config=cfg.to_dict(),
                       trainable_parameters=model.num_trainable_parameters(),
                       frozen_digest_before=digest_before)
    _run(model, ds, [target_task], cfg, record, step, cycler.batches_per_pass, optimizer, log_path)
    record.frozen_digest_after = model.digest(frozen_names)
    if record.frozen_digest_after != digest_before:
        raise TrainingError("pre-trained parameters changed during task addition")
    return record


def train_single(ds: TaskDataset, task: str, cfg: TrainConfig, log_path=None) -> RunRecord:
    init_rng, batch_rng, noise_rng = _spawn(cfg.seed, 3)
    netcfg = NetworkConfig.from_dict({**cfg.network.to_dict(), "input_dim": ds.n_features})
    model = SingleModel.create(task, netcfg, seed=int(init_rng.integers(2**31)))
    cycler = _active_cyclers(ds, [task], cfg, batch_rng)[task]
    optimizer = AdamW(model.trainable_parameters(), cfg.learning_rate, weight_decay=cfg.weight_decay)

    def step():
        idx = cycler.next()
        pred = model.forward(task, ds.features[idx], "train", noise_rng)
        br = total_loss(mse(pred, _labels(ds, task, idx)), weights=cfg.weights)
        br.total.backward()
        return br.values(), 0, 1

    record = RunRecord("single", "single", [], [task], config=cfg.to_dict(),
                       trainable_parameters=model.num_trainable_parameters())
    return _run(model, ds, [task], cfg, record, step, cycler.batches_per_pass, optimizer, log_path)
