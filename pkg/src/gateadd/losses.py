"""Loss terms for geometric alignment and their weighted total."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    alpha: float = 1.0   # autoencoder
    beta: float = 1.0    # consistency
    gamma: float = 1.0   # mapping
    delta: float = 1.0   # distance
    c_alpha: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if any(v < 0 for v in self.c_alpha.values()):
            raise ValueError("per-source distance weights must be >= 0")

    def source_weight(self, task: str) -> float:
        return self.c_alpha.get(task, 1.0)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
                "delta": self.delta, "c_alpha": dict(self.c_alpha)}


@dataclass
class LossBreakdown:
    reg: Tensor
    auto: Tensor
    cons: Tensor
    map: Tensor
    dis: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("reg", "auto", "cons", "map", "dis", "total")}


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero() -> Tensor:
    return Tensor(np.zeros(1))


def mse(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch {a.shape} vs {b.shape}")
    return (a - b).square().mean()


def regression_loss(predictions: Mapping[str, Tensor], labels: Mapping[str, object]) -> Tensor:
    """Average of per-task MSE over the tasks in play."""
    if not predictions:
        raise ValueError("regression loss needs at least one task")
    if set(predictions) != set(labels):
        raise ValueError("prediction and label task sets differ")
    total = None
    for task in predictions:
        term = mse(predictions[task], labels[task])
        total = term if total is None else total + term
    return total * (1.0 / len(predictions))


def _sum_terms(terms: list[Tensor], what: str) -> Tensor:
    if not terms:
        raise ValueError(f"{what} needs at least one term")
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def autoencoder_loss(pairs: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Sum over tasks of MSE(z, reconstruction)."""
    return _sum_terms([mse(z, z_rec) for z, z_rec in pairs], "autoencoder loss")


def consistency_loss(lf_sources: Sequence[Tensor], lf_target: Tensor) -> Tensor:
    return _sum_terms([mse(zs, lf_target) for zs in lf_sources], "consistency loss")


def mapping_loss(y_target, detour_preds: Sequence[Tensor]) -> Tensor:
    """Sum over sources of MSE between the target-route value and each detoured prediction."""
    return _sum_terms([mse(y_target, y_hat) for y_hat in detour_preds], "mapping loss")


def lf_displacement(center: Tensor, perturbed: Tensor) -> Tensor:
    """|perturbed - center| over the latent axis.

    ``center`` is [batch, d]; ``perturbed`` is [batch, d] or [M, batch, d].
    """
    center, perturbed = _t(center), _t(perturbed)
    if center.shape[-1] != perturbed.shape[-1] or center.shape != perturbed.shape[-center.data.ndim:]:
        raise ShapeError(f"displacement shape mismatch {center.shape} vs {perturbed.shape}")
    return (perturbed - center).norm_rows()


def distance_loss(s_sources: Mapping[str, Tensor], s_target: Tensor,
                  c_alpha: Mapping[str, float] | None = None) -> Tensor:
    """(1/M) * sum_a C_a * sum_i MSE(s_a^i, s_t^i) with displacements shaped [M, batch]."""
    if not s_sources:
        raise ValueError("distance loss needs at least one source")
    s_target = _t(s_target)
    if s_target.data.ndim != 2:
        raise ShapeError("displacements must be shaped [M, batch]")
    m = s_target.shape[0]
    c_alpha = c_alpha or {}
    terms = []
    for task, s_src in s_sources.items():
        s_src = _t(s_src)
        if s_src.shape != s_target.shape:
            raise ShapeError(f"source {task!r} displacements {s_src.shape} vs target {s_target.shape}")
        if task not in c_alpha:
            log.debug("no distance weight for source %s; using 1", task)
        weight = c_alpha.get(task, 1.0)
        per_point = (s_src - s_target).square().mean(axis=1).sum()
        terms.append(per_point * weight)
    return _sum_terms(terms, "distance loss") * (1.0 / m)


def total_loss(reg: Tensor, auto: Tensor | None = None, cons: Tensor | None = None,
               map_: Tensor | None = None, dis: Tensor | None = None,
               weights: LossWeights | None = None) -> LossBreakdown:
    w = weights or LossWeights()
    auto = auto if auto is not None else zero()
    cons = cons if cons is not None else zero()
    map_ = map_ if map_ is not None else zero()
    dis = dis if dis is not None else zero()
    total = reg + auto * w.alpha + cons * w.beta + map_ * w.gamma + dis * w.delta
    return LossBreakdown(reg, auto, cons, map_, dis, total)
