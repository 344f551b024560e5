"""Perturbation points around inputs and their displacements in the LF frame."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import NonFiniteError, ShapeError, Tensor, concat
from .losses import lf_displacement
from .model import GateModel

DISTRIBUTIONS = ("gaussian", "uniform_ball")
SPACES = ("embedding", "input")


@dataclass
class PerturbationConfig:
    count_m: int = 5
    sigma: float = 0.01          # relative to per-feature std of the perturbed batch
    distribution: str = "gaussian"
    seed: int = 0
    space: str = "embedding"     # perturb the shared embedding or the raw input

    def __post_init__(self):
        if self.count_m < 1:
            raise ValueError("count_m must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")
        if self.space not in SPACES:
            raise ValueError(f"space must be one of {SPACES}")

    def to_dict(self) -> dict:
        return asdict(self)


def sample_perturbations(x: np.ndarray, cfg: PerturbationConfig,
                         rng: np.random.Generator | None = None,
                         feature_std: np.ndarray | None = None) -> np.ndarray:
    """Return an [M, batch, features] array of points x + eps.

    The noise is scaled per feature by ``sigma * feature_std``; ``feature_std``
    defaults to the population std of ``x`` along the batch axis.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a [batch, features] array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("cannot perturb non-finite inputs")
    m = cfg.count_m
    if cfg.sigma == 0:
        return np.broadcast_to(x, (m,) + x.shape).copy()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    scale = cfg.sigma * (x.std(axis=0) if feature_std is None else np.asarray(feature_std))
    if cfg.distribution == "gaussian":
        noise = rng.standard_normal((m,) + x.shape)
    else:
        d = x.shape[1]
        direction = rng.standard_normal((m,) + x.shape)
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        radius = rng.random((m, x.shape[0], 1)) ** (1.0 / d)
        # sqrt(d + 2) makes the per-component std match the gaussian case
        noise = direction * radius * np.sqrt(d + 2.0)
    return x[None] + noise * scale


def lf_displacements(model: GateModel, task: str, x, x_perturbed, space: str = "embedding") -> Tensor:
    """Displacements |z'(x) - z'(x^i)| for every perturbation, shaped [M, batch].

    Runs in eval mode so dropout never enters the geometry probe. ``x`` and
    ``x_perturbed`` live in ``space``: backbone outputs for "embedding", raw
    features for "input".
    """
    model.unit(task)
    x = x if isinstance(x, Tensor) else Tensor.leaf(x)
    xp = x_perturbed if isinstance(x_perturbed, Tensor) else Tensor.leaf(x_perturbed)
    if xp.data.ndim != 3 or xp.shape[1:] != x.shape:
        raise ShapeError(f"perturbed batches {xp.shape} do not match input {x.shape}")
    m, b, d = xp.shape
    stacked = concat([x, xp.reshape(m * b, d)], axis=0)
    if space == "input":
        stacked = model.backbone(stacked, "eval")
    lf = model.lf_point(task, stacked, "eval")
    dz = lf.shape[1]
    center = lf[:b]
    moved = lf[b:].reshape(m, b, dz)
    return lf_displacement(center, moved)
