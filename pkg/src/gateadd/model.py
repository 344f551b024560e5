"""Model assemblies: GATE regression units, shared-latent MTL, and single-task nets.

Every model is a thin container of named :class:`~gateadd.autodiff.Mlp`
blocks. Freezing works at block granularity, which is what task addition
needs: after a unit or head is added, everything that existed before it is
frozen and only the new block(s) receive gradients.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import Mlp, ShapeError, Tensor

_TASK_ID = re.compile(r"^[A-Za-z0-9_-]+$")


class UnknownTaskError(KeyError):
    pass


class DuplicateTaskError(ValueError):
    pass


@dataclass
class NetworkConfig:
    """Layer widths and dropout rates. Defaults follow the reference network table."""

    input_dim: int = 16
    backbone_hidden: int = 200
    embed_dim: int = 100
    latent_dim: int = 50
    encoder_hidden: int = 50
    transfer_hidden: int = 50
    backbone_dropout: float = 0.0
    encoder_dropout: float = 0.0
    transfer_dropout: float = 0.2
    head_dropout: float = 0.2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _check_task_id(task_id: str) -> None:
    if not isinstance(task_id, str) or not _TASK_ID.match(task_id):
        raise ValueError(f"task id must match [A-Za-z0-9_-]+, got {task_id!r}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor.leaf(x)


def build_backbone(cfg: NetworkConfig, rng: np.random.Generator) -> Mlp:
    return Mlp.build([cfg.input_dim, cfg.backbone_hidden, cfg.embed_dim],
                     dropout=cfg.backbone_dropout, rng=rng)


def build_encoder(cfg: NetworkConfig, rng: np.random.Generator) -> Mlp:
    return Mlp.build([cfg.embed_dim, cfg.encoder_hidden, cfg.latent_dim],
                     dropout=cfg.encoder_dropout, rng=rng)


def build_transfer(cfg: NetworkConfig, rng: np.random.Generator) -> Mlp:
    return Mlp.build([cfg.latent_dim, cfg.transfer_hidden, cfg.latent_dim],
                     hidden_activation="tanh", dropout=cfg.transfer_dropout, rng=rng)


def build_head(cfg: NetworkConfig, rng: np.random.Generator) -> Mlp:
    return Mlp.build([cfg.latent_dim, 1], dropout=cfg.head_dropout, rng=rng)


class GateOutputs(NamedTuple):
    latent: Tensor          # z
    lf_point: Tensor        # z' = transfer(z)
    reconstruction: Tensor  # inverse_transfer(z')
    prediction: Tensor      # head(z)


class RegressionUnit:
    """Encoder, transfer, inverse transfer and head for one task."""

    PARTS = ("encoder", "transfer", "inverse_transfer", "head")

    def __init__(self, task_id: str, encoder: Mlp, transfer: Mlp, inverse_transfer: Mlp, head: Mlp):
        _check_task_id(task_id)
        d = encoder.out_dim
        for name, net in (("transfer", transfer), ("inverse_transfer", inverse_transfer)):
            if net.in_dim != d or net.out_dim != d:
                raise ShapeError(f"{name} must map {d} -> {d}, got {net.in_dim} -> {net.out_dim}")
        if head.in_dim != d or head.out_dim != 1:
            raise ShapeError(f"head must map {d} -> 1")
        self.task_id = task_id
        self.encoder = encoder
        self.transfer = transfer
        self.inverse_transfer = inverse_transfer
        self.head = head

    @classmethod
    def create(cls, task_id: str, cfg: NetworkConfig, rng: np.random.Generator) -> "RegressionUnit":
        return cls(task_id, build_encoder(cfg, rng), build_transfer(cfg, rng),
                   build_transfer(cfg, rng), build_head(cfg, rng))

    def blocks(self) -> dict[str, Mlp]:
        return {part: getattr(self, part) for part in self.PARTS}

    def freeze(self, frozen: bool = True) -> None:
        for net in self.blocks().values():
            net.frozen = frozen

    @property
    def frozen(self) -> bool:
        return all(net.frozen for net in self.blocks().values())

    def num_parameters(self) -> int:
        return sum(net.num_parameters() for net in self.blocks().values())


class _ModelBase:
    kind = ""

    def blocks(self) -> dict[str, Mlp]:
        raise NotImplementedError

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, net in self.blocks().items():
            out.extend(net.named_parameters(prefix=f"{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for net in self.blocks().values() if not net.frozen for p in net.parameters()]

    def trainable_blocks(self) -> list[str]:
        return [name for name, net in self.blocks().items() if not net.frozen]

    def num_parameters(self) -> int:
        return sum(net.num_parameters() for net in self.blocks().values())

    def num_trainable_parameters(self) -> int:
        return sum(p.data.size for p in self.trainable_parameters())

    def digest(self, block_names: list[str] | None = None) -> str:
        """SHA-256 over the raw bytes of the selected blocks' parameters."""
        h = hashlib.sha256()
        blocks = self.blocks()
        for name in sorted(block_names if block_names is not None else blocks):
            for pname, p in blocks[name].named_parameters(prefix=f"{name}."):
                h.update(pname.encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def embed(self, x, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        return self.backbone(_as_tensor(x), mode, rng)


class GateModel(_ModelBase):
    """Shared backbone feeding one :class:`RegressionUnit` per task."""

    kind = "gate"

    def __init__(self, backbone: Mlp, units: dict[str, RegressionUnit],
                 source_tasks: list[str], target_tasks: list[str] | None = None,
                 config: NetworkConfig | None = None):
        target_tasks = list(target_tasks or [])
        if set(source_tasks) & set(target_tasks):
            raise ValueError("source and target tasks must be disjoint")
        if set(units) != set(source_tasks) | set(target_tasks):
            raise ValueError("units must cover exactly the registered tasks")
        self.backbone = backbone
        self.units = dict(units)
        self.source_tasks = list(source_tasks)
        self.target_tasks = target_tasks
        self.config = config or NetworkConfig(input_dim=backbone.in_dim)

    @classmethod
    def create(cls, source_tasks: list[str], cfg: NetworkConfig, seed: int = 0) -> "GateModel":
        if len(set(source_tasks)) != len(source_tasks):
            raise DuplicateTaskError("duplicate task ids")
        rng = np.random.default_rng(seed)
        backbone = build_backbone(cfg, rng)
        units = {t: RegressionUnit.create(t, cfg, rng) for t in source_tasks}
        return cls(backbone, units, source_tasks, [], cfg)

    @property
    def tasks(self) -> list[str]:
        return self.source_tasks + self.target_tasks

    def unit(self, task: str) -> RegressionUnit:
        try:
            return self.units[task]
        except KeyError:
            raise UnknownTaskError(task) from None

    def blocks(self) -> dict[str, Mlp]:
        out = {"backbone": self.backbone}
        for t in self.tasks:
            for part, net in self.units[t].blocks().items():
                out[f"unit.{t}.{part}"] = net
        return out

    def unit_blocks(self, task: str) -> list[str]:
        return [f"unit.{task}.{part}" for part in RegressionUnit.PARTS]

    # -- forward passes ---------------------------------------------------

    def forward_embedding(self, task: str, emb: Tensor, mode: str = "eval",
                          rng: np.random.Generator | None = None) -> GateOutputs:
        u = self.unit(task)
        z = u.encoder(emb, mode, rng)
        z_lf = u.transfer(z, mode, rng)
        z_rec = u.inverse_transfer(z_lf, mode, rng)
        y = u.head(z, mode, rng)
        return GateOutputs(z, z_lf, z_rec, y)

    def forward(self, task: str, x, mode: str = "eval", rng: np.random.Generator | None = None) -> GateOutputs:
        self.unit(task)
        return self.forward_embedding(task, self.embed(x, mode, rng), mode, rng)

    def lf_point(self, task: str, emb: Tensor, mode: str = "eval",
                 rng: np.random.Generator | None = None) -> Tensor:
        u = self.unit(task)
        return u.transfer(u.encoder(emb, mode, rng), mode, rng)

    def decode_lf(self, task: str, lf: Tensor, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> Tensor:
        """Predict task ``task`` from a point in the locally flat frame."""
        u = self.unit(task)
        return u.head(u.inverse_transfer(lf, mode, rng), mode, rng)

    def detour(self, from_task: str, to_task: str, x, mode: str = "eval",
               rng: np.random.Generator | None = None) -> Tensor:
        """head_t(inverse_transfer_t(transfer_a(encoder_a(backbone(x)))))."""
        self.unit(from_task)
        self.unit(to_task)
        if from_task == to_task:
            raise ValueError("detour needs two different tasks")
        emb = self.embed(x, mode, rng)
        return self.decode_lf(to_task, self.lf_point(from_task, emb, mode, rng), mode, rng)

    def predict(self, task: str, x) -> np.ndarray:
        return self.forward(task, x, "eval").prediction.data[:, 0]

    # -- task addition ----------------------------------------------------

    def freeze_all(self) -> None:
        for net in self.blocks().values():
            net.frozen = True

    def add_target_unit(self, task_id: str, seed: int = 0) -> RegressionUnit:
        _check_task_id(task_id)
        if task_id in self.units:
            raise DuplicateTaskError(f"task {task_id!r} already registered")
        self.freeze_all()
        unit = RegressionUnit.create(task_id, self.config, np.random.default_rng(seed))
        self.units[task_id] = unit
        self.target_tasks.append(task_id)
        return unit


class MtlModel(_ModelBase):
    """Backbone and one shared encoder; tasks differ only in their heads."""

    kind = "mtl"

    def __init__(self, backbone: Mlp, shared_encoder: Mlp, heads: dict[str, Mlp],
                 source_tasks: list[str], target_tasks: list[str] | None = None,
                 config: NetworkConfig | None = None):
        target_tasks = list(target_tasks or [])
        if set(source_tasks) & set(target_tasks):
            raise ValueError("source and target tasks must be disjoint")
        if set(heads) != set(source_tasks) | set(target_tasks):
            raise ValueError("heads must cover exactly the registered tasks")
        self.backbone = backbone
        self.shared_encoder = shared_encoder
        self.heads = dict(heads)
        self.source_tasks = list(source_tasks)
        self.target_tasks = target_tasks
        self.config = config or NetworkConfig(input_dim=backbone.in_dim)

    @classmethod
    def create(cls, source_tasks: list[str], cfg: NetworkConfig, seed: int = 0) -> "MtlModel":
        if len(set(source_tasks)) != len(source_tasks):
            raise DuplicateTaskError("duplicate task ids")
        for t in source_tasks:
            _check_task_id(t)
        rng = np.random.default_rng(seed)
        backbone = build_backbone(cfg, rng)
        encoder = build_encoder(cfg, rng)
        heads = {t: build_head(cfg, rng) for t in source_tasks}
        return cls(backbone, encoder, heads, source_tasks, [], cfg)

    @property
    def tasks(self) -> list[str]:
        return self.source_tasks + self.target_tasks

    def blocks(self) -> dict[str, Mlp]:
        out = {"backbone": self.backbone, "shared_encoder": self.shared_encoder}
        for t in self.tasks:
            out[f"head.{t}"] = self.heads[t]
        return out

    def latent(self, x, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        return self.shared_encoder(self.embed(x, mode, rng), mode, rng)

    def head(self, task: str) -> Mlp:
        try:
            return self.heads[task]
        except KeyError:
            raise UnknownTaskError(task) from None

    def forward(self, task: str, x, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        head = self.head(task)
        return head(self.latent(x, mode, rng), mode, rng)

    def predict(self, task: str, x) -> np.ndarray:
        return self.forward(task, x, "eval").data[:, 0]

    def add_head(self, task_id: str, seed: int = 0) -> Mlp:
        _check_task_id(task_id)
        if task_id in self.heads:
            raise DuplicateTaskError(f"task {task_id!r} already registered")
        for net in self.blocks().values():
            net.frozen = True
        head = build_head(self.config, np.random.default_rng(seed))
        self.heads[task_id] = head
        self.target_tasks.append(task_id)
        return head


class SingleModel(_ModelBase):
    kind = "single"

    def __init__(self, backbone: Mlp, encoder: Mlp, head: Mlp, task_id: str,
                 config: NetworkConfig | None = None):
        _check_task_id(task_id)
        self.backbone = backbone
        self.encoder = encoder
        self.head = head
        self.task_id = task_id
        self.config = config or NetworkConfig(input_dim=backbone.in_dim)

    @classmethod
    def create(cls, task_id: str, cfg: NetworkConfig, seed: int = 0) -> "SingleModel":
        rng = np.random.default_rng(seed)
        return cls(build_backbone(cfg, rng), build_encoder(cfg, rng), build_head(cfg, rng), task_id, cfg)

    @property
    def tasks(self) -> list[str]:
        return [self.task_id]

    @property
    def source_tasks(self) -> list[str]:
        return []

    @property
    def target_tasks(self) -> list[str]:
        return [self.task_id]

    def blocks(self) -> dict[str, Mlp]:
        return {"backbone": self.backbone, "encoder": self.encoder, "head": self.head}

    def forward(self, task: str, x, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        if task != self.task_id:
            raise UnknownTaskError(task)
        return self.head(self.encoder(self.embed(x, mode, rng), mode, rng), mode, rng)

    def predict(self, task: str, x) -> np.ndarray:
        return self.forward(task, x, "eval").data[:, 0]


# functional aliases mirroring the operation names used in the docs

def gate_forward(model: GateModel, task: str, x, mode: str = "eval", rng=None) -> GateOutputs:
    return model.forward(task, x, mode, rng)


def gate_detour(model: GateModel, from_task: str, to_task: str, x, mode: str = "eval", rng=None) -> Tensor:
    return model.detour(from_task, to_task, x, mode, rng)


def mtl_forward(model: MtlModel, task: str, x, mode: str = "eval", rng=None) -> Tensor:
    return model.forward(task, x, mode, rng)


def single_forward(model: SingleModel, x, mode: str = "eval", rng=None) -> Tensor:
    return model.forward(model.task_id, x, mode, rng)
