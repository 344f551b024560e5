"""Checkpoint directories: a JSON manifest plus one float32 blob per parameter.

Layout::

    <dir>/manifest.json
    <dir>/params/<name>.bin     # uint64 LE element count, then float32 LE values
    <dir>/optim/<m|v>.<name>.bin  (optional AdamW moments)

Parameters live in float64 in memory and are rounded to float32 on disk.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
import tempfile
from pathlib import Path

import numpy as np

from .autodiff import AdamW, Mlp
from .model import GateModel, MtlModel, NetworkConfig, RegressionUnit, SingleModel

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
_HEADER = struct.Struct("<Q")


class CheckpointError(RuntimeError):
    pass


class CheckpointKindError(CheckpointError):
    pass


def encode_blob(values: np.ndarray) -> bytes:
    flat = np.ascontiguousarray(values, dtype="<f4").reshape(-1)
    return _HEADER.pack(flat.size) + flat.tobytes()


def decode_blob(raw: bytes, name: str = "?") -> np.ndarray:
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"blob for {name} is truncated")
    (count,) = _HEADER.unpack_from(raw)
    if len(raw) != _HEADER.size + 4 * count:
        raise CheckpointError(f"blob for {name} declares {count} elements but has {len(raw)} bytes")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float64)


def _sha256(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def _task_registry(model) -> dict:
    if isinstance(model, SingleModel):
        return {"task_id": model.task_id}
    return {"source": list(model.source_tasks), "target": list(model.target_tasks)}


def save(model, path: str | Path, optimizer: AdamW | None = None, meta: dict | None = None) -> dict:
    """Write a checkpoint directory atomically (temp dir + rename). Returns the manifest."""
    path = Path(path)
    named = model.named_parameters()
    for name, p in named:
        if not np.all(np.isfinite(p.data)):
            raise CheckpointError(f"refusing to save non-finite parameter {name}")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / "params").mkdir()
        params = {}
        for name, p in named:
            raw = encode_blob(p.data)
            rel = f"params/{name}.bin"
            (tmp / rel).write_bytes(raw)
            params[name] = {"file": rel, "shape": list(p.shape), "bytes": len(raw), "sha256": _sha256(raw)}
        manifest = {
            "format_version": FORMAT_VERSION,
            "model_kind": model.kind,
            "tasks": _task_registry(model),
            "network": model.config.to_dict(),
            "blocks": {name: net.spec() for name, net in model.blocks().items()},
            "params": params,
            "meta": meta or {},
        }
        if optimizer is not None:
            manifest["optimizer"] = _save_optimizer(optimizer, named, tmp)
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def _save_optimizer(opt: AdamW, named, root: Path) -> dict:
    name_of = {id(p): n for n, p in named}
    (root / "optim").mkdir()
    entries = {}
    for p, m, v in zip(opt.params, opt.m, opt.v):
        name = name_of.get(id(p))
        if name is None:
            raise CheckpointError("optimizer holds a parameter that is not part of the model")
        for tag, arr in (("m", m), ("v", v)):
            raw = encode_blob(arr)
            rel = f"optim/{tag}.{name}.bin"
            (root / rel).write_bytes(raw)
            entries[f"{tag}.{name}"] = {"file": rel, "bytes": len(raw), "sha256": _sha256(raw)}
    return {
        "lr": opt.lr, "betas": [opt.beta1, opt.beta2], "eps": opt.eps,
        "weight_decay": opt.weight_decay, "step_count": opt.step_count,
        "param_order": [name_of[id(p)] for p in opt.params], "blobs": entries,
    }


def _read_blob(root: Path, entry: dict, name: str) -> np.ndarray:
    f = root / entry["file"]
    if not f.exists():
        raise CheckpointError(f"missing blob for parameter {name}")
    raw = f.read_bytes()
    if len(raw) != entry["bytes"] or _sha256(raw) != entry["sha256"]:
        raise CheckpointError(f"checksum mismatch for parameter {name}")
    return decode_blob(raw, name)


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    mf = path / MANIFEST
    if not mf.exists():
        raise CheckpointError(f"{path}: missing {MANIFEST}")
    manifest = json.loads(mf.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    return manifest


def _build(manifest: dict):
    kind = manifest["model_kind"]
    cfg = NetworkConfig.from_dict(manifest["network"])
    blocks = {name: Mlp.from_spec(spec) for name, spec in manifest["blocks"].items()}
    tasks = manifest["tasks"]
    if kind == "gate":
        units = {}
        for t in tasks["source"] + tasks["target"]:
            units[t] = RegressionUnit(t, *(blocks[f"unit.{t}.{part}"] for part in RegressionUnit.PARTS))
        return GateModel(blocks["backbone"], units, tasks["source"], tasks["target"], cfg)
    if kind == "mtl":
        heads = {t: blocks[f"head.{t}"] for t in tasks["source"] + tasks["target"]}
        return MtlModel(blocks["backbone"], blocks["shared_encoder"], heads,
                        tasks["source"], tasks["target"], cfg)
    if kind == "single":
        return SingleModel(blocks["backbone"], blocks["encoder"], blocks["head"], tasks["task_id"], cfg)
    raise CheckpointError(f"unknown model kind {kind!r}")


def load(path: str | Path, expect_kind: str | None = None):
    """Return ``(model, optimizer_or_None, manifest)``; freeze flags are restored."""
    path = Path(path)
    manifest = read_manifest(path)
    if expect_kind is not None and manifest["model_kind"] != expect_kind:
        raise CheckpointKindError(
            f"checkpoint holds a {manifest['model_kind']!r} model, expected {expect_kind!r}")
    model = _build(manifest)
    named = dict(model.named_parameters())
    if set(named) != set(manifest["params"]):
        raise CheckpointError("manifest parameter list does not match the network description")
    for name, entry in manifest["params"].items():
        values = _read_blob(path, entry, name)
        p = named[name]
        if values.size != p.data.size:
            raise CheckpointError(f"parameter {name} has {values.size} values, expected {p.data.size}")
        p.data[...] = values.reshape(p.shape)
    optimizer = None
    if "optimizer" in manifest:
        o = manifest["optimizer"]
        optimizer = AdamW([named[n] for n in o["param_order"]], o["lr"], tuple(o["betas"]),
                          o["eps"], o["weight_decay"])
        optimizer.step_count = o["step_count"]
        for k, n in enumerate(o["param_order"]):
            for tag, store in (("m", optimizer.m), ("v", optimizer.v)):
                key = f"{tag}.{n}"
                store[k][...] = _read_blob(path, o["blobs"][key], key).reshape(store[k].shape)
    return model, optimizer, manifest
