"""CKP1 checkpoint container.

Layout: ``b"CKP1"``, a little-endian u32 header length, a UTF-8 JSON header
(sorted keys) and the parameters as one little-endian float64 blob in header
order. The header records the configuration kind, ArchSpec,
NormalizationSpec, validation loss, seed, epoch, the parameter layout and the
per-epoch loss curve of the run that produced it.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..profile import ChannelConfig, NormalizationSpec
from .model import ArchSpec, CnnModel, param_shapes

CKP_MAGIC = b"CKP1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: CnnModel
    norm: NormalizationSpec
    val_loss: float
    seed: int
    epoch: int
    loss_curve: list[dict] = field(default_factory=list)

    @property
    def config(self) -> ChannelConfig:
        return self.model.config


def _json_float(x: float):
    return x if math.isfinite(x) else repr(x)


def checkpoint_bytes(ckp: Checkpoint) -> bytes:
    model = ckp.model
    header = {
        "format": "CKP1",
        "config": model.config.kind.value,
        "arch": model.arch.to_dict(),
        "norm": ckp.norm.to_dict(),
        "val_loss": _json_float(float(ckp.val_loss)),
        "seed": int(ckp.seed),
        "epoch": int(ckp.epoch),
        "params": [[name, list(p.shape)] for name, p in model.params.items()],
        "loss_curve": ckp.loss_curve,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params.values())
    return CKP_MAGIC + struct.pack("<I", len(head)) + head + blob


def save_checkpoint(ckp: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckp))


def load_checkpoint(path, dtype=np.float32) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CKP_MAGIC:
        raise CheckpointError(f"{path}: not a CKP1 checkpoint")
    (n,) = struct.unpack_from("<I", data, 4)
    try:
        header = json.loads(data[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    config = ChannelConfig.of(header["config"])
    arch = ArchSpec.from_dict(header["arch"])
    expected = param_shapes(config, arch)
    layout = [(name, tuple(shape)) for name, shape in header["params"]]
    if dict(layout) != expected:
        raise CheckpointError(f"{path}: parameter layout does not match its architecture")
    flat = np.frombuffer(data, dtype="<f8", offset=8 + n)
    total = sum(int(np.prod(s)) for _, s in layout)
    if flat.size != total:
        raise CheckpointError(f"{path}: expected {total} parameters, found {flat.size}")
    params = {}
    pos = 0
    for name, shape in layout:
        size = int(np.prod(shape))
        params[name] = flat[pos:pos + size].reshape(shape).astype(dtype)
        pos += size
    return Checkpoint(
        model=CnnModel(config, arch, params),
        norm=NormalizationSpec.from_dict(header["norm"]),
        val_loss=float(header["val_loss"]),
        seed=int(header["seed"]),
        epoch=int(header["epoch"]),
        loss_curve=header.get("loss_curve", []),
    )
