"""Binary checkpoints: header, raw little-endian f64 parameters, optimizer moments.

Layout::

    8 bytes   magic  b"VFCKPT\\x00\\x00"
    u32 LE    format version
    u32 LE    header length L
    L bytes   UTF-8 JSON header (sorted keys): configs, layout, epoch, sampler and optimizer scalars
    8n bytes  parameters
    8n bytes  first moments
    8n bytes  second moments

Round trips are bit exact, and equal inputs produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .mlp import Model, ModelConfig
from .optim import OptimizerState

MAGIC = b"VFCKPT\x00\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Model
    optimizer: OptimizerState
    epoch: int  # completed epochs
    header: dict

    @property
    def train_config(self) -> dict:
        return self.header.get("train_config", {})


def encode_checkpoint(model: Model, opt: OptimizerState, epoch: int, extra: dict | None = None) -> bytes:
    p = model.params
    header = {
        "epoch": int(epoch),
        "model_config": model.config.to_dict(),
        "layout": [[s.name, list(s.shape)] for s in p.segments.values()],
        "optimizer": {
            "step": opt.step,
            "base_lr": opt.base_lr,
            "decay_rate": opt.decay_rate,
            "total_epochs": opt.total_epochs,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "epsilon": opt.epsilon,
        },
    }
    header.update(extra or {})
    blob = json.dumps(header, sort_keys=True).encode()
    body = b"".join(a.astype("<f8").tobytes() for a in (p.data, opt.m, opt.v))
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + body


def save_checkpoint(path, model: Model, opt: OptimizerState, epoch: int, extra: dict | None = None) -> None:
    io.atomic_write(path, encode_checkpoint(model, opt, epoch, extra))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(data[_PREFIX.size : start].decode())
        model = Model(ModelConfig.from_dict(header["model_config"]))
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    layout = [[s.name, list(s.shape)] for s in model.params.segments.values()]
    if layout != header["layout"]:
        raise CheckpointError(f"{path}: parameter layout does not match its model configuration")
    n = len(model.params)
    if len(data) - start != 24 * n:
        raise CheckpointError(f"{path}: expected {24 * n} body bytes, found {len(data) - start}")
    body = np.frombuffer(data, dtype="<f8", offset=start)
    model.params.data[:] = body[:n]
    o = header["optimizer"]
    opt = OptimizerState(
        size=n,
        base_lr=o["base_lr"],
        decay_rate=o["decay_rate"],
        total_epochs=o["total_epochs"],
        beta1=o["beta1"],
        beta2=o["beta2"],
        epsilon=o["epsilon"],
        step=o["step"],
        m=body[n : 2 * n].astype(np.float64),
        v=body[2 * n :].astype(np.float64),
    )
    return Checkpoint(model, opt, int(header["epoch"]), header)
