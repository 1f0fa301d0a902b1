"""Binary checkpoint format.

Layout: ``ETDCKPT1`` magic, little-endian u64 header length, a UTF-8 JSON
header (sorted keys), then every tensor's raw little-endian float64 bytes
in header order. Nothing time- or host-dependent is stored, so identical
training produces identical files.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .etd import EtdConfig
from .model import LayerParams, ModelConfig, ModelParams
from .tensor import Tensor

MAGIC = b"ETDCKPT1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    etd: EtdConfig | None = None
    step: int = 0
    meta: dict = field(default_factory=dict)
    rng_state: dict | None = None  # batch sampler state at the end of training


def _encode(ckpt: Checkpoint) -> bytes:
    named = ckpt.params.named_tensors()
    header = {
        "format": 1,
        "model": ckpt.params.config.to_dict(),
        "etd": None if ckpt.etd is None else ckpt.etd.canonical().label,
        "step": int(ckpt.step),
        "meta": ckpt.meta,
        "rng": ckpt.rng_state,
        "tensors": [[name, list(t.shape)] for name, t in named],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in named)
    return MAGIC + struct.pack("<Q", len(head)) + head + body


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, _encode(ckpt))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    return _encode(ckpt)


def read_header(path: str | Path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        raw = fh.read(8)
        if len(raw) != 8:
            raise CheckpointError(f"{path}: truncated header")
        (n,) = struct.unpack("<Q", raw)
        head = fh.read(n)
        if len(head) != n:
            raise CheckpointError(f"{path}: truncated header")
    try:
        return json.loads(head.decode("utf-8")), len(MAGIC) + 8 + n
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header, offset = read_header(path)
    blob = path.read_bytes()[offset:]
    config = ModelConfig.from_dict(header["model"])
    tensors: dict[str, Tensor] = {}
    pos = 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if pos + nbytes > len(blob):
            raise CheckpointError(f"{path}: tensor section truncated at {name}")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        tensors[name] = Tensor(arr)
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes after tensor section")
    try:
        layers = [
            LayerParams(*[tensors.pop(f"layers.{i}.{f}") for f in LayerParams.FIELDS])
            for i in range(config.n_layers)
        ]
        params = ModelParams(config, tensors.pop("embed"), layers, tensors.pop("final_norm"), tensors.pop("unembed"))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing tensor {exc}") from None
    params.extra.update(tensors)
    etd = None if header.get("etd") is None else EtdConfig.parse(header["etd"])
    return Checkpoint(params, etd, int(header.get("step", 0)), header.get("meta", {}), header.get("rng"))


def tensor_section_sizes(path: str | Path) -> list[tuple[str, int]]:
    header, _ = read_header(path)
    return [(name, 8 * (int(np.prod(shape)) if shape else 1)) for name, shape in header["tensors"]]
