"""Versioned binary weight checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"DQAW"
    version u32
    u32 + bytes      UTF-8 JSON header: model config, vocab, subset kind
    u32              tensor count
    per tensor:
        u16 + bytes  name (UTF-8)
        u8  + bytes  dtype string (numpy name, e.g. "float64")
        u8           trainable flag
        u8           ndim
        u32 * ndim   dims
        u64          payload length in bytes
        bytes        raw little-endian array data (C order)

Round-trips are bit-exact: loading and re-saving the same model yields an
identical file.  A checkpoint may hold the full model, only adapters, or
only trainable tensors; partial checkpoints are applied onto an existing
model rather than rebuilt from scratch.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, QAModel
from .tokenizer import Vocab

MAGIC = b"DQAW"
FORMAT_VERSION = 1
SUBSETS = ("all", "adapters", "trainable")


class CheckpointError(Exception):
    """Malformed, truncated, or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    """Decoded checkpoint: header plus named arrays."""

    version: int
    config: ModelConfig
    vocab: Vocab | None
    subset: str
    arrays: dict[str, np.ndarray]
    trainable: dict[str, bool]


def _subset_names(model: QAModel, subset: str) -> list[str]:
    if subset == "all":
        return [n for n, _ in model.named_params()]
    if subset == "adapters":
        return [n for n, _ in model.named_params() if n.startswith("lora.")]
    if subset == "trainable":
        return [n for n, p in model.named_params() if p.requires_grad]
    raise ValueError(f"subset must be one of {SUBSETS}, got {subset!r}")


def save(path: str | Path, model: QAModel, subset: str = "all") -> None:
    """Write the model's tensors (or a named subset) to ``path``."""
    names = _subset_names(model, subset)
    if not names:
        raise CheckpointError(f"subset {subset!r} selects no tensors")
    params = dict(model.named_params())
    header = {
        "config": model.config.to_json_obj(),
        "vocab": json.loads(model.vocab.to_json())
            if model.vocab is not None else None,
        "subset": subset,
    }
    header_blob = json.dumps(header, sort_keys=True,
                             separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION),
              struct.pack("<I", len(header_blob)), header_blob,
              struct.pack("<I", len(names))]
    for name in names:
        p = params[name]
        arr = np.ascontiguousarray(p.data)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.name.encode("ascii")
        payload = arr.tobytes()
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", len(dtype_b)))
        chunks.append(dtype_b)
        chunks.append(struct.pack("<BB", int(p.requires_grad), arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<Q", len(payload)))
        chunks.append(payload)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals


def load(path: str | Path) -> Checkpoint:
    """Decode ``path`` into a Checkpoint without touching any model."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a weight checkpoint")
    version = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported "
            f"(expected {FORMAT_VERSION})")
    header = json.loads(r.take(r.unpack("<I")).decode("utf-8"))
    count = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    trainable: dict[str, bool] = {}
    for _ in range(count):
        name = r.take(r.unpack("<H")).decode("utf-8")
        dtype = np.dtype(r.take(r.unpack("<B")).decode("ascii"))
        train_flag, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        if ndim == 1:
            shape = (shape,)
        nbytes = r.unpack("<Q")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim \
            else dtype.itemsize
        if nbytes != expected:
            raise CheckpointError(
                f"{path}: tensor {name!r} payload {nbytes} bytes, "
                f"shape {shape} implies {expected}")
        arr = np.frombuffer(r.take(nbytes),
                            dtype=dtype.newbyteorder("<")).astype(dtype)
        arrays[name] = arr.reshape(shape)
        trainable[name] = bool(train_flag)
    if r.pos != len(r.blob):
        raise CheckpointError(
            f"{path}: {len(r.blob) - r.pos} trailing bytes after last tensor")
    vocab_obj = header.get("vocab")
    return Checkpoint(
        version=version,
        config=ModelConfig.from_json_obj(header["config"]),
        vocab=Vocab.from_json(json.dumps(vocab_obj))
            if vocab_obj is not None else None,
        subset=header.get("subset", "all"),
        arrays=arrays,
        trainable=trainable,
    )


def load_model(path: str | Path) -> QAModel:
    """Rebuild a full model from a subset="all" checkpoint."""
    ckpt = load(path)
    if ckpt.subset != "all":
        raise CheckpointError(
            f"{path} holds subset {ckpt.subset!r}; a full checkpoint is "
            "needed to rebuild a model (apply partial ones with apply_to)")
    model = QAModel.build(ckpt.config, ckpt.vocab, random_init=False)
    model.load_state_arrays(ckpt.arrays)
    return model


def apply_to(model: QAModel, path: str | Path) -> None:
    """Load a (possibly partial) checkpoint's tensors into ``model``."""
    ckpt = load(path)
    model.load_state_arrays(ckpt.arrays)
