"""Single-file model checkpoints.

Layout (little-endian)::

    b"IHANCKPT"  u32 format_version
    u64 header_len   header JSON (mode, types, vocabularies, tensor table, config, metrics)
    tensor payload   float64, in header order
    u64 meta_len     metadata JSON (save timestamp)

Everything up to the metadata trailer is a pure function of the model, its
config and metrics, so two identical trainings give identical bytes there.
"""

from __future__ import annotations

import datetime as dt
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ihan.core.tensor import Tensor
from ihan.errors import CheckpointError
from ihan.model import IhanParams, Mode, init_params
from ihan.records import CodeType
from ihan.vocab import Vocabulary

MAGIC = b"IHANCKPT"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    params: IhanParams
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _header(params: IhanParams, config: Mapping, metrics: Mapping) -> tuple[dict, list[np.ndarray]]:
    table, arrays, offset = [], [], 0
    for name, t in params.named_tensors().items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        arrays.append(arr)
    header = {
        "format_version": FORMAT_VERSION,
        "mode": params.mode.value,
        "types": [t.value for t in params.types],
        "embedding_dim": params.embedding_dim,
        "hidden_dim": params.hidden_dim,
        "vocabularies": {k: enc.vocab.to_dict() for k, enc in params.encoders.items()},
        "tensors": table,
        "config": dict(config),
        "metrics": dict(metrics),
    }
    return header, arrays


def save_checkpoint(
    path: str | Path, params: IhanParams, config: Mapping | None = None, metrics: Mapping | None = None
) -> None:
    header, arrays = _header(params, config or {}, metrics or {})
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    meta = json.dumps({"saved_at": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + _U32.pack(FORMAT_VERSION))
        fh.write(_U64.pack(len(head)) + head)
        for arr in arrays:
            fh.write(arr.tobytes())
        fh.write(_U64.pack(len(meta)) + meta)


def _split(blob: bytes) -> tuple[dict, bytes, dict, int]:
    """(header, tensor payload, metadata, length of the timestamp-free prefix)."""
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not an IHAN checkpoint (bad magic)")
    pos = len(MAGIC)
    try:
        (version,) = _U32.unpack_from(blob, pos)
        pos += _U32.size
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version} (reader supports {FORMAT_VERSION})")
        (head_len,) = _U64.unpack_from(blob, pos)
        pos += _U64.size
        header = json.loads(blob[pos : pos + head_len])
        pos += head_len
        payload_len = sum(8 * int(np.prod(t["shape"])) for t in header["tensors"])
        payload = blob[pos : pos + payload_len]
        pos += payload_len
        body_end = pos
        (meta_len,) = _U64.unpack_from(blob, pos)
        pos += _U64.size
        metadata = json.loads(blob[pos : pos + meta_len])
    except (struct.error, json.JSONDecodeError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if len(payload) != payload_len or pos + meta_len != len(blob):
        raise CheckpointError("corrupt checkpoint: truncated or trailing bytes")
    return header, payload, metadata, body_end


def checkpoint_body(path: str | Path) -> bytes:
    """File bytes without the metadata trailer; equal for equal models."""
    blob = Path(path).read_bytes()
    return blob[: _split(blob)[3]]


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    header, payload, metadata, _ = _split(blob)
    mode = Mode(header["mode"])
    types = tuple(CodeType(t) for t in header["types"])
    vocabs = {k: Vocabulary.from_dict(v) for k, v in header["vocabularies"].items()}
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        arr = np.frombuffer(payload, dtype="<f8", count=int(np.prod(shape)), offset=entry["offset"])
        tensors[entry["name"]] = Tensor(arr.reshape(shape).astype(np.float64))
    # build a skeleton of the right shapes, then swap in the stored values
    skeleton = init_params(
        mode, types, vocabs, np.random.default_rng(0), embedding_dim=header["embedding_dim"],
        hidden_dim=header["hidden_dim"],
    )
    expected = skeleton.named_tensors()
    if set(expected) != set(tensors):
        raise CheckpointError(f"tensor names {sorted(tensors)} do not match a {mode} model")
    try:
        params = skeleton.with_tensors(tensors)
    except ValueError as exc:
        raise CheckpointError(f"tensor shapes inconsistent: {exc}") from None
    return Checkpoint(params, header["config"], header["metrics"], metadata, header["format_version"])
