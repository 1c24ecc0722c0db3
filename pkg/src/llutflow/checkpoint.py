"""Versioned binary checkpoints with an embedded model config.

Layout::

    b"LLUTCKPT"  magic
    u32          format version (little endian)
    u64          metadata length
    bytes        UTF-8 JSON metadata (sorted keys)
    bytes        raw array payloads, in metadata order
    32 bytes     sha256 of everything above

Metadata holds the config, the input encoder, hyperparameters, metrics and
an index of arrays (name, dtype, shape, offset, byte length). Writing the
same state twice gives identical bytes. Any flipped byte is caught by the
trailing digest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ModelConfig, validate_config
from .errors import CheckpointError
from .model import Network, build_network
from .quant import FeatureEncoder

MAGIC = b"LLUTCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict
    encoder: Optional[FeatureEncoder] = None
    hyper: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def network(self) -> Network:
        net = build_network(self.config, 0)
        net.load_state(self.state)
        return net


def encode_checkpoint(ck: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name in sorted(ck.state):
        arr = np.asarray(ck.state[name])  # ascontiguousarray would promote 0-d to 1-d
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        index.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    meta = {
        "config": ck.config.to_dict(),
        "config_digest": ck.config.digest(),
        "encoder": ck.encoder.to_dict() if ck.encoder is not None else None,
        "hyper": ck.hyper,
        "metrics": ck.metrics,
        "extra": ck.extra,
        "arrays": index,
    }
    blob = json.dumps(meta, sort_keys=True, allow_nan=True).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(blob)) + blob + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(data: bytes, where: str = "<checkpoint>") -> Checkpoint:
    if len(data) < len(MAGIC) + 12 + 32 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{where}: not a checkpoint file (bad magic)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{where}: digest mismatch, file was modified or truncated; refusing to load")
    version, mlen = struct.unpack("<IQ", body[len(MAGIC):len(MAGIC) + 12])
    if version != VERSION:
        raise CheckpointError(f"{where}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    try:
        meta = json.loads(body[start:start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{where}: corrupt metadata: {exc}") from exc
    payload = body[start + mlen:]
    state = {}
    for e in meta["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{where}: array {e['name']} is truncated")
        state[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    cfg = ModelConfig.from_dict(meta["config"])
    validate_config(cfg)
    if cfg.digest() != meta["config_digest"]:
        raise CheckpointError(f"{where}: embedded config digest mismatch")
    enc = FeatureEncoder.from_dict(meta["encoder"]) if meta.get("encoder") else None
    return Checkpoint(cfg, state, enc, meta.get("hyper", {}), meta.get("metrics", {}), meta.get("extra", {}))


def save_checkpoint(ck: Checkpoint, path) -> str:
    """Write ``ck`` and return the sha256 hex digest of the file."""
    data = encode_checkpoint(ck)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data, str(path))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
