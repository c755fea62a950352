"""Binary checkpoints: magic, JSON manifest, raw little-endian float64 payload.

Layout::

    b"DASD1" | uint64 LE manifest length | manifest JSON (UTF-8) | payload

The manifest lists every tensor with its shape, byte offset into the payload
and frozen flag, plus the config hash, a PRNG state and a SHA-256 of the
payload. Optimiser moments travel as ordinary entries under ``optim.``;
generated ``W^z`` matrices are never stored.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import ParamStore

MAGIC = b"DASD1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class TruncatedPayload(CheckpointError):
    pass


class ManifestMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    store: ParamStore
    config: dict | None = None
    config_hash: str | None = None
    rng_state: int | None = None
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _entries(store: ParamStore, arrays: dict[str, np.ndarray]):
    for name, t in store.items():
        yield name, t.data, store.is_frozen(name), "param"
    for name in sorted(arrays):
        yield name, np.asarray(arrays[name], dtype=np.float64), None, "array"


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name, data, frozen, kind in _entries(ckpt.store, ckpt.arrays):
        if isinstance(data, np.ndarray) and data.dtype != np.float64:
            raise CheckpointError(f"{name}: only float64 tensors are stored")
        raw = np.ascontiguousarray(data, dtype=_DTYPE).tobytes()
        entry = {"name": name, "kind": kind, "shape": list(data.shape), "dtype": "f64", "offset": offset,
                 "nbytes": len(raw)}
        if frozen is not None:
            entry["frozen"] = frozen
        tensors.append(entry)
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format": FORMAT_VERSION,
        "tensors": tensors,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "rng_state": None if ckpt.rng_state is None else str(ckpt.rng_state),
        "meta": ckpt.meta,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + _LEN.pack(len(text)) + text + payload


def loads_checkpoint(blob: bytes) -> Checkpoint:
    if not blob.startswith(MAGIC):
        raise BadMagic("not a DASD1 checkpoint")
    head = len(MAGIC) + _LEN.size
    if len(blob) < head:
        raise TruncatedPayload("file ends inside the header")
    (mlen,) = _LEN.unpack_from(blob, len(MAGIC))
    if len(blob) < head + mlen:
        raise TruncatedPayload("file ends inside the manifest")
    try:
        manifest = json.loads(blob[head:head + mlen])
    except ValueError as exc:
        raise ManifestMismatch(f"manifest is not valid JSON: {exc}") from None
    payload = blob[head + mlen:]
    if len(payload) < manifest["payload_bytes"]:
        raise TruncatedPayload(f"payload has {len(payload)} of {manifest['payload_bytes']} bytes")
    if len(payload) > manifest["payload_bytes"]:
        raise ManifestMismatch("trailing bytes after payload")
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise ManifestMismatch("payload checksum does not match manifest")
    store, arrays, expect = ParamStore(), {}, 0
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) * _DTYPE.itemsize
        if e["offset"] != expect or e["nbytes"] != n or e["dtype"] != "f64":
            raise ManifestMismatch(f"bad layout for {e['name']}")
        data = np.frombuffer(payload, dtype=_DTYPE, count=n // 8, offset=e["offset"])
        data = data.reshape(e["shape"]).astype(np.float64)
        if e["kind"] == "param":
            store.add(e["name"], data, frozen=e["frozen"])
        else:
            arrays[e["name"]] = data
        expect += n
    if expect != manifest["payload_bytes"]:
        raise ManifestMismatch("tensor extents do not cover the payload")
    rng = manifest.get("rng_state")
    return Checkpoint(store, manifest.get("config"), manifest.get("config_hash"),
                      None if rng is None else int(rng), arrays, manifest.get("meta") or {})


def save_checkpoint(ckpt: Checkpoint | ParamStore, path) -> None:
    if isinstance(ckpt, ParamStore):
        ckpt = Checkpoint(ckpt)
    Path(path).write_bytes(dumps_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())


def read_manifest(path) -> dict:
    """Manifest only, without reading tensor data into a store."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise BadMagic("not a DASD1 checkpoint")
    (mlen,) = _LEN.unpack_from(blob, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    return json.loads(blob[start:start + mlen])
