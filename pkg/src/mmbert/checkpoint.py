"""Binary checkpoint format for parameter snapshots.

Layout (all integers little-endian):

    magic   4 bytes  b"MMBC"
    version u32      format revision, currently 1
    count   u64      number of entries
    entry*  count times:
        name_len u16, name utf-8
        rank     u8
        dims     u64 * rank
        payload  float32 * prod(dims)
    crc32   u32      zlib.crc32 of every byte after the magic

Two reserved entry names carry JSON sidecars rather than parameters:
``__config__`` and ``__meta__`` hold utf-8 JSON encoded as a rank-1
float32 array of byte values, so the format stays single-dtype. Entries
whose name starts with ``table.`` hold the frozen pseudo-encoder feature
tables; they are not model parameters but travel with the weights so a
checkpoint is self-describing. Weights round-trip bitwise; training can
resume from the exact state.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"MMBC"
VERSION = 1
RESERVED = ("__config__", "__meta__")
TABLE_PREFIX = "table."


@dataclass
class CheckpointData:
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    tables: dict[str, np.ndarray] = field(default_factory=dict)


def _json_to_array(obj: dict) -> np.ndarray:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def _array_to_json(arr: np.ndarray) -> dict:
    raw = arr.astype(np.uint8).tobytes()
    return json.loads(raw.decode("utf-8"))


def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise CheckpointError(f"entry name too long: {name[:40]}...")
    arr = np.asarray(arr, dtype=np.float32)
    parts = [struct.pack("<H", len(encoded)), encoded,
             struct.pack("<B", arr.ndim)]
    parts.extend(struct.pack("<Q", d) for d in arr.shape)
    parts.append(arr.tobytes())
    return b"".join(parts)


def encoder_tables(model) -> dict[str, np.ndarray]:
    """Frozen feature tables of the model's pseudo-encoders, if any."""
    tables: dict[str, np.ndarray] = {}
    speech = getattr(model, "speech_enc", None)
    if speech is not None:
        tables["speech.phoneme_table"] = speech.phoneme_table
        tables["speech.token_phonemes"] = np.asarray(speech.token_phonemes)
    vision = getattr(model, "vision_enc", None)
    if vision is not None:
        tables["vision.table"] = vision.table
    return tables


def save_checkpoint(path, params: dict, config: dict | None = None,
                    meta: dict | None = None,
                    tables: dict[str, np.ndarray] | None = None) -> None:
    """Write parameters plus optional JSON config/meta and encoder tables."""
    entries: list[tuple[str, np.ndarray]] = []
    for name, value in params.items():
        if name in RESERVED or name.startswith(TABLE_PREFIX):
            raise CheckpointError(f"parameter name {name!r} is reserved")
        arr = value.data if hasattr(value, "data") else value
        entries.append((name, np.asarray(arr)))
    for name, arr in (tables or {}).items():
        entries.append((TABLE_PREFIX + name, np.asarray(arr)))
    if config is not None:
        entries.append(("__config__", _json_to_array(config)))
    if meta is not None:
        entries.append(("__meta__", _json_to_array(meta)))

    body = [struct.pack("<I", VERSION), struct.pack("<Q", len(entries))]
    body.extend(_pack_entry(n, a) for n, a in entries)
    blob = b"".join(body)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str) -> int:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))[0]


def load_checkpoint(path) -> CheckpointData:
    """Read a checkpoint, verifying magic, version, and checksum."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    if len(raw) < 12:
        raise CheckpointError("checkpoint truncated")
    blob, trailer = raw[4:-4], raw[-4:]
    expect = struct.unpack("<I", trailer)[0]
    actual = zlib.crc32(blob) & 0xFFFFFFFF
    if expect != actual:
        raise CheckpointError(
            f"checksum mismatch (stored {expect:08x}, computed {actual:08x})")

    rd = _Reader(blob)
    version = rd.u("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    count = rd.u("<Q")
    params: dict[str, np.ndarray] = {}
    tables: dict[str, np.ndarray] = {}
    config: dict = {}
    meta: dict = {}
    for _ in range(count):
        name_len = rd.u("<H")
        name = rd.take(name_len).decode("utf-8")
        rank = rd.u("<B")
        dims = tuple(rd.u("<Q") for _ in range(rank))
        n_items = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = rd.take(4 * n_items)
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        if name == "__config__":
            config = _array_to_json(arr)
        elif name == "__meta__":
            meta = _array_to_json(arr)
        elif name.startswith(TABLE_PREFIX):
            tables[name[len(TABLE_PREFIX):]] = arr
        elif name in params:
            raise CheckpointError(f"duplicate entry {name!r}")
        else:
            params[name] = arr
    if rd.pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return CheckpointData(params=params, config=config, meta=meta, tables=tables)


def restore_into(model, data: CheckpointData) -> None:
    """Assign checkpoint arrays into a model's registry, bitwise.

    When the checkpoint carries pseudo-encoder tables they must match the
    model's own (regenerated) tables, otherwise the weights were trained
    against different synthetic features and the restore refuses.
    """
    registry = model.params()
    missing = sorted(set(registry) - set(data.params))
    extra = sorted(set(data.params) - set(registry))
    if missing or extra:
        raise CheckpointError(
            f"parameter names do not match model (missing {missing[:3]}, "
            f"unexpected {extra[:3]})")
    if data.tables:
        own = encoder_tables(model)
        for name, arr in data.tables.items():
            have = own.get(name)
            if have is None or not np.array_equal(
                    arr, np.asarray(have, dtype=np.float32)):
                raise CheckpointError(
                    f"pseudo-encoder table {name!r} does not match the model")
    for name, tensor in registry.items():
        arr = data.params[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {arr.shape}, "
                f"model {tensor.data.shape}")
        tensor.data = arr.astype(tensor.data.dtype, copy=True)
