"""Binary checkpoints, little-endian throughout.

Layout::

    8   magic  b"SCLINVM1"
    u32 version
    32  sha256 of the canonical config text
    f64 time
    u64 step_count
    u32 n_fields
    u64 n_cells
    f64 payload[n_fields * n_cells]   row-major cell order per field
    u64 seed, u64 step_index          noise replay tuple
    f64 ledger[n_fields * 3]          dissipation, ito input, martingale per field
    u32 text_length, utf-8 config text (optional trailer, used for diff summaries)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

MAGIC = b"SCLINVM1"
VERSION = 1
_HEAD = struct.Struct("<8sI32sdQIQ")
_NOISE = struct.Struct("<QQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_hash: bytes
    time: float
    step_count: int
    fields: np.ndarray  # (n_fields, n_cells)
    seed: int
    step_index: int
    ledgers: np.ndarray  # (n_fields, 3)
    config_text: Optional[str] = None
    version: int = VERSION

    def to_bytes(self) -> bytes:
        fields = np.atleast_2d(np.asarray(self.fields, dtype="<f8"))
        ledgers = np.asarray(self.ledgers, dtype="<f8").reshape(fields.shape[0], 3)
        if len(self.config_hash) != 32:
            raise CheckpointError("config hash must be 32 bytes")
        parts = [
            _HEAD.pack(MAGIC, self.version, self.config_hash, float(self.time), int(self.step_count),
                       fields.shape[0], fields.shape[1]),
            fields.tobytes(),
            _NOISE.pack(int(self.seed), int(self.step_index)),
            ledgers.tobytes(),
        ]
        if self.config_text is not None:
            text = self.config_text.encode("utf-8")
            parts.append(struct.pack("<I", len(text)) + text)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _HEAD.size:
            raise CheckpointError("checkpoint is truncated")
        magic, version, digest, time, steps, n_fields, n_cells = _HEAD.unpack_from(data, 0)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a checkpoint")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = _HEAD.size
        n_values = n_fields * n_cells
        need = pos + 8 * n_values + _NOISE.size + 24 * n_fields
        if len(data) < need:
            raise CheckpointError("checkpoint is truncated")
        fields = np.frombuffer(data, dtype="<f8", count=n_values, offset=pos).astype(np.float64).reshape(n_fields, n_cells)
        pos += 8 * n_values
        seed, step_index = _NOISE.unpack_from(data, pos)
        pos += _NOISE.size
        ledgers = np.frombuffer(data, dtype="<f8", count=3 * n_fields, offset=pos).astype(np.float64).reshape(n_fields, 3)
        pos += 24 * n_fields
        text = None
        if len(data) > pos:
            (length,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if len(data) < pos + length:
                raise CheckpointError("checkpoint config trailer is truncated")
            text = data[pos : pos + length].decode("utf-8")
        return cls(digest, time, steps, fields, seed, step_index, ledgers, text, version)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
