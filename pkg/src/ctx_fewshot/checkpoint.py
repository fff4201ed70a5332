"""Binary checkpoint format.

Layout: ``b"CTXF"``, u32 version, u32 header length, UTF-8 JSON header, then
little-endian float32 payloads in header order. The header carries tensor
names and shapes, the config and its hash, the episode counter and the RNG
state.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CTXF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    tensors: dict  # name -> float32 array; prefixes: param/, bn_mean/, bn_var/, adam_m/, adam_v/
    config: dict
    episode: int = 0
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def to_bytes(self) -> bytes:
        names = list(self.tensors)
        header = {
            "tensors": [{"name": n, "shape": list(self.tensors[n].shape)} for n in names],
            "config": self.config,
            "config_hash": config_hash(self.config),
            "episode": int(self.episode),
            "rng_state": self.rng_state,
            "extra": self.extra,
        }
        hbytes = json.dumps(header, sort_keys=True).encode()
        parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
        for n in names:
            parts.append(np.ascontiguousarray(self.tensors[n], dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise CheckpointError("not a CTXF checkpoint")
        version, hlen = struct.unpack("<II", buf[4:12])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(buf[12:12 + hlen])
        if config_hash(header["config"]) != header["config_hash"]:
            raise CheckpointError("config hash mismatch")
        offset = 12 + hlen
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
            tensors[entry["name"]] = arr.astype(np.float32).reshape(shape)
            offset += 4 * count
        if offset != len(buf):
            raise CheckpointError(f"trailing bytes after payload ({len(buf) - offset})")
        return cls(tensors, header["config"], header["episode"], header["rng_state"],
                   header.get("extra", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()
