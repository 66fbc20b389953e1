"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"SOMNCKPT"
    version      uint16    1
    digest       32 bytes  SHA-256 of the network config's canonical JSON
    meta_len     uint32
    meta         meta_len bytes of UTF-8 JSON (sorted keys): config,
                 binarized_layers and training metadata
    array_count  uint32
    then per array:
      name_len   uint16
      name       UTF-8
      ndim       uint8
      dims       ndim x uint32
      data       prod(dims) x float32

Arrays are written in insertion order: network parameters first, then any
``mask/<param>`` and ``latent/<param>`` arrays contributed by compression hooks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List

import numpy as np

from .errors import DigestMismatch, ParseError
from .model import Network, NetworkConfig

MAGIC = b"SOMNCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: Dict[str, np.ndarray]
    extra: Dict[str, np.ndarray] = field(default_factory=dict)
    binarized_layers: List[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def digest(self) -> bytes:
        return self.config.digest()

    @property
    def masks(self) -> Dict[str, np.ndarray]:
        return {k[len("mask/"):]: v for k, v in self.extra.items() if k.startswith("mask/")}

    @property
    def latent(self) -> Dict[str, np.ndarray]:
        return {k[len("latent/"):]: v for k, v in self.extra.items() if k.startswith("latent/")}

    @classmethod
    def from_network(cls, network: Network, hooks: Iterable = (), metadata: dict | None = None) -> "Checkpoint":
        extra: Dict[str, np.ndarray] = {}
        for hook in hooks:
            extra.update({k: v.copy() for k, v in hook.state().items()})
        return cls(
            config=network.config,
            params={k: v.copy() for k, v in network.params.items()},
            extra=extra,
            binarized_layers=sorted(network.binarized_layers),
            metadata=dict(metadata or {}),
        )

    def to_network(self) -> Network:
        return Network(self.config, {k: v.astype(np.float64) for k, v in self.params.items()},
                       self.binarized_layers)

    def restore_into(self, network: Network, hooks: Iterable = ()) -> None:
        if network.config.digest() != self.digest:
            raise DigestMismatch("checkpoint was produced by a different network config")
        network.params = {k: v.astype(np.float64) for k, v in self.params.items()}
        network.binarized_layers = frozenset(self.binarized_layers)
        for hook in hooks:
            hook.load_state(self.extra)

    # ------------------------------------------------------------------
    def to_bytes(self) -> bytes:
        meta = {
            "config": self.config.to_dict(),
            "binarized_layers": list(self.binarized_layers),
            "metadata": self.metadata,
        }
        meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        arrays = list(self.params.items()) + list(self.extra.items())
        out = [MAGIC, struct.pack("<H", VERSION), self.digest,
               struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
        for name, arr in arrays:
            raw = name.encode("utf-8")
            out.append(struct.pack("<H", len(raw)) + raw)
            out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        reader = _Reader(data)
        if reader.take(8) != MAGIC:
            raise ParseError("not a checkpoint file (bad magic)")
        (version,) = reader.unpack("<H")
        if version != VERSION:
            raise ParseError(f"unsupported checkpoint version {version}")
        digest = reader.take(32)
        (meta_len,) = reader.unpack("<I")
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
        config = NetworkConfig.from_dict(meta["config"])
        if config.digest() != digest:
            raise DigestMismatch("checkpoint header digest does not match its embedded config")
        (count,) = reader.unpack("<I")
        params: Dict[str, np.ndarray] = {}
        extra: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = reader.unpack("<H")
            name = reader.take(name_len).decode("utf-8")
            (ndim,) = reader.unpack("<B")
            shape = reader.unpack(f"<{ndim}I")
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
            (extra if "/" in name else params)[name] = arr
        if reader.offset != len(data):
            raise ParseError(f"trailing bytes after offset {reader.offset}")
        return cls(config, params, extra, list(meta["binarized_layers"]), meta["metadata"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise ParseError(f"truncated checkpoint at byte offset {self.offset}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
