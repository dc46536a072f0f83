"""
Checkpoint files.

Layout::

    8 bytes   magic  b"STGRITCK"
    8 bytes   header length H, unsigned little-endian
    H bytes   UTF-8 JSON header (model config, parameter names and shapes, metadata)
    rest      float64 little-endian parameter values, registry order, row-major

The header is written with sorted keys and compact separators, so loading and
re-saving a checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import FeatureStats
from .errors import DataError
from .model import STGRIT, ModelConfig, parameter_shapes
from .numerics import Tensor

MAGIC = b"STGRITCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: STGRIT, metadata: dict | None = None) -> "Checkpoint":
        return cls(model.config, model.state_dict(), dict(metadata or {}))

    def build_model(self) -> STGRIT:
        params = {k: Tensor(v, requires_grad=True) for k, v in self.state.items()}
        return STGRIT(self.config, params=params)

    @property
    def stats(self) -> FeatureStats:
        return FeatureStats(**self.metadata.get("stats", {}))

    def to_bytes(self) -> bytes:
        shapes = parameter_shapes(self.config)
        header = {
            "format_version": FORMAT_VERSION,
            "model_config": self.config.to_dict(),
            "parameters": [{"name": k, "shape": list(s)} for k, s in shapes.items()],
            "metadata": self.metadata,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(self.state[k], dtype="<f8").tobytes()
                           for k in shapes)
        return MAGIC + struct.pack("<Q", len(head)) + head + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != MAGIC or len(blob) < 16:
            raise DataError("not a checkpoint file")
        (hlen,) = struct.unpack("<Q", blob[8:16])
        try:
            header = json.loads(blob[16:16 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"corrupt checkpoint header: {exc}") from None
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {header.get('format_version')}")
        config = ModelConfig(**header["model_config"])
        expected = {k: list(v) for k, v in parameter_shapes(config).items()}
        listed = {p["name"]: p["shape"] for p in header["parameters"]}
        if listed != expected or [p["name"] for p in header["parameters"]] != list(expected):
            raise DataError("checkpoint parameter registry does not match its model config")
        values = np.frombuffer(blob, dtype="<f8", offset=16 + hlen)
        total = sum(math.prod(s) for s in expected.values())
        if values.size != total:
            raise DataError(f"checkpoint payload holds {values.size} values, expected {total}")
        state, offset = {}, 0
        for name, shape in expected.items():
            n = math.prod(shape)
            state[name] = values[offset:offset + n].astype(np.float64).reshape(shape)
            offset += n
        return cls(config, state, header.get("metadata", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from None
        return cls.from_bytes(blob)
