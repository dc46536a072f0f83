"""
Annotated layer records: validation, synthetic generation, CSV I/O, splits.

Record CSV format (UTF-8, LF, one row per trace and layer)::

    source_id,trace_index,latitude,longitude,layer_index,thickness,complete

``complete`` is ``1`` or ``0``. Incomplete entries may leave ``thickness``
empty; they are held in memory as NaN and are never treated as zero.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .geograph import GraphSequence, build_sequence

CSV_HEADER = ["source_id", "trace_index", "latitude", "longitude", "layer_index",
              "thickness", "complete"]

# Greenland bounding box for synthetic flight lines
LAT_RANGE = (60.0, 82.0)
LON_RANGE = (-73.0, -12.0)


@dataclass(eq=False)
class LayerRecord:
    """Per-trace coordinates and the thickness of every annotated layer.

    ``thickness`` is ``num_traces x num_layers`` with the youngest layer in
    column 0. ``complete`` has the same shape.
    """

    source_id: str
    latitude: np.ndarray
    longitude: np.ndarray
    thickness: np.ndarray
    complete: np.ndarray = None

    def __post_init__(self):
        self.latitude = np.asarray(self.latitude, dtype=np.float64)
        self.longitude = np.asarray(self.longitude, dtype=np.float64)
        self.thickness = np.asarray(self.thickness, dtype=np.float64)
        if self.complete is None:
            self.complete = np.isfinite(self.thickness)
        self.complete = np.asarray(self.complete, dtype=bool)
        t = self.latitude.shape[0]
        if self.longitude.shape != (t,) or self.thickness.ndim != 2 \
                or self.thickness.shape[0] != t or self.complete.shape != self.thickness.shape:
            raise DataError(f"record {self.source_id!r}: inconsistent array shapes")
        vals = self.thickness[self.complete]
        if not np.isfinite(vals).all():
            raise DataError(f"record {self.source_id!r}: complete entry without a thickness")
        if (vals < 0).any():
            raise DataError(f"record {self.source_id!r}: negative thickness")

    @property
    def num_traces(self) -> int:
        return self.latitude.shape[0]

    @property
    def num_layers(self) -> int:
        return self.thickness.shape[1]

    def complete_layers(self) -> np.ndarray:
        """Indices of layers that are complete across every trace."""
        return np.flatnonzero(self.complete.all(axis=0))

    def same_as(self, other: "LayerRecord") -> bool:
        return (self.source_id == other.source_id
                and np.array_equal(self.latitude, other.latitude)
                and np.array_equal(self.longitude, other.longitude)
                and np.array_equal(self.thickness, other.thickness, equal_nan=True)
                and np.array_equal(self.complete, other.complete))


@dataclass(frozen=True)
class Validation:
    accepted: bool
    reason: str
    num_complete: int

    def __bool__(self) -> bool:
        return self.accepted


def validate(record: LayerRecord, min_layers: int = 20) -> Validation:
    """Accept a record iff at least ``min_layers`` layers are complete on every trace."""
    n = len(record.complete_layers())
    if n < min_layers:
        return Validation(False, f"insufficient complete layers ({n} < {min_layers})", n)
    return Validation(True, "ok", n)


def record_to_sequence(record: LayerRecord, p: int, q: int, mode: str = "as-printed",
                       require_targets: bool = True) -> GraphSequence:
    """Use the first ``p + q`` complete layers, in youngest-first order."""
    layers = record.complete_layers()
    need = p + q if require_targets else p
    if len(layers) < need:
        raise DataError(f"record {record.source_id!r}: {len(layers)} complete layers, "
                        f"need {need}")
    layers = layers[:p + q]
    return build_sequence(record.latitude, record.longitude, record.thickness[:, layers], p, q,
                          source_id=record.source_id, mode=mode, layer_index=layers,
                          require_targets=require_targets)


# -- splits ------------------------------------------------------------------------

@dataclass
class SplitSpec:
    """One train/val/test assignment (ratio 3:1:1, remainder to train)."""

    version: int
    seed: int
    train: list[str]
    val: list[str]
    test: list[str]

    @property
    def assignment(self) -> dict[str, str]:
        out = {sid: "train" for sid in self.train}
        out.update({sid: "val" for sid in self.val})
        out.update({sid: "test" for sid in self.test})
        return out

    def to_json(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test),
                "seed": self.seed}


def split_counts(n: int) -> tuple[int, int, int]:
    """Exact 3:1:1 integer split of ``n`` with the remainder given to train."""
    val = test = n // 5
    return n - val - test, val, test


def make_splits(records, num_versions: int = 5, base_seed: int = 0) -> list[SplitSpec]:
    """Version ``k`` permutes all records with seed ``base_seed + k``, then cuts 3:1:1.

    ``records`` may be ``LayerRecord`` objects or plain source ids.
    """
    ids = [r.source_id if isinstance(r, LayerRecord) else str(r) for r in records]
    if not ids:
        raise DataError("cannot split an empty record list")
    if len(set(ids)) != len(ids):
        raise DataError("duplicate source ids")
    n_train, n_val, _ = split_counts(len(ids))
    out = []
    for k in range(num_versions):
        seed = base_seed + k
        order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
        out.append(SplitSpec(k, seed, order[:n_train], order[n_train:n_train + n_val],
                             order[n_train + n_val:]))
    return out


def save_manifest(splits: list[SplitSpec], path) -> None:
    doc = {str(s.version): s.to_json() for s in splits}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_manifest(path) -> dict[int, SplitSpec]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return {int(k): SplitSpec(int(k), int(v["seed"]), list(v["train"]), list(v["val"]),
                                  list(v["test"])) for k, v in doc.items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed split manifest {path}: {exc}") from None


# -- normalisation ---------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureStats:
    """Mean/std of latitude, longitude and thickness, from the training split."""

    lat_mean: float = 0.0
    lat_std: float = 1.0
    lon_mean: float = 0.0
    lon_std: float = 1.0
    thickness_mean: float = 0.0
    thickness_std: float = 1.0

    @classmethod
    def identity(cls) -> "FeatureStats":
        return cls()

    @classmethod
    def from_sequences(cls, sequences: list[GraphSequence]) -> "FeatureStats":
        if not sequences:
            raise DataError("normalisation statistics need at least one sequence")
        lat = np.concatenate([s.inputs[0].latitude for s in sequences])
        lon = np.concatenate([s.inputs[0].longitude for s in sequences])
        thick = [g.thickness for s in sequences for g in s.inputs]
        thick += [s.targets.ravel() for s in sequences if s.targets is not None]
        thick = np.concatenate(thick)

        def std(x):
            v = float(x.std())
            return v if v > 1e-12 else 1.0

        return cls(float(lat.mean()), std(lat), float(lon.mean()), std(lon),
                   float(thick.mean()), std(thick))

    @property
    def feature_mean(self) -> np.ndarray:
        return np.array([self.lat_mean, self.lon_mean, self.thickness_mean])

    @property
    def feature_std(self) -> np.ndarray:
        return np.array([self.lat_std, self.lon_std, self.thickness_std])

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# -- synthetic data ------------------------------------------------------------------------

def _moving_average(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return x
    pad = window // 2
    padded = np.pad(x, (pad, window - 1 - pad), mode="edge")
    return np.convolve(padded, np.ones(window) / window, mode="valid")


def _standardise(x: np.ndarray) -> np.ndarray:
    x = x - x.mean()
    s = x.std()
    return x / s if s > 0 else x


@dataclass
class SyntheticConfig:
    """Generator knobs. The depth correlation ``rho`` is specific to this
    generator; real data has no such parameter."""

    num_traces: int = 256
    num_layers: int = 20
    rho: float = 0.8
    base_top: float = 12.0
    base_decay: float = 0.3
    amplitude: float = 3.0
    noise_std: float = 0.15
    step_deg: float = 0.002
    smooth_window: int = 31
    noise_window: int = 9


def _flight_line(rng: np.random.Generator, n: int, step: float) -> tuple[np.ndarray, np.ndarray]:
    span = step * n
    lat0 = rng.uniform(LAT_RANGE[0] + span, LAT_RANGE[1] - span)
    lon0 = rng.uniform(LON_RANGE[0] + 4 * span, LON_RANGE[1] - 4 * span)
    heading = rng.uniform(0.0, 2.0 * np.pi) + np.cumsum(rng.normal(0.0, 0.05, n))
    heading = _moving_average(heading, 15)
    dlat = step * np.cos(heading)
    dlon = step * np.sin(heading) / np.cos(np.radians(lat0))
    lat = np.clip(lat0 + np.concatenate([[0.0], np.cumsum(dlat[:-1])]), *LAT_RANGE)
    lon = np.clip(lon0 + np.concatenate([[0.0], np.cumsum(dlon[:-1])]), *LON_RANGE)
    return lat, lon


def generate_record(index: int, seed: int, cfg: SyntheticConfig) -> LayerRecord:
    """Layer ``l`` thickness = base(l) + amplitude * rho**l * shared(t) + noise_l(t)."""
    rng = np.random.default_rng([seed, index])
    n, L = cfg.num_traces, cfg.num_layers
    lat, lon = _flight_line(rng, n, cfg.step_deg)
    shared = rng.normal() + _standardise(
        _moving_average(np.cumsum(rng.normal(size=n)), cfg.smooth_window))
    depth = np.arange(L)
    base = cfg.base_top - cfg.base_decay * depth
    noise = np.stack([_standardise(_moving_average(rng.normal(size=n), cfg.noise_window))
                      for _ in range(L)], axis=1)
    thick = base + cfg.amplitude * np.outer(shared, cfg.rho ** depth) + cfg.noise_std * noise
    thick = np.maximum(thick, 0.0)
    return LayerRecord(f"syn{seed}-{index:05d}", lat, lon, thick, np.ones((n, L), dtype=bool))


def generate_synthetic(num_records: int, num_traces: int = 256, num_layers: int = 20,
                       seed: int = 0, p: int = 5, q: int = 15, **kwargs) -> list[LayerRecord]:
    """Deterministic synthetic stand-in records.

    Record ``i`` draws from its own substream seeded by ``(seed, i)``.
    """
    if num_layers < p + q:
        raise ConfigError(f"num_layers={num_layers} is fewer than p+q={p + q}")
    if num_traces < 2:
        raise ConfigError("need at least two traces per record")
    cfg = SyntheticConfig(num_traces=num_traces, num_layers=num_layers, **kwargs)
    return [generate_record(i, seed, cfg) for i in range(num_records)]


# -- CSV I/O --------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_records_csv(records, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        for t in range(r.num_traces):
            lat, lon = _fmt(r.latitude[t]), _fmt(r.longitude[t])
            for layer in range(r.num_layers):
                ok = bool(r.complete[t, layer])
                val = r.thickness[t, layer]
                w.writerow([r.source_id, t, lat, lon, layer,
                            _fmt(val) if np.isfinite(val) else "", 1 if ok else 0])


def save_records(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        write_records_csv(records, f)


def _parse_float(text: str, what: str, line: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"invalid {what} {text!r}", line) from None


def _parse_int(text: str, what: str, line: int) -> int:
    try:
        v = int(text)
    except ValueError:
        raise DataError(f"invalid {what} {text!r}", line) from None
    if v < 0:
        raise DataError(f"negative {what}", line)
    return v


def read_records_csv(stream) -> list[LayerRecord]:
    reader = csv.reader(stream)
    header = next(reader, None)
    if header != CSV_HEADER:
        raise DataError(f"expected header {','.join(CSV_HEADER)}", 1)
    rows: dict[str, dict] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise DataError(f"expected {len(CSV_HEADER)} fields, got {len(row)}", lineno)
        sid, trace, lat, lon, layer, thick, complete = row
        t = _parse_int(trace, "trace_index", lineno)
        k = _parse_int(layer, "layer_index", lineno)
        latv = _parse_float(lat, "latitude", lineno)
        lonv = _parse_float(lon, "longitude", lineno)
        if complete not in ("0", "1"):
            raise DataError(f"complete flag must be 0 or 1, got {complete!r}", lineno)
        ok = complete == "1"
        if thick == "":
            if ok:
                raise DataError("complete entry without a thickness", lineno)
            tv = float("nan")
        else:
            tv = _parse_float(thick, "thickness", lineno)
            if ok and (not np.isfinite(tv) or tv < 0):
                raise DataError(f"invalid thickness {thick!r} for a complete entry", lineno)
        rec = rows.setdefault(sid, {"coords": {}, "cells": {}})
        if (t, k) in rec["cells"]:
            raise DataError(f"duplicate row for trace {t}, layer {k}", lineno)
        prev = rec["coords"].setdefault(t, (latv, lonv, lineno))
        if prev[:2] != (latv, lonv):
            raise DataError(f"trace {t} coordinates differ from line {prev[2]}", lineno)
        rec["cells"][(t, k)] = (tv, ok)

    records = []
    for sid, rec in rows.items():
        n_traces = max(rec["coords"]) + 1
        n_layers = max(k for _, k in rec["cells"]) + 1
        if len(rec["cells"]) != n_traces * n_layers or len(rec["coords"]) != n_traces:
            raise DataError(f"record {sid!r}: missing (trace, layer) rows")
        lat = np.array([rec["coords"][t][0] for t in range(n_traces)])
        lon = np.array([rec["coords"][t][1] for t in range(n_traces)])
        thick = np.empty((n_traces, n_layers))
        comp = np.empty((n_traces, n_layers), dtype=bool)
        for (t, k), (v, ok) in rec["cells"].items():
            thick[t, k] = v
            comp[t, k] = ok
        records.append(LayerRecord(sid, lat, lon, thick, comp))
    return records


def load_records(path) -> list[LayerRecord]:
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    with open(path, encoding="utf-8", newline="") as f:
        return read_records_csv(f)


def records_to_csv_text(records) -> str:
    buf = io.StringIO()
    write_records_csv(records, buf)
    return buf.getvalue()
