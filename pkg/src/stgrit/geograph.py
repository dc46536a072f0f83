"""
Spatial graphs over radar traces.

Each internal layer becomes a fully connected undirected graph whose nodes are
along-track traces. Edge weights are the reciprocal of a haversine-style
central angle between trace coordinates.

Two angle formulas are available:

``"as-printed"``
    ``2 * arcsin(hav(dlat) + cos(lat1) cos(lat2) hav(dlon))``, without the
    square root of the textbook formula. This is the default.
``"standard"``
    ``2 * arcsin(sqrt(...))``, the great-circle central angle.

In both modes the arcsin argument is clamped to ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

HAVERSINE_MODES = ("as-printed", "standard")
DEFAULT_MIN_ANGLE = 1e-9


def _hav(theta):
    return np.sin(theta / 2.0) ** 2


def haversine_angle(lat1, lon1, lat2, lon2, mode: str = "as-printed"):
    """Central angle in radians between points given in degrees.

    Accepts scalars or broadcastable arrays.
    """
    if mode not in HAVERSINE_MODES:
        raise ValueError(f"unknown haversine mode {mode!r}")
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dlam = np.radians(np.asarray(lon2, dtype=np.float64) - lon1)
    arg = _hav(phi2 - phi1) + np.cos(phi1) * np.cos(phi2) * _hav(dlam)
    arg = np.clip(arg, 0.0, 1.0)
    if mode == "standard":
        arg = np.sqrt(arg)
    angle = 2.0 * np.arcsin(arg)
    return float(angle) if np.ndim(angle) == 0 else angle


def edge_weight(angle, min_angle: float = DEFAULT_MIN_ANGLE):
    """Reciprocal angle, with the angle clamped below at ``min_angle``."""
    w = 1.0 / np.maximum(angle, min_angle)
    return float(w) if np.ndim(w) == 0 else w


def edge_weight_matrix(latitude: np.ndarray, longitude: np.ndarray, mode: str = "as-printed",
                       min_angle: float = DEFAULT_MIN_ANGLE) -> np.ndarray:
    lat = np.asarray(latitude, dtype=np.float64)
    lon = np.asarray(longitude, dtype=np.float64)
    angles = haversine_angle(lat[:, None], lon[:, None], lat[None, :], lon[None, :], mode)
    w = edge_weight(angles, min_angle)
    # enforce exact symmetry; the formula is symmetric only up to rounding
    w = np.triu(w, 1)
    return w + w.T


def _check_coordinates(latitude: np.ndarray, longitude: np.ndarray) -> None:
    if latitude.shape != longitude.shape or latitude.ndim != 1:
        raise ShapeError("latitude and longitude must be 1-D arrays of equal length")
    if not np.isfinite(latitude).all() or not np.isfinite(longitude).all():
        raise DataError("coordinates must be finite")
    if (np.abs(latitude) > 90).any():
        raise DataError("latitude outside [-90, 90]")
    if (np.abs(longitude) > 180).any():
        raise DataError("longitude outside [-180, 180]")


@dataclass(eq=False)
class LayerGraph:
    """One internal layer as a fully connected spatial graph."""

    latitude: np.ndarray
    longitude: np.ndarray
    thickness: np.ndarray
    edge_weight: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = self.num_nodes
        if self.thickness.shape != (n,):
            raise ShapeError(f"thickness shape {self.thickness.shape} != ({n},)")
        if self.edge_weight.shape != (n, n):
            raise ShapeError(f"edge_weight shape {self.edge_weight.shape} != ({n}, {n})")
        if (self.thickness < 0).any():
            raise DataError("negative layer thickness")

    @property
    def num_nodes(self) -> int:
        return self.latitude.shape[0]

    def node_features(self) -> np.ndarray:
        """``num_nodes x 3`` matrix of (latitude, longitude, thickness)."""
        return np.stack([self.latitude, self.longitude, self.thickness], axis=1)


@dataclass(eq=False)
class GraphSequence:
    """``p`` layer graphs over one set of traces, plus the deep-layer targets.

    ``targets`` is ``num_nodes x q`` or ``None`` when the deep layers are
    unknown (prediction on partial records). ``layer_index`` holds the record
    layer number of every input column followed by every target column.
    """

    inputs: list[LayerGraph]
    targets: np.ndarray | None
    source_id: str = ""
    layer_index: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.inputs:
            raise ShapeError("a sequence needs at least one input graph")
        first = self.inputs[0]
        for g in self.inputs[1:]:
            if g.edge_weight is not first.edge_weight and not np.array_equal(
                    g.edge_weight, first.edge_weight):
                raise ShapeError("input graphs must share one edge-weight matrix")
            if not (np.array_equal(g.latitude, first.latitude)
                    and np.array_equal(g.longitude, first.longitude)):
                raise ShapeError("input graphs must share node coordinates")
        if self.targets is not None and self.targets.shape[0] != first.num_nodes:
            raise ShapeError("targets row count must equal num_nodes")

    @property
    def p(self) -> int:
        return len(self.inputs)

    @property
    def q(self) -> int:
        return 0 if self.targets is None else self.targets.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.inputs[0].num_nodes

    @property
    def edge_weight(self) -> np.ndarray:
        return self.inputs[0].edge_weight

    def node_features(self) -> np.ndarray:
        """``p x num_nodes x 3`` stacked features."""
        return np.stack([g.node_features() for g in self.inputs])


def build_layer_graph(latitude, longitude, thickness, mode: str = "as-printed",
                      min_angle: float = DEFAULT_MIN_ANGLE,
                      edge_weights: np.ndarray | None = None) -> LayerGraph:
    """Fully connected graph over the given traces.

    ``edge_weights`` may be passed to reuse a matrix already computed for the
    same coordinates.
    """
    lat = np.asarray(latitude, dtype=np.float64)
    lon = np.asarray(longitude, dtype=np.float64)
    thick = np.asarray(thickness, dtype=np.float64)
    _check_coordinates(lat, lon)
    if thick.shape != lat.shape:
        raise ShapeError(f"{thick.shape[0] if thick.ndim else 0} thickness values for "
                         f"{lat.shape[0]} nodes")
    if lat.shape[0] < 2:
        raise ShapeError("a layer graph needs at least two nodes")
    if edge_weights is None:
        edge_weights = edge_weight_matrix(lat, lon, mode, min_angle)
    return LayerGraph(lat, lon, thick, edge_weights)


def build_sequence(latitude, longitude, layer_thicknesses, p: int, q: int, *,
                   source_id: str = "", mode: str = "as-printed",
                   min_angle: float = DEFAULT_MIN_ANGLE,
                   layer_index=None, require_targets: bool = True) -> GraphSequence:
    """Split a ``num_nodes x L`` thickness matrix (youngest layer first) into
    ``p`` input graphs and a ``num_nodes x q`` target matrix.

    With ``require_targets=False`` a matrix with only ``p`` columns is
    accepted and the sequence carries no targets.
    """
    thick = np.asarray(layer_thicknesses, dtype=np.float64)
    if thick.ndim != 2:
        raise ShapeError("layer_thicknesses must be a num_nodes x layers matrix")
    if p < 1 or q < 1:
        raise ValueError("p and q must be positive")
    available = thick.shape[1]
    if available < p or (require_targets and available < p + q):
        raise DataError(f"{available} layers available, need {p + q if require_targets else p}")
    lat = np.asarray(latitude, dtype=np.float64)
    lon = np.asarray(longitude, dtype=np.float64)
    _check_coordinates(lat, lon)
    weights = edge_weight_matrix(lat, lon, mode, min_angle)
    inputs = [build_layer_graph(lat, lon, thick[:, k], mode, min_angle, edge_weights=weights)
              for k in range(p)]
    targets = thick[:, p:p + q].copy() if available >= p + q else None
    if layer_index is None:
        layer_index = range(min(available, p + q))
    return GraphSequence(inputs, targets, source_id, tuple(int(i) for i in layer_index))
