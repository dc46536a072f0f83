"""
ST-GRIT network.

Data flow for one sequence of ``p`` graphs over ``N`` nodes::

    p independent GraphSAGE encoders         -> p tensors of N x d
    stack along a time axis                  -> N x p x d
    n groups of
        temporal block (attend over p, per node) + skip
        spatial block  (attend over N, per step) + skip
    flatten per node                         -> N x (p*d)
    4-layer relu MLP decoder                 -> N x q

There is no positional encoding, so the network is equivariant to node
permutations. The time order reaches it only through the per-step
GraphSAGE parameters.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import FeatureStats
from .errors import ConfigError, ShapeError
from .geograph import GraphSequence
from .numerics import (
    Tensor,
    dropout,
    layer_norm,
    matmul,
    no_grad,
    relu,
    reshape,
    softmax,
    stack,
    transpose,
)

AGGREGATIONS = ("uniform", "weighted")
BLOCK_ROLES = ("temporal", "spatial")


@dataclass
class ModelConfig:
    p: int = 5
    q: int = 15
    in_features: int = 3
    embed_dim: int = 32
    num_heads: int = 8
    num_groups: int = 2
    ff_multiplier: int = 4
    dropout_rate: float = 0.1
    decoder_dims: list[int] = field(default_factory=lambda: [128, 64, 32])
    aggregation: str = "uniform"

    def __post_init__(self):
        self.decoder_dims = [int(v) for v in self.decoder_dims]
        for name in ("p", "q", "in_features", "embed_dim", "num_heads", "num_groups",
                     "ff_multiplier"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim={self.embed_dim} not divisible by "
                              f"num_heads={self.num_heads}")
        if len(self.decoder_dims) != 3 or min(self.decoder_dims) < 1:
            raise ConfigError("decoder_dims must list three positive hidden widths")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def ff_dim(self) -> int:
        return self.ff_multiplier * self.embed_dim

    def to_dict(self) -> dict:
        return asdict(self)


# -- parameter layout ---------------------------------------------------------------

def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered registry of parameter names and shapes; a pure function of the config."""
    d, f, ff = cfg.embed_dim, cfg.in_features, cfg.ff_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for k in range(cfg.p):
        shapes[f"sage.{k}.w_self"] = (f, d)
        shapes[f"sage.{k}.w_neigh"] = (f, d)
        shapes[f"sage.{k}.bias"] = (d,)
    for g in range(cfg.num_groups):
        for role in BLOCK_ROLES:
            pre = f"group.{g}.{role}."
            for w in ("w_q", "w_k", "w_v", "w_o"):
                shapes[pre + w] = (d, d)
            shapes[pre + "ff1.weight"] = (d, ff)
            shapes[pre + "ff1.bias"] = (ff,)
            shapes[pre + "ff2.weight"] = (ff, d)
            shapes[pre + "ff2.bias"] = (d,)
            for ln in ("ln1", "ln2"):
                shapes[pre + ln + ".gamma"] = (d,)
                shapes[pre + ln + ".beta"] = (d,)
    widths = [cfg.p * d, *cfg.decoder_dims, cfg.q]
    for i in range(4):
        shapes[f"decoder.{i}.weight"] = (widths[i], widths[i + 1])
        shapes[f"decoder.{i}.bias"] = (widths[i + 1],)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in parameter_shapes(cfg).values())


def init_parameters(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases 0; layer norms gamma=1, beta=0."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith((".bias", ".beta")):
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


# -- graph encoder ------------------------------------------------------------------

@functools.lru_cache(maxsize=8)
def _uniform_aggregation(n: int) -> np.ndarray:
    a = np.full((n, n), 1.0 / (n - 1))
    np.fill_diagonal(a, 0.0)
    a.setflags(write=False)
    return a


def aggregation_matrix(edge_weight: np.ndarray, mode: str = "uniform") -> np.ndarray:
    """Row-stochastic ``N x N`` neighbour-averaging matrix (zero diagonal).

    ``uniform`` averages all other nodes equally. ``weighted`` uses
    ``w_ij / sum_k w_ik``; a row whose weights are all zero falls back to
    uniform.
    """
    n = edge_weight.shape[0]
    if n < 2:
        raise ShapeError("GraphSAGE aggregation needs at least two nodes")
    uniform = _uniform_aggregation(n)
    if mode == "uniform":
        return uniform
    if mode != "weighted":
        raise ConfigError(f"unknown aggregation {mode!r}")
    w = np.array(edge_weight, dtype=np.float64)
    np.fill_diagonal(w, 0.0)
    totals = w.sum(axis=1, keepdims=True)
    empty = totals[:, 0] <= 0
    out = w / np.where(totals > 0, totals, 1.0)
    out[empty] = uniform[empty]
    return out


def graphsage_forward(x, edge_weight, w_self: Tensor, w_neigh: Tensor, bias: Tensor,
                      aggregation: str = "uniform", agg: np.ndarray | None = None) -> Tensor:
    """``x_i W_self + mean_{j != i}(x_j) W_neigh + bias`` for every node.

    ``agg`` may carry a precomputed :func:`aggregation_matrix`.
    """
    if agg is None:
        agg = aggregation_matrix(np.asarray(edge_weight), aggregation)
    x = x if isinstance(x, Tensor) else Tensor(x)
    neigh = matmul(Tensor(agg), x)
    return matmul(x, w_self) + matmul(neigh, w_neigh) + bias


# -- attention ------------------------------------------------------------------------

def multi_head_attention(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor,
                         num_heads: int, return_weights: bool = False):
    """Self-attention over the second-to-last axis of ``x`` (``[B x] L x d``).

    Column block ``i`` of ``w_q``/``w_k``/``w_v`` (width ``d / num_heads``) is
    head ``i``'s projection, so one ``d x d`` product computes every head.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1, *x.shape))
    if x.ndim != 3:
        raise ShapeError(f"attention input must be [B x] L x d, got {x.shape}")
    b, length, d = x.shape
    if d % num_heads:
        raise ShapeError(f"model width {d} not divisible by {num_heads} heads")
    dk = d // num_heads

    def heads(w):
        return transpose(reshape(matmul(x, w), (b, length, num_heads, dk)), (0, 2, 1, 3))

    # scaling q rather than the L x L scores is cheaper and identical
    q = heads(w_q) * (1.0 / math.sqrt(dk))
    k, v = heads(w_k), heads(w_v)
    scores = matmul(q, transpose(k, (0, 1, 3, 2)))
    weights = softmax(scores, axis=-1)
    ctx = transpose(matmul(weights, v), (0, 2, 1, 3))
    out = matmul(reshape(ctx, (b, length, d)), w_o)
    if squeeze:
        out = reshape(out, (length, d))
    if return_weights:
        return out, weights.data
    return out


def feed_forward(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = relu(matmul(x, params[prefix + "ff1.weight"]) + params[prefix + "ff1.bias"])
    return matmul(h, params[prefix + "ff2.weight"]) + params[prefix + "ff2.bias"]


def attention_block(x: Tensor, params: dict[str, Tensor], prefix: str, num_heads: int,
                    dropout_rate: float = 0.0, training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Post-norm encoder layer over axis -2 of ``x``.

    Whether this is a temporal or spatial block depends only on which axis the
    caller has moved into position -2.
    """
    attn = multi_head_attention(x, params[prefix + "w_q"], params[prefix + "w_k"],
                                params[prefix + "w_v"], params[prefix + "w_o"], num_heads)
    h = layer_norm(x + dropout(attn, dropout_rate, rng, training),
                   params[prefix + "ln1.gamma"], params[prefix + "ln1.beta"])
    ff = feed_forward(h, params, prefix)
    return layer_norm(h + dropout(ff, dropout_rate, rng, training),
                      params[prefix + "ln2.gamma"], params[prefix + "ln2.beta"])


# -- full model ---------------------------------------------------------------------

@dataclass(eq=False)
class PreparedSequence:
    """Model-ready arrays for one sequence (normalised scale)."""

    features: np.ndarray          # p x N x F
    agg: np.ndarray               # N x N
    targets: np.ndarray | None    # N x q, normalised
    raw_targets: np.ndarray | None
    source_id: str = ""


def prepare_sequence(seq: GraphSequence, stats: FeatureStats | None,
                     aggregation: str = "uniform") -> PreparedSequence:
    stats = stats or FeatureStats.identity()
    feats = (seq.node_features() - stats.feature_mean) / stats.feature_std
    targets = None
    if seq.targets is not None:
        targets = (seq.targets - stats.thickness_mean) / stats.thickness_std
    return PreparedSequence(feats, aggregation_matrix(seq.edge_weight, aggregation), targets,
                            seq.targets, seq.source_id)


class STGRIT:
    """Parameters plus the forward computation of the network."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        if params is None:
            params = init_parameters(config, seed)
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            raise ConfigError("parameter registry does not match the model config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: shape {params[name].shape} != {shape}")
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    # building blocks, exposed for locality tests

    def encode(self, features, agg: np.ndarray) -> Tensor:
        """GraphSAGE embeddings stacked to ``N x p x d``."""
        cfg = self.config
        if len(features) != cfg.p:
            raise ShapeError(f"expected {cfg.p} input graphs, got {len(features)}")
        embeds = []
        for k in range(cfg.p):
            pre = f"sage.{k}."
            embeds.append(graphsage_forward(features[k], None, self.params[pre + "w_self"],
                                            self.params[pre + "w_neigh"],
                                            self.params[pre + "bias"], agg=agg))
        return stack(embeds, axis=1)

    def temporal_block(self, h: Tensor, group: int, training: bool = False, rng=None) -> Tensor:
        """``N x p x d`` -> ``N x p x d``, attending over time for each node."""
        return attention_block(h, self.params, f"group.{group}.temporal.", self.config.num_heads,
                               self.config.dropout_rate, training, rng)

    def spatial_block(self, h: Tensor, group: int, training: bool = False, rng=None) -> Tensor:
        """``N x p x d`` -> ``N x p x d``, attending over nodes for each time step."""
        ht = transpose(h, (1, 0, 2))
        out = attention_block(ht, self.params, f"group.{group}.spatial.", self.config.num_heads,
                              self.config.dropout_rate, training, rng)
        return transpose(out, (1, 0, 2))

    def decode(self, h: Tensor) -> Tensor:
        n = h.shape[0]
        z = reshape(h, (n, -1))
        for i in range(4):
            z = matmul(z, self.params[f"decoder.{i}.weight"]) + self.params[f"decoder.{i}.bias"]
            if i < 3:
                z = relu(z)
        return z

    def forward(self, features, agg: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Predict ``N x q`` (normalised) deep-layer thickness."""
        h = self.encode(features, agg)
        for g in range(self.config.num_groups):
            h = self.temporal_block(h, g, training, rng) + h
            h = self.spatial_block(h, g, training, rng) + h
        return self.decode(h)

    __call__ = forward

    def predict(self, prepared: PreparedSequence, stats: FeatureStats | None = None) -> np.ndarray:
        """Eval-mode prediction in original thickness units."""
        stats = stats or FeatureStats.identity()
        with no_grad():
            out = self.forward(prepared.features, prepared.agg, training=False).data
        return out * stats.thickness_std + stats.thickness_mean


def stgrit_forward(seq: GraphSequence, model: STGRIT, stats: FeatureStats | None = None,
                   training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    prepared = prepare_sequence(seq, stats, model.config.aggregation)
    return model.forward(prepared.features, prepared.agg, training, rng)
