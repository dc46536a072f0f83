"""Finite-difference self-check over every differentiable op and a tiny full model."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import numerics as nx
from .dataset import FeatureStats, generate_synthetic, record_to_sequence
from .model import (
    STGRIT,
    ModelConfig,
    attention_block,
    graphsage_forward,
    init_parameters,
    multi_head_attention,
    prepare_sequence,
)
from .numerics import Tensor
from .training import mse_loss

TINY_MODEL = dict(p=2, q=3, embed_dim=8, num_heads=2, num_groups=1)
TINY_NODES = 8


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.sign(x) * (margin + np.abs(x))


def _projected(out: Tensor, weights: np.ndarray) -> Tensor:
    # random projection keeps the scalar O(1) and exercises every output entry
    return nx.sum_(nx.mul(out, Tensor(weights)))


def _check(build: Callable[[dict], Tensor], inputs: dict[str, np.ndarray], out_shape, rng,
           h: float) -> float:
    tensors = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    weights = rng.normal(size=out_shape)
    errs = nx.check_gradients(lambda: _projected(build(tensors), weights), tensors, h=h)
    return max(errs.values())


def op_cases(seed: int = 0) -> dict[str, Callable[[float], float]]:
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    cases: dict[str, Callable[[float], float]] = {}

    def add_case(name, build, inputs, out_shape):
        cases[name] = lambda h: _check(build, inputs, out_shape, rng, h)

    add_case("matmul", lambda t: nx.matmul(t["a"], t["b"]), {"a": r(5, 4), "b": r(4, 3)}, (5, 3))
    add_case("matmul_batched", lambda t: nx.matmul(t["a"], t["b"]),
             {"a": r(3, 5, 4), "b": r(4, 2)}, (3, 5, 2))
    add_case("add", lambda t: nx.add(t["a"], t["b"]), {"a": r(4, 3), "b": r(3)}, (4, 3))
    add_case("sub", lambda t: nx.sub(t["a"], t["b"]), {"a": r(4, 3), "b": r(4, 1)}, (4, 3))
    add_case("mul", lambda t: nx.mul(t["a"], t["b"]), {"a": r(4, 3), "b": r(4, 3)}, (4, 3))
    add_case("relu", lambda t: nx.relu(t["x"]), {"x": _away_from_zero(rng, (4, 5))}, (4, 5))
    add_case("transpose", lambda t: nx.transpose(t["x"], (2, 0, 1)), {"x": r(2, 3, 4)}, (4, 2, 3))
    add_case("reshape", lambda t: nx.reshape(t["x"], (6, 4)), {"x": r(2, 3, 4)}, (6, 4))
    add_case("concat", lambda t: nx.concat([t["a"], t["b"]], axis=1),
             {"a": r(3, 2), "b": r(3, 4)}, (3, 6))
    add_case("stack", lambda t: nx.stack([t["a"], t["b"]], axis=1),
             {"a": r(3, 2), "b": r(3, 2)}, (3, 2, 2))
    add_case("mean", lambda t: nx.mean(t["x"], axis=1), {"x": r(3, 4, 2)}, (3, 2))
    add_case("sum", lambda t: nx.sum_(t["x"], axis=0, keepdims=True), {"x": r(3, 4)}, (1, 4))
    add_case("softmax", lambda t: nx.softmax(t["x"], axis=-1), {"x": r(3, 4)}, (3, 4))
    add_case("layer_norm", lambda t: nx.layer_norm(t["x"], t["g"], t["b"]),
             {"x": r(4, 6), "g": r(6), "b": r(6)}, (4, 6))
    add_case("dropout",
             lambda t: nx.dropout(t["x"], 0.3, np.random.default_rng(seed + 1), True),
             {"x": r(5, 6)}, (5, 6))

    n, f, d = 5, 3, 4
    w = np.abs(r(n, n))
    w = w + w.T
    add_case("graphsage_uniform",
             lambda t: graphsage_forward(t["x"], w, t["w1"], t["w2"], t["b"], "uniform"),
             {"x": r(n, f), "w1": r(f, d), "w2": r(f, d), "b": r(d)}, (n, d))
    add_case("graphsage_weighted",
             lambda t: graphsage_forward(t["x"], w, t["w1"], t["w2"], t["b"], "weighted"),
             {"x": r(n, f), "w1": r(f, d), "w2": r(f, d), "b": r(d)}, (n, d))
    d = 4
    add_case("multi_head_attention",
             lambda t: multi_head_attention(t["x"], t["wq"], t["wk"], t["wv"], t["wo"], 2),
             {"x": r(3, 5, d), "wq": r(d, d), "wk": r(d, d), "wv": r(d, d), "wo": r(d, d)},
             (3, 5, d))

    blk_cfg = ModelConfig(p=1, q=1, embed_dim=d, num_heads=2, num_groups=1, ff_multiplier=2)
    blk = {k: v.data + 0.1 * rng.normal(size=v.shape)
           for k, v in init_parameters(blk_cfg, seed).items() if k.startswith("group.0.temporal.")}
    add_case("attention_block",
             lambda t: attention_block(t["x"], t, "group.0.temporal.", 2, 0.2, True,
                                       np.random.default_rng(seed + 2)),
             {"x": r(3, 4, d), **blk}, (3, 4, d))
    add_case("mse_loss", lambda t: mse_loss(t["pred"], t["target"]).reshape((1,)),
             {"pred": r(4, 3), "target": r(4, 3)}, (1,))
    return cases


def tiny_model_check(seed: int = 0, h: float = nx.gradcheck.DEFAULT_STEP) -> dict[str, float]:
    """Gradient check of every parameter of the tiny model, dropout active."""
    cfg = ModelConfig(**TINY_MODEL)
    rec = generate_synthetic(1, num_traces=TINY_NODES, num_layers=cfg.p + cfg.q, seed=seed,
                             p=cfg.p, q=cfg.q)[0]
    seq = record_to_sequence(rec, cfg.p, cfg.q)
    prep = prepare_sequence(seq, FeatureStats.from_sequences([seq]))
    model = STGRIT(cfg, seed=seed)
    weights = np.random.default_rng(seed).normal(size=(TINY_NODES, cfg.q))

    def fn():
        out = model.forward(prep.features, prep.agg, training=True,
                            rng=np.random.default_rng(seed + 3))
        return _projected(out, weights)

    return nx.check_gradients(fn, model.params, h=h)


def run_gradcheck(seed: int = 0, h: float = nx.gradcheck.DEFAULT_STEP,
                  report: Callable[[str, float, float], None] | None = None) -> dict[str, float]:
    """Max relative error per op (and ``full_model``); ``report`` sees each as it finishes."""
    results = {}
    for name, case in op_cases(seed).items():
        t0 = time.perf_counter()
        results[name] = case(h)
        if report:
            report(name, results[name], time.perf_counter() - t0)
    t0 = time.perf_counter()
    results["full_model"] = max(tiny_model_check(seed, h).values())
    if report:
        report("full_model", results["full_model"], time.perf_counter() - t0)
    return results
