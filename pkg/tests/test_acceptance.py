"""Acceptance criteria. Each test prints one PASS/FAIL line."""

import math
import re
import time

import mpmath
import numpy as np
import pytest

from stgrit.cli import main
from stgrit.dataset import (
    FeatureStats,
    LayerRecord,
    generate_synthetic,
    make_splits,
    record_to_sequence,
    validate,
)
from stgrit.geograph import edge_weight, edge_weight_matrix, haversine_angle
from stgrit.model import STGRIT, ModelConfig, parameter_shapes, prepare_sequence
from stgrit.numerics import Tensor
from stgrit.training import (
    SchedulerState,
    TrainConfig,
    dataset_mse,
    evaluate_rmse,
    mean_baseline_rmse,
    schedule,
    train,
)


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail
    return emit


def test_criterion_1_gradient_soundness(report, capsys):
    t0 = time.perf_counter()
    code = main(["-q", "gradcheck"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    errs = {m[0]: float(m[1]) for m in re.findall(r"^(\S+)\s+max rel err (\S+)", out, re.M)}
    assert "full_model" in errs and "layer_norm" in errs
    worst = max(errs, key=errs.get)
    report(1, "gradient check", code == 0 and errs[worst] < 1e-4 and elapsed < 60,
           f"{len(errs)} checks, worst {worst} {errs[worst]:.2e}, {elapsed:.1f}s, exit {code}")


def test_criterion_2_structural_fidelity(report):
    cfg = ModelConfig(p=5, q=15, embed_dim=32, num_heads=8, num_groups=2)
    rec = generate_synthetic(1, num_traces=256, seed=0)[0]
    seq = record_to_sequence(rec, 5, 15)
    model = STGRIT(cfg, seed=0)
    prep = prepare_sequence(seq, FeatureStats.from_sequences([seq]))
    out = model.forward(prep.features, prep.agg)
    names = list(parameter_shapes(cfg))
    sage = {n.split(".")[1] for n in names if n.startswith("sage.")}
    blocks = {n.rsplit(".", 2)[0] if "ln" in n or "ff" in n else n.rsplit(".", 1)[0]
              for n in names if n.startswith("group.")}
    decoder = {n.split(".")[1] for n in names if n.startswith("decoder.")}
    expected_blocks = {f"group.{g}.{r}" for g in range(2) for r in ("temporal", "spatial")}
    ok = (out.shape == (256, 15) and len(sage) == cfg.p and blocks == expected_blocks
          and len(decoder) == 4 and len(names) == 3 * cfg.p + 12 * 4 + 8)
    report(2, "structure", ok, f"output {out.shape}, {len(sage)} GraphSAGE sets, "
           f"{len(blocks)} attention blocks, {len(decoder)} decoder layers")


def test_criterion_3_permutation_equivariance(report):
    rng = np.random.default_rng(0)
    rec = generate_synthetic(1, num_traces=256, seed=3)[0]
    worst = 0.0
    for trial in range(20):
        cfg = ModelConfig(aggregation="uniform" if trial % 2 == 0 else "weighted")
        model = STGRIT(cfg, seed=trial)
        perm = rng.permutation(rec.num_traces)
        moved = LayerRecord(rec.source_id, rec.latitude[perm], rec.longitude[perm],
                            rec.thickness[perm], rec.complete[perm])
        a = model.predict(prepare_sequence(record_to_sequence(rec, 5, 15), None,
                                           cfg.aggregation))
        b = model.predict(prepare_sequence(record_to_sequence(moved, 5, 15), None,
                                           cfg.aggregation))
        worst = max(worst, float(np.abs(b - a[perm]).max()))
    report(3, "permutation equivariance", worst < 1e-9,
           f"max abs deviation {worst:.2e} over 20 trials")


def test_criterion_4_locality(report):
    cfg = ModelConfig()
    model = STGRIT(cfg, seed=1)
    rng = np.random.default_rng(2)
    n, p, d = 16, cfg.p, cfg.embed_dim
    h = rng.normal(size=(n, p, d))
    failures = []
    for g in range(cfg.num_groups):
        base_t = model.temporal_block(Tensor(h), g).data
        base_s = model.spatial_block(Tensor(h), g).data
        for j in range(n):
            bumped = h.copy()
            bumped[j] += rng.normal(size=(p, d))
            out = model.temporal_block(Tensor(bumped), g).data
            others = np.arange(n) != j
            if not np.array_equal(out[others], base_t[others]) or \
                    np.array_equal(out[j], base_t[j]):
                failures.append(f"temporal g{g} node {j}")
        for t in range(p):
            bumped = h.copy()
            bumped[:, t] += rng.normal(size=(n, d))
            out = model.spatial_block(Tensor(bumped), g).data
            others = np.arange(p) != t
            if not np.array_equal(out[:, others], base_s[:, others]) or \
                    np.array_equal(out[:, t], base_s[:, t]):
                failures.append(f"spatial g{g} step {t}")
    report(4, "block locality", not failures,
           "bitwise invariant for every node and step" if not failures else
           ", ".join(failures[:5]))


def test_criterion_5_scheduler(report):
    st = SchedulerState("step", 5e-4)
    step_ok = all(schedule(e, [], st) == 5e-4 * 0.5 ** (e // 75)
                  for e in (0, 74, 75, 149, 150, 449))
    plateau = SchedulerState("plateau", 5e-4, patience=24)
    for e in range(61):
        schedule(e, [0.3] * e, plateau)
    report(5, "scheduler", step_ok and plateau.halved_at == [24, 48],
           f"step values exact: {step_ok}; plateau halved at {plateau.halved_at}")


def test_criterion_6_split(report):
    recs = generate_synthetic(1660, num_traces=4, seed=6)
    valid = [r for r in recs if validate(r)]
    a = make_splits(valid, 5, base_seed=42)
    b = make_splits(valid, 5, base_seed=42)
    ids = {r.source_id for r in valid}
    ok = len(valid) == 1660 and len(a) == 5
    for s in a:
        parts = [set(s.train), set(s.val), set(s.test)]
        ok &= (len(s.train), len(s.val), len(s.test)) == (996, 332, 332)
        ok &= not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
        ok &= parts[0] | parts[1] | parts[2] == ids
    ok &= [s.to_json() for s in a] == [s.to_json() for s in b]
    report(6, "split", ok, "5 versions of 996/332/332, disjoint, exhaustive, reproducible")


def test_criterion_7_overfit(report):
    cfg = ModelConfig(p=2, q=3, embed_dim=16, num_heads=2, num_groups=1)
    recs = generate_synthetic(4, num_traces=16, num_layers=5, seed=11, p=2, q=3)
    seqs = [record_to_sequence(r, 2, 3) for r in recs]
    t0 = time.perf_counter()
    stats = FeatureStats.from_sequences(seqs)
    initial = dataset_mse(STGRIT(cfg, seed=0), [prepare_sequence(s, stats) for s in seqs])
    epochs = 2000 // len(seqs)
    res = train(seqs, seqs, cfg, TrainConfig(epochs=epochs, seed=0))
    elapsed = time.perf_counter() - t0
    ratio = res.run.best_val_loss / initial
    report(7, "overfit", ratio < 0.01 and elapsed < 300,
           f"train MSE {res.run.best_val_loss:.3g} = {100 * ratio:.3f}% of initial "
           f"after {epochs * len(seqs)} steps, {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_8_synthetic_benchmark(report):
    t0 = time.perf_counter()
    recs = generate_synthetic(200, seed=2024, rho=0.8)
    seqs = {r.source_id: record_to_sequence(r, 5, 15) for r in recs}
    split = make_splits(recs, 1, base_seed=7)[0]
    pick = lambda ids: [seqs[i] for i in ids]  # noqa: E731
    train_s, val_s, test_s = pick(split.train), pick(split.val), pick(split.test)
    baseline = mean_baseline_rmse(train_s, test_s).rmse
    res = train(train_s, val_s, ModelConfig(), TrainConfig(epochs=150))
    rmse = evaluate_rmse(res.model, test_s, res.stats).rmse
    elapsed = time.perf_counter() - t0
    report(8, "synthetic benchmark", rmse <= 0.8 * baseline and elapsed <= 7200,
           f"test RMSE {rmse:.4f} vs baseline {baseline:.4f} "
           f"(ratio {rmse / baseline:.3f}), {elapsed / 60:.1f} min")


def _reference_angle(lat1, lon1, lat2, lon2):
    with mpmath.workdps(50):
        rad = lambda deg: mpmath.mpf(deg) * mpmath.pi / 180  # noqa: E731
        hav = lambda t: mpmath.sin(t / 2) ** 2  # noqa: E731
        p1, p2 = rad(lat1), rad(lat2)
        arg = hav(p2 - p1) + mpmath.cos(p1) * mpmath.cos(p2) * hav(rad(lon2) - rad(lon1))
        return 2 * mpmath.asin(min(arg, mpmath.mpf(1)))


def test_criterion_9_edge_weight_oracle(report):
    rng = np.random.default_rng(9)
    lat = rng.uniform(-90, 90, (50, 2))
    lon = rng.uniform(-180, 180, (50, 2))
    worst, symmetric = 0.0, True
    for (a, b), (c, e) in zip(lat, lon):
        got = edge_weight(haversine_angle(a, c, b, e))
        want = 1 / _reference_angle(a, c, b, e)
        worst = max(worst, float(abs((got - want) / want)))
        symmetric &= got == edge_weight(haversine_angle(b, e, a, c))
    w = edge_weight_matrix(lat.ravel(), lon.ravel())
    symmetric &= bool(np.array_equal(w, w.T))
    report(9, "edge-weight oracle", worst < 1e-12 and symmetric,
           f"max relative error {worst:.2e} over 50 pairs, exactly symmetric: {symmetric}")
