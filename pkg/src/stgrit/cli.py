"""
Command-line entry point: ``stgrit {gen,split,train,eval,predict,gradcheck}``.

Exit codes: 0 success, 1 usage/config error, 2 data validation failure,
3 numerical failure (non-finite values, failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .checkpoint import Checkpoint
from .config import DataConfig, RunConfig, load_run_config
from .dataset import (
    generate_synthetic,
    load_manifest,
    load_records,
    make_splits,
    record_to_sequence,
    save_manifest,
    save_records,
    split_counts,
    validate,
)
from .errors import ConfigError, DataError, NumericalError, StgritError
from .model import prepare_sequence
from .numerics.gradcheck import DEFAULT_TOLERANCE
from .training import (
    aggregate_versions,
    evaluate_rmse,
    run_versions,
    train,
    write_metrics_csv,
)
from .verify import run_gradcheck

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers --------------------------------------------------------------------------

def _split_sequences(records, split, data_cfg) -> dict[str, list]:
    by_id = {r.source_id: r for r in records}
    out = {}
    for part in ("train", "val", "test"):
        seqs = []
        for sid in getattr(split, part):
            if sid not in by_id:
                raise DataError(f"manifest references unknown record {sid!r}")
            rec = by_id[sid]
            check = validate(rec, data_cfg.min_layers)
            if not check:
                raise DataError(f"record {sid!r} rejected: {check.reason}")
            seqs.append(record_to_sequence(rec, data_cfg.p, data_cfg.q, data_cfg.haversine_mode))
        out[part] = seqs
    return out


def _get_split(manifest_path, version):
    manifest = load_manifest(manifest_path)
    if version not in manifest:
        raise ConfigError(f"version {version} not in manifest (have {sorted(manifest)})")
    return manifest[version]


def _data_meta(cfg: RunConfig) -> dict:
    d = cfg.data
    return {"p": d.p, "q": d.q, "min_layers": d.min_layers, "normalization": d.normalization,
            "haversine_mode": d.haversine_mode}


def _write_checkpoint(result, cfg: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = result.checkpoint({"data": _data_meta(cfg), "train_config": cfg.train.to_dict()})
    path = out_dir / "checkpoint.ckpt"
    ckpt.save(path)
    write_metrics_csv(result.run, out_dir / "metrics.csv")
    return path


def _fmt_layers(values) -> str:
    return " ".join(f"{v:.4f}" for v in values)


# -- commands -----------------------------------------------------------------------------

def cmd_gen(args) -> int:
    records = generate_synthetic(args.records, num_traces=args.traces, num_layers=args.layers,
                                 seed=args.seed, p=args.p, q=args.q, rho=args.rho)
    save_records(records, args.out)
    ok = sum(bool(validate(r, args.min_layers)) for r in records)
    print(f"wrote {len(records)} records ({args.traces} traces x {args.layers} layers) "
          f"to {args.out}")
    print(f"validation: {ok}/{len(records)} pass the {args.min_layers}-layer filter")
    return EXIT_OK


def cmd_split(args) -> int:
    records = load_records(args.inp)
    valid, rejected = [], []
    for r in records:
        check = validate(r, args.min_layers)
        (valid if check else rejected).append((r, check))
    for r, check in rejected:
        print(f"rejected {r.source_id}: {check.reason}")
    if not valid:
        raise DataError("no record passes validation")
    splits = make_splits([r for r, _ in valid], args.versions, args.seed)
    save_manifest(splits, args.out)
    print(f"{len(valid)} valid of {len(records)} records; expected counts "
          f"{'/'.join(map(str, split_counts(len(valid))))}")
    for s in splits:
        print(f"version {s.version} (seed {s.seed}): train {len(s.train)} / val {len(s.val)} / "
              f"test {len(s.test)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    print("resolved config:")
    print(cfg.dumps())
    data_path = args.data or cfg.data.path
    if data_path is None:
        raise ConfigError("--data is required when the config has no data.path")
    records = load_records(data_path)
    out_dir = Path(args.out)
    if args.parallel_versions:
        manifest = load_manifest(args.manifest)
        seqs = {}
        for split in manifest.values():
            parts = _split_sequences(records, split, cfg.data)
            for s in parts["train"] + parts["val"] + parts["test"]:
                seqs[s.source_id] = s
        report, results = run_versions(seqs, list(manifest.values()), cfg.model, cfg.train,
                                       normalize=cfg.data.normalization, parallel=True,
                                       max_workers=args.workers)
        for version, result in results.items():
            path = _write_checkpoint(result, cfg, out_dir / f"v{version}")
            print(f"version {version}: best epoch {result.run.best_epoch}, "
                  f"test RMSE {report.rmse[version]:.6f} -> {path}")
        report.save(out_dir / "report.json")
        print(f"RMSE mean {report.mean:.6f} std {report.std}")
        return EXIT_OK

    split = _get_split(args.manifest, args.version)
    parts = _split_sequences(records, split, cfg.data)
    result = train(parts["train"], parts["val"], cfg.model, cfg.train,
                   normalize=cfg.data.normalization, version=args.version)
    path = _write_checkpoint(result, cfg, out_dir)
    run = result.run
    print(f"trained {len(run.train_loss)} epochs; best val loss {run.best_val_loss:.6g} "
          f"at epoch {run.best_epoch}; lr halved at {run.halved_at}")
    print(f"checkpoint: {path}")
    print(f"metrics: {out_dir / 'metrics.csv'}")
    return EXIT_OK


def _checkpoint_data_cfg(ckpt: Checkpoint) -> DataConfig:
    meta = ckpt.metadata.get("data", {})
    return DataConfig(p=ckpt.config.p, q=ckpt.config.q,
                      min_layers=meta.get("min_layers", ckpt.config.p + ckpt.config.q),
                      normalization=meta.get("normalization", True),
                      haversine_mode=meta.get("haversine_mode", "as-printed"),
                      aggregation=ckpt.config.aggregation)


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    data_cfg = _checkpoint_data_cfg(ckpt)
    records = load_records(args.data)
    split = _get_split(args.manifest, args.version)
    seqs = _split_sequences(records, split, data_cfg)[args.split]
    rep = evaluate_rmse(ckpt, seqs)
    print(f"version {args.version} {args.split} split: {rep.num_sequences} sequences")
    print(f"RMSE {rep.rmse:.6f}")
    print(f"per-layer RMSE: {_fmt_layers(rep.per_layer_rmse)}")
    report = aggregate_versions({args.version: rep})
    report_path = Path(args.report) if args.report else \
        Path(args.checkpoint).parent / f"report_v{args.version}.json"
    report.save(report_path)
    print(f"report: {report_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    data_cfg = _checkpoint_data_cfg(ckpt)
    model, stats = ckpt.build_model(), ckpt.stats
    records = load_records(args.data)
    if args.manifest is not None:
        wanted = set(getattr(_get_split(args.manifest, args.version), args.split))
        records = [r for r in records if r.source_id in wanted]
    p, q = data_cfg.p, data_cfg.q
    rows, skipped = 0, 0
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["source_id", "trace_index", "layer_index", "latitude", "longitude",
                    "predicted", "target"])
        for rec in records:
            if len(rec.complete_layers()) < p:
                skipped += 1
                continue
            seq = record_to_sequence(rec, p, q, data_cfg.haversine_mode, require_targets=False)
            pred = model.predict(prepare_sequence(seq, stats, model.config.aggregation), stats)
            target_layers = list(seq.layer_index[p:])
            # deep layers beyond the available ones still get numbered in record order
            last = seq.layer_index[-1]
            while len(target_layers) < q:
                last += 1
                target_layers.append(last)
            for t in range(seq.num_nodes):
                for k in range(q):
                    truth = "" if seq.targets is None else repr(float(seq.targets[t, k]))
                    w.writerow([rec.source_id, t, target_layers[k], repr(float(rec.latitude[t])),
                                repr(float(rec.longitude[t])), repr(float(pred[t, k])), truth])
                    rows += 1
    print(f"wrote {rows} prediction rows for {len(records) - skipped} records to {args.out}"
          + (f" (skipped {skipped} with fewer than {p} complete layers)" if skipped else ""))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    failed = []

    def report(name, err, seconds):
        status = "ok" if err < args.tolerance else "FAIL"
        if err >= args.tolerance:
            failed.append(name)
        print(f"{name:24s} max rel err {err:.3e}  {status}  ({seconds:.2f}s)", flush=True)

    run_gradcheck(args.seed, report=report)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all gradients within {args.tolerance:g}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stgrit", description=__doc__.splitlines()[1].strip())
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress per-epoch logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write synthetic layer records")
    p.add_argument("--out", required=True)
    p.add_argument("--records", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--traces", type=int, default=256)
    p.add_argument("--layers", type=int, default=20)
    p.add_argument("--rho", type=float, default=0.8)
    p.add_argument("--p", type=int, default=5)
    p.add_argument("--q", type=int, default=15)
    p.add_argument("--min-layers", type=int, default=20)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("split", help="write a train/val/test split manifest")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--versions", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--min-layers", type=int, default=20)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train on one split version")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--manifest", required=True)
    p.add_argument("--version", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--parallel-versions", action="store_true",
                   help="train every manifest version in isolated processes")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RMSE of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--version", type=int, default=0)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write per-node predictions as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--version", type=int, default=0)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StgritError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
