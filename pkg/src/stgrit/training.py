"""
Optimisation, learning-rate schedules, evaluation and multi-split runs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .dataset import FeatureStats
from .errors import ConfigError, ContractError, DataError, NumericalError, ShapeError, TrainingDiverged
from .geograph import GraphSequence
from .model import STGRIT, ModelConfig, PreparedSequence, prepare_sequence
from .numerics import Tensor, backward, mean, mul, no_grad, sub

log = logging.getLogger(__name__)

SCHEDULERS = ("plateau", "step")


@dataclass
class TrainConfig:
    epochs: int = 450
    initial_lr: float = 5e-4
    scheduler: str = "plateau"
    plateau_patience: int = 24
    step_period: int = 75
    lr_factor: float = 0.5
    batch_size: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.initial_lr > 0:
            raise ConfigError("initial_lr must be positive")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"scheduler must be one of {SCHEDULERS}")
        if self.plateau_patience < 1 or self.step_period < 1:
            raise ConfigError("plateau_patience and step_period must be >= 1")
        if not 0 < self.lr_factor < 1:
            raise ConfigError("lr_factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)


# -- loss ------------------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every entry."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = sub(pred, target)
    return mean(mul(diff, diff))


# -- optimiser -----------------------------------------------------------------------

class Adam:
    """Adam with bias correction; moments are kept per named parameter."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"missing gradient for {missing[0]!r}"
                                + (f" and {len(missing) - 1} more" if len(missing) > 1 else ""))
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values()
                          if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


# -- learning-rate schedules -----------------------------------------------------------

@dataclass
class SchedulerState:
    mode: str
    initial_lr: float
    factor: float = 0.5
    patience: int = 24
    period: int = 75
    lr: float = field(init=False)
    best: float = field(init=False, default=math.inf)
    bad_epochs: int = field(init=False, default=0)
    seen: int = field(init=False, default=0)
    halved_at: list[int] = field(init=False, default_factory=list)

    def __post_init__(self):
        self.lr = self.initial_lr

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "SchedulerState":
        return cls(cfg.scheduler, cfg.initial_lr, cfg.lr_factor, cfg.plateau_patience,
                   cfg.step_period)


def schedule(epoch: int, val_history, state: SchedulerState) -> float:
    """Learning rate to use during ``epoch``.

    ``val_history`` holds the validation losses of epochs ``0 .. epoch-1``.
    Step mode ignores it: ``lr0 * factor ** (epoch // period)``. Plateau mode
    halves the rate once ``patience`` consecutive epochs fail to set a new
    strict best, then restarts the count; the triggering epoch is appended to
    ``state.halved_at``.
    """
    if state.mode == "step":
        state.lr = state.initial_lr * state.factor ** (epoch // state.period)
        return state.lr
    for e in range(state.seen, len(val_history)):
        v = float(val_history[e])
        if v < state.best:
            state.best = v
            state.bad_epochs = 0
        else:
            state.bad_epochs += 1
            if state.bad_epochs >= state.patience:
                state.lr *= state.factor
                state.bad_epochs = 0
                state.halved_at.append(e)
    state.seen = len(val_history)
    return state.lr


# -- training loop -----------------------------------------------------------------------

@dataclass
class TrainRun:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    seed: int = 0
    version: int | None = None
    halved_at: list[int] = field(default_factory=list)

    def metadata(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_val_loss": self.best_val_loss,
                "epochs_run": len(self.train_loss), "seed": self.seed, "version": self.version}


@dataclass
class TrainResult:
    model: STGRIT
    run: TrainRun
    stats: FeatureStats

    def checkpoint(self, extra: dict | None = None) -> Checkpoint:
        meta = {"stats": self.stats.to_dict(), "train": self.run.metadata()}
        meta.update(extra or {})
        return Checkpoint.from_model(self.model, meta)


def _prepare_all(seqs, stats, aggregation) -> list[PreparedSequence]:
    out = []
    for s in seqs:
        if s.targets is None:
            raise DataError(f"sequence {s.source_id!r} has no targets")
        out.append(prepare_sequence(s, stats, aggregation))
    return out


def dataset_mse(model: STGRIT, prepared: list[PreparedSequence]) -> float:
    """Eval-mode MSE averaged over sequences (normalised units)."""
    with no_grad():
        losses = [mse_loss(model.forward(p.features, p.agg), p.targets).item() for p in prepared]
    return float(np.mean(losses))


def train(train_seqs: list[GraphSequence], val_seqs: list[GraphSequence],
          model_config: ModelConfig, train_config: TrainConfig, *,
          stats: FeatureStats | None = None, normalize: bool = True,
          version: int | None = None) -> TrainResult:
    """Fit a fresh model and return it with the best-validation weights restored.

    One seeded generator drives initialisation order, shuffling and dropout,
    so identical inputs give an identical trajectory.
    """
    if not train_seqs or not val_seqs:
        raise DataError("training needs nonempty train and validation splits")
    for s in (*train_seqs, *val_seqs):
        if s.p != model_config.p or s.q != model_config.q:
            raise ShapeError(f"sequence {s.source_id!r} is p={s.p}, q={s.q}; "
                             f"model expects p={model_config.p}, q={model_config.q}")
    if stats is None:
        stats = FeatureStats.from_sequences(train_seqs) if normalize else FeatureStats.identity()
    agg = model_config.aggregation
    train_p = _prepare_all(train_seqs, stats, agg)
    val_p = _prepare_all(val_seqs, stats, agg)

    tc = train_config
    model = STGRIT(model_config, seed=tc.seed)
    rng = np.random.default_rng(tc.seed)
    opt = Adam(model.params, tc.beta1, tc.beta2, tc.adam_eps)
    sched = SchedulerState.from_config(tc)
    run = TrainRun(seed=tc.seed, version=version)
    best_state = model.state_dict()

    for epoch in range(tc.epochs):
        lr = schedule(epoch, run.val_loss, sched)
        order = rng.permutation(len(train_p))
        total = 0.0
        for start in range(0, len(order), tc.batch_size):
            batch = order[start:start + tc.batch_size]
            model.zero_grad()
            for i in batch:
                seq = train_p[i]
                try:
                    out = model.forward(seq.features, seq.agg, training=True, rng=rng)
                    loss = mse_loss(out, seq.targets)
                    total += loss.item()
                    backward(mul(loss, 1.0 / len(batch)))
                except NumericalError as exc:
                    raise TrainingDiverged(epoch, seq.source_id, exc) from exc
            if tc.grad_clip is not None:
                clip_grad_norm(model.params, tc.grad_clip)
            opt.step(lr)
        train_loss = total / len(train_p)
        val_loss = dataset_mse(model, val_p)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(epoch, "<validation>", NumericalError("mse_loss"))
        run.train_loss.append(train_loss)
        run.val_loss.append(val_loss)
        run.lr.append(lr)
        if val_loss < run.best_val_loss:
            run.best_val_loss = val_loss
            run.best_epoch = epoch
            best_state = model.state_dict()
        log.info("epoch %d  train %.6g  val %.6g  lr %.3g", epoch, train_loss, val_loss, lr)

    schedule(tc.epochs, run.val_loss, sched)
    run.halved_at = list(sched.halved_at)
    model.load_state_dict(best_state)
    return TrainResult(model, run, stats)


def write_metrics_csv(run: TrainRun, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for e, (tl, vl, lr) in enumerate(zip(run.train_loss, run.val_loss, run.lr)):
            w.writerow([e, repr(tl), repr(vl), repr(lr)])


# -- evaluation ----------------------------------------------------------------------------

@dataclass
class RMSEReport:
    rmse: float
    per_layer_rmse: list[float]
    num_sequences: int


def rmse_report(preds, targets) -> RMSEReport:
    """RMSE over all sequences, nodes and layers, plus the per-layer breakdown."""
    preds = [np.asarray(p, dtype=np.float64) for p in preds]
    targets = [np.asarray(t, dtype=np.float64) for t in targets]
    if not preds:
        raise DataError("RMSE of an empty test split")
    if len(preds) != len(targets) or any(p.shape != t.shape for p, t in zip(preds, targets)):
        raise ShapeError("prediction and target shapes differ")
    sq = np.concatenate([(p - t) ** 2 for p, t in zip(preds, targets)], axis=0)
    return RMSEReport(float(np.sqrt(sq.mean())), [float(v) for v in np.sqrt(sq.mean(axis=0))],
                      len(preds))


def predict_sequences(model: STGRIT, stats: FeatureStats, seqs) -> list[np.ndarray]:
    """Denormalised eval-mode predictions, one ``N x q`` array per sequence."""
    return [model.predict(prepare_sequence(s, stats, model.config.aggregation), stats)
            for s in seqs]


def evaluate_rmse(source, test_seqs: list[GraphSequence],
                  stats: FeatureStats | None = None) -> RMSEReport:
    """RMSE in original thickness units. ``source`` is a model or a :class:`Checkpoint`."""
    if isinstance(source, Checkpoint):
        stats = stats or source.stats
        model = source.build_model()
    else:
        model = source
    stats = stats or FeatureStats.identity()
    if not test_seqs:
        raise DataError("RMSE of an empty test split")
    for s in test_seqs:
        if s.targets is None:
            raise DataError(f"sequence {s.source_id!r} has no targets")
        if s.p != model.config.p or s.q != model.config.q:
            raise ShapeError(f"sequence {s.source_id!r} does not match the checkpoint's p/q")
    preds = predict_sequences(model, stats, test_seqs)
    return rmse_report(preds, [s.targets for s in test_seqs])


def mean_baseline_rmse(train_seqs, test_seqs) -> RMSEReport:
    """Predict every node's deep layers as the per-layer training mean."""
    layer_means = np.concatenate([s.targets for s in train_seqs], axis=0).mean(axis=0)
    preds = [np.broadcast_to(layer_means, s.targets.shape) for s in test_seqs]
    return rmse_report(preds, [s.targets for s in test_seqs])


# -- multi-version runs ---------------------------------------------------------------------

@dataclass
class VersionsReport:
    rmse: dict[int, float]
    per_layer_rmse: dict[int, list[float]]
    mean: float
    std: float | None

    def to_json(self) -> dict:
        return {"rmse": {str(k): v for k, v in self.rmse.items()},
                "mean": self.mean, "std": self.std,
                "per_layer_rmse": {str(k): v for k, v in self.per_layer_rmse.items()}}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")


def aggregate_versions(reports: dict[int, RMSEReport]) -> VersionsReport:
    """Mean and sample standard deviation of per-version RMSE."""
    vals = np.array([reports[k].rmse for k in sorted(reports)])
    std = float(vals.std(ddof=1)) if len(vals) > 1 else None
    return VersionsReport({k: reports[k].rmse for k in sorted(reports)},
                          {k: reports[k].per_layer_rmse for k in sorted(reports)},
                          float(vals.mean()), std)


def _run_one(args):
    version, train_seqs, val_seqs, test_seqs, mcfg, tcfg, normalize = args
    result = train(train_seqs, val_seqs, mcfg, tcfg, normalize=normalize, version=version)
    report = evaluate_rmse(result.model, test_seqs, result.stats)
    return version, result, report


def run_versions(sequences: dict[str, GraphSequence], splits, model_config: ModelConfig,
                 train_config: TrainConfig, *, normalize: bool = True,
                 parallel: bool = False, max_workers: int | None = None):
    """Train and test one model per split version.

    Returns ``(VersionsReport, {version: TrainResult})``. With ``parallel``
    each version runs in its own process with its own seed-derived state.
    """
    jobs = []
    for split in splits:
        pick = lambda ids: [sequences[i] for i in ids]  # noqa: E731
        jobs.append((split.version, pick(split.train), pick(split.val), pick(split.test),
                     model_config, train_config, normalize))
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(_run_one, jobs))
    else:
        outcomes = [_run_one(j) for j in jobs]
    results = {v: res for v, res, _ in outcomes}
    report = aggregate_versions({v: rep for v, _, rep in outcomes})
    return report, results
