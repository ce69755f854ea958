"""Loss, Adam, the early-stopped training loop, metrics and the experiment
runner that ties ingestion, features and the model together."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from . import numerics as nx
from .errors import NumericError, TrainingError, UsageError
from .features import GroupFeatures, SupervisedWindows, build_group_features, postprocess_for_target
from .ingest import AlignedGroup
from .numerics import Tape, Tensor

# stream 0 of the run seed initialises parameters
TRAIN_STREAM = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise UsageError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise UsageError("batch_size and max_epochs must be >= 1, patience >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise UsageError("beta1 and beta2 must lie in [0, 1)")
        if not self.eps > 0:
            raise UsageError("eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise UsageError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def mse_loss(pred, target) -> Tensor:
    pred = nx.as_tensor(pred)
    target = nx.as_tensor(target)
    if pred.shape != target.shape:
        raise UsageError(f"pred {pred.shape} and target {target.shape} differ")
    return nx.mean(nx.square(nx.sub(pred, target)))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: M.ParameterSet, grads: dict, state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


@dataclass
class TrainResult:
    params: M.ParameterSet
    history: list[tuple[int, float, float]]   # (epoch, train_loss, val_loss), 1-based
    best_epoch: int
    best_val_loss: float

    def write_history(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, tl, vl in self.history:
                w.writerow([e, repr(tl), repr(vl)])


def _loss_value(windows: SupervisedWindows, params, mcfg) -> float:
    pred = M.predict(windows.inputs, params, mcfg)
    return float(np.mean((pred - windows.targets) ** 2))


def train(mcfg: M.ModelConfig, train_w: SupervisedWindows, val_w: SupervisedWindows,
          tcfg: TrainConfig = TrainConfig(), params: M.ParameterSet | None = None,
          log=None) -> TrainResult:
    """Fit on ``train_w`` with early stopping on ``val_w`` loss.

    Batches are drawn from a seeded per-epoch permutation of the train windows.
    Training stops once ``patience`` epochs pass without a new best val loss
    (so patience 0 runs one epoch) or at ``max_epochs``; the best epoch's
    parameters are returned.
    """
    if len(train_w) == 0 or len(val_w) == 0:
        raise UsageError("train and val sets must be nonempty")
    if params is None:
        params = M.init_parameters(mcfg, tcfg.seed)
    M.check_parameters(params, mcfg)
    rng = nx.make_rng(tcfg.seed, TRAIN_STREAM)
    state = AdamState()
    history = []
    best = (math.inf, 0, M.copy_parameters(params))
    n = len(train_w)
    for epoch in range(1, tcfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, tcfg.batch_size):
            idx = order[s:s + tcfg.batch_size]
            try:
                with Tape() as tape:
                    pred = M.forward(train_w.inputs[idx], params, mcfg, training=True, rng=rng)
                    loss = mse_loss(pred, train_w.targets[idx])
            except NumericError as exc:
                raise TrainingError(f"diverged at epoch {epoch}: {exc}") from None
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            total += lv * idx.size
            try:
                adam_step(params, tape.gradient(loss, params), state, tcfg)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from None
        train_loss = total / n
        try:
            val_loss = _loss_value(val_w, params, mcfg)
        except NumericError as exc:
            raise TrainingError(f"diverged at epoch {epoch}: {exc}") from None
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append((epoch, train_loss, val_loss))
        if log is not None:
            log(f"epoch {epoch:4d} train {train_loss:.6g} val {val_loss:.6g}")
        if val_loss < best[0]:
            best = (val_loss, epoch, M.copy_parameters(params))
        if epoch - best[1] >= tcfg.patience:
            break
    return TrainResult(best[2], history, best[1], best[0])


# --------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    mse: float
    mape: float | None
    mae: float
    r2: float

    def as_row(self) -> list[str]:
        return [repr(self.rmse), repr(self.mse),
                "" if self.mape is None else repr(self.mape), repr(self.mae), repr(self.r2)]


METRIC_FIELDS = ("rmse", "mse", "mape", "mae", "r2")


def evaluate(pred, actual, with_mape: bool = True) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    actual = np.asarray(actual, dtype=np.float64).reshape(-1)
    if pred.size != actual.size or pred.size == 0:
        raise UsageError("pred and actual must be nonempty and equal length")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(actual))):
        raise NumericError("metrics need finite inputs")
    err = actual - pred
    mse = float(np.mean(err * err))
    mae = float(np.mean(np.abs(err)))
    mape = None
    if with_mape:
        if np.any(actual == 0):
            raise NumericError("MAPE undefined: an actual value is zero")
        mape = float(100.0 * np.mean(np.abs(err) / np.abs(actual)))
    centred = actual - actual.mean()
    sst = float(np.sum(centred * centred))
    if sst == 0:
        raise NumericError("R2 undefined: actual values have zero variance")
    r2 = 1.0 - float(np.sum(err * err)) / sst
    return MetricsReport(math.sqrt(mse), mse, mape, mae, r2)


# --------------------------------------------------------------------------
# experiment runner

@dataclass
class TargetResult:
    target: str
    dates: np.ndarray
    pred_norm: np.ndarray
    actual_norm: np.ndarray
    pred_close: np.ndarray
    actual_close: np.ndarray
    metrics_norm: MetricsReport
    metrics_close: MetricsReport

    def write_predictions(self, path: str | Path) -> None:
        write_predictions(path, self.dates, self.pred_norm, self.actual_norm,
                          self.pred_close, self.actual_close)


@dataclass
class ModelRun:
    label: str
    members: tuple[str, ...]
    features: GroupFeatures
    result: TrainResult
    targets: dict[str, TargetResult]


def write_predictions(path, dates, pred_norm, actual_norm, pred_close, actual_close) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "predicted_norm", "actual_norm", "predicted_close", "actual_close"])
        for row in zip(np.asarray(dates, dtype="datetime64[D]"), pred_norm, actual_norm,
                       pred_close, actual_close):
            w.writerow([str(row[0])] + [repr(float(v)) for v in row[1:]])


def read_predictions(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["date", "predicted_norm", "actual_norm", "predicted_close", "actual_close"]
        if reader.fieldnames != expected:
            raise UsageError(f"prediction file header must be {','.join(expected)}")
        rows = list(reader)
    out = {"date": np.array([r["date"] for r in rows], dtype="datetime64[D]")}
    for k in expected[1:]:
        out[k] = np.array([float(r[k]) for r in rows])
    return out


def score_target(features: GroupFeatures, target: str, params, mcfg: M.ModelConfig,
                 test_w: SupervisedWindows, inversion: str = "teacher") -> TargetResult:
    """Predict the test windows and score them against ``target``'s own series."""
    if target not in features.states:
        raise UsageError(f"target {target!r} is not a member of this model's input")
    pred = M.predict(test_w.inputs, params, mcfg)
    dates = features.dates[test_w.target_index]
    actual = features.columns[target][test_w.target_index]
    if np.isnan(actual).any():
        raise UsageError(f"{target} has no data on part of the test range")
    state = features.states[target]
    pred_close = postprocess_for_target(dates, pred, state, inversion)
    actual_close = state.closes[state.index_of(dates)]
    # a normalised actual can sit exactly on the fitted minimum; MAPE is then undefined
    norm = evaluate(pred, actual, with_mape=bool(np.all(actual != 0)))
    return TargetResult(target, dates, pred, actual, pred_close, actual_close,
                        norm, evaluate(pred_close, actual_close))


def run_experiment(group: AlignedGroup, targets: Sequence[str], mcfg: M.ModelConfig,
                   tcfg: TrainConfig = TrainConfig(), members: Sequence[str] | None = None,
                   single_feature: bool = False, ma_window: int = 14,
                   inversion: str = "teacher", ratios: Sequence[float] = (0.8, 0.1, 0.1),
                   log=None) -> list[ModelRun]:
    """Train and score following the per-target comparison protocol.

    Multi-feature mode trains one model on the GMNN aggregate of ``members``
    and scores it against every target. Single-feature mode trains one model
    per target on that target alone. Both use the group-wide split dates.
    """
    members = list(group.tickers if members is None else members)
    unknown = [t for t in targets if t not in members]
    if unknown:
        raise UsageError(f"targets {unknown} are not group members {members}")
    plans = [[t] for t in targets] if single_feature else [members]
    runs = []
    for mem in plans:
        feats = build_group_features(group, mem, ma_window, ratios)
        train_w, val_w, test_w = feats.windows(mcfg.window)
        if log is not None:
            log(f"model {'_'.join(mem)}: {len(train_w)} train / {len(val_w)} val / "
                f"{len(test_w)} test windows")
        result = train(mcfg, train_w, val_w, tcfg, log=log)
        scored = {t: score_target(feats, t, result.params, mcfg, test_w, inversion)
                  for t in targets if t in mem}
        runs.append(ModelRun("_".join(mem), tuple(mem), feats, result, scored))
    return runs
