"""Training loop, evaluation metrics and inference benchmarks."""
from __future__ import annotations

import copy
import csv
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .model import TARGET_NAMES, ModelConfig, NetworkModel, Sample
from .nn import Var

log = logging.getLogger(__name__)

STAT_LABELS = ("Average", "Median", "90th Perc.", "95th Perc.", "99th Perc.")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 300
    steps_per_epoch: int = 500
    lr: float = 1e-3
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    seed: int = 0
    batch_size: int = 1

    def __post_init__(self):
        if self.max_epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps and batch size must be positive")
        if self.lr < 0 or self.plateau_patience < 1:
            raise ValueError("lr must be >= 0 and patience >= 1")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must be in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {unknown}")
        return cls(**d)


# Model and training presets. "desk" keeps runs on a single CPU core short and
# predicts in milliseconds because desk-scale links run at 10 Mb/s.
PRESETS = {
    "paper": (ModelConfig(state_dim=32, mp_iterations=8, target_unit_s=1e-6),
              TrainConfig(max_epochs=300, steps_per_epoch=500)),
    "desk": (ModelConfig(state_dim=16, mp_iterations=4, target_unit_s=1e-3),
             TrainConfig(max_epochs=50, steps_per_epoch=200)),
}


# ---------------------------------------------------------------------------
# loss and metrics


def target_mask(y: np.ndarray) -> np.ndarray:
    """Cells with ground truth: finite and strictly positive."""
    with np.errstate(invalid="ignore"):
        return np.isfinite(y) & (y > 0)


def mape_loss(y_hat: Var, y: np.ndarray) -> Var:
    """Mean over valid cells of |y_hat - y| / y, as a fraction."""
    mask = target_mask(y)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no valid targets")
    yv = np.where(mask, y, 1.0)
    diff = y_hat.value - yv
    value = float(np.sum(np.abs(diff)[mask] / yv[mask])) / n

    def bw(g):
        return (float(g) * np.where(mask, np.sign(diff) / yv, 0.0) / n,)

    return Var(np.array(value), (y_hat,), bw)


def mape(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Pooled MAPE in percent over valid cells."""
    mask = target_mask(y)
    if not mask.any():
        raise ValueError("no valid targets")
    return float(np.mean(np.abs(y_hat[mask] - y[mask]) / y[mask]) * 100.0)


def metrics(y_hat: np.ndarray, y: np.ndarray) -> dict:
    """MAPE (%), MAE and R^2 over the valid cells of two equally shaped arrays."""
    y_hat = np.asarray(y_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    mask = target_mask(y)
    if not mask.any():
        raise ValueError("no valid targets")
    p, t = y_hat[mask], y[mask]
    err = p - t
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    return {
        "mape": float(np.mean(np.abs(err) / t) * 100.0),
        "mae": float(np.mean(np.abs(err))),
        "r2": None if ss_tot == 0.0 else 1.0 - float(np.sum(err ** 2)) / ss_tot,
        "n": int(mask.sum()),
    }


# ---------------------------------------------------------------------------
# training


def _check_samples(samples: Sequence[Sample], what: str) -> None:
    if not samples:
        raise ValueError(f"{what} set is empty")
    for s in samples:
        if s.targets is None:
            raise ValueError(f"{what} sample has no ground truth")


def dataset_mape(model: NetworkModel, samples: Sequence[Sample]) -> float:
    """Pooled MAPE (%) over every valid (flow, window, statistic) cell."""
    num, den = 0.0, 0
    for s in samples:
        pred = model.predict(s)
        mask = target_mask(s.targets)
        num += float(np.sum(np.abs(pred[mask] - s.targets[mask]) / s.targets[mask]))
        den += int(mask.sum())
    if den == 0:
        raise ValueError("no valid targets")
    return num / den * 100.0


@dataclass
class TrainResult:
    model: NetworkModel
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_mape: float = float("inf")
    updates: int = 0

    def checkpoint_extra(self, train_cfg: TrainConfig) -> dict:
        return {"train_config": asdict(train_cfg), "history": self.history,
                "best_epoch": self.best_epoch, "best_val_mape": self.best_val_mape}

    def save(self, path, train_cfg: TrainConfig) -> None:
        self.model.save(path, self.checkpoint_extra(train_cfg))


def gradient(model: NetworkModel, sample: Sample) -> tuple[float, dict]:
    """MAPE loss of one scenario and its gradient for every parameter."""
    w = model.leaves()
    y_hat = model.forward(sample, w)
    loss = mape_loss(y_hat, sample.targets / model.config.target_unit_s)
    nn.backward(loss)
    grads = {b: {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
                 for k, v in blk.items()} for b, blk in w.items()}
    return float(loss.value), grads


def train(cfg: TrainConfig, train_set: Sequence[Sample], val_set: Sequence[Sample],
          model_cfg: ModelConfig, on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    _check_samples(train_set, "training")
    _check_samples(val_set, "validation")
    window = train_set[0].window_size
    if any(abs(s.window_size - window) > 1e-12 for s in list(train_set) + list(val_set)):
        raise ValueError("all training and validation scenarios must share one window size")

    rng = np.random.default_rng(cfg.seed)
    normalizer = nn.fit_normalizer([s.features for s in train_set])
    model = NetworkModel.create(model_cfg, normalizer, window, seed=int(rng.integers(2**31)))
    opt = nn.Adam(lr=cfg.lr)
    result = TrainResult(model=model)
    best_params = copy.deepcopy(model.params)
    wait = 0

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        losses = []
        for _ in range(cfg.steps_per_epoch):
            picks = rng.integers(len(train_set), size=cfg.batch_size)
            total, grads = 0.0, None
            for i in picks:
                loss, g = gradient(model, train_set[int(i)])
                total += loss
                if grads is None:
                    grads = g
                else:
                    for b in grads:
                        for k in grads[b]:
                            grads[b][k] = grads[b][k] + g[b][k]
            if cfg.batch_size > 1:
                for b in grads:
                    for k in grads[b]:
                        grads[b][k] = grads[b][k] / cfg.batch_size
            total /= cfg.batch_size
            if not np.isfinite(total):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, "
                                       f"update {result.updates}, lr {opt.lr:g}")
            opt.step(model.params, grads)
            result.updates += 1
            losses.append(total)

        val = dataset_mape(model, val_set)
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation MAPE at epoch {epoch}")
        record = {"epoch": epoch, "lr": opt.lr, "train_mape": float(np.mean(losses)) * 100.0,
                  "val_mape": val}
        result.history.append(record)
        if val < result.best_val_mape:
            result.best_val_mape = val
            result.best_epoch = epoch
            best_params = copy.deepcopy(model.params)
            wait = 0
        else:
            wait += 1
            if wait >= cfg.plateau_patience:
                opt.lr *= cfg.plateau_factor
                wait = 0
                log.info("epoch %d: validation MAPE stalled for %d epochs, lr -> %g",
                         epoch, cfg.plateau_patience, opt.lr)
        log.info("epoch %d  train %.3f%%  val %.3f%%  lr %g  (%.1fs)", epoch,
                 record["train_mape"], val, record["lr"], time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(record)

    model.params = best_params
    return result


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    rows: dict  # target name -> metrics dict
    n_scenarios: int
    inference_s: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"metrics": self.rows, "n_scenarios": self.n_scenarios,
                "median_inference_s": statistics.median(self.inference_s) if self.inference_s else None,
                "mae_unit": "s", "mape_unit": "%"}

    def table(self) -> str:
        """Aligned text table in the layout of a delay/jitter error table."""
        lines = [f"{'':8s}{'Metric':10s}" + "".join(f"{h:>13s}" for h in STAT_LABELS)]
        for kind in ("delay", "jitter"):
            for metric, label, fmt in (("mape", "MAPE", "{:12.3f}%"), ("mae", "MAE (us)", "{:13.3f}"),
                                       ("r2", "R2", "{:13.3f}")):
                cells = []
                for stat in ("avg", "median", "p90", "p95", "p99"):
                    row = self.rows.get(f"{kind}_{stat}")
                    v = None if row is None else row[metric]
                    if v is not None and metric == "mae":
                        v *= 1e6
                    cells.append(f"{'-':>13s}" if v is None else fmt.format(v))
                lines.append(f"{kind:8s}{label:10s}" + "".join(cells))
        return "\n".join(lines)


def evaluate(model: NetworkModel, samples: Sequence[Sample], residuals_path=None,
             names: Optional[Sequence[str]] = None) -> EvalReport:
    _check_samples(samples, "test")
    preds, times = [], []
    for s in samples:
        t0 = time.perf_counter()
        preds.append(model.predict(s))
        times.append(time.perf_counter() - t0)
    rows = {}
    for k, name in enumerate(TARGET_NAMES[: model.config.n_targets]):
        y = np.concatenate([s.targets[..., k].ravel() for s in samples])
        p = np.concatenate([pr[..., k].ravel() for pr in preds])
        if target_mask(y).any():
            rows[name] = metrics(p, y)
    if residuals_path is not None:
        names = names or [str(i) for i in range(len(samples))]
        with open(Path(residuals_path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "flow", "window", "statistic", "target", "prediction"])
            for name, s, pr in zip(names, samples, preds):
                mask = target_mask(s.targets)
                for f, t, k in zip(*np.nonzero(mask)):
                    w.writerow([name, int(s.graph.flow_ids[f]), int(t), TARGET_NAMES[k],
                                repr(float(s.targets[f, t, k])), repr(float(pr[f, t, k]))])
    return EvalReport(rows, len(samples), times)


# ---------------------------------------------------------------------------
# timing


def bench_inference(model: NetworkModel, points: Sequence[tuple[str, Sample]],
                    repeats: int = 5) -> list[dict]:
    """Median forward-pass wall time per labelled scenario.

    Feature extraction is done beforehand; the timed region is the model's forward
    pass only. Every point is warmed up first and repetitions are interleaved
    across points, so slow drift in machine speed affects all points alike.
    """
    if repeats < 3:
        raise ValueError("need at least 3 repetitions per point")
    for _, s in points:
        model.predict(s, check_window=False)
    times = [[] for _ in points]
    for _ in range(repeats):
        for ts, (_, s) in zip(times, points):
            t0 = time.perf_counter()
            model.predict(s, check_window=False)
            ts.append(time.perf_counter() - t0)
    rows = []
    for ts, (label, s) in zip(times, points):
        rows.append({"label": label, "median_s": statistics.median(ts),
                     "packets": int(s.features.packets.sum()),
                     "nodes": len(s.scenario.devices), "flows": s.index.n_flows,
                     "windows": s.n_windows, "window_s": s.window_size, "repeats": repeats})
    return rows


def format_bench(rows: Sequence[dict]) -> str:
    head = f"{'point':>12s} {'packets':>10s} {'nodes':>6s} {'flows':>6s} {'windows':>8s} {'median ms':>10s}"
    lines = [head]
    for r in rows:
        lines.append(f"{r['label']:>12s} {r['packets']:>10d} {r['nodes']:>6d} {r['flows']:>6d} "
                     f"{r['windows']:>8d} {r['median_s'] * 1e3:>10.2f}")
    return "\n".join(lines)
