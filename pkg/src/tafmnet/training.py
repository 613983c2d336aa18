"""Adam optimisation, early stopping, the training loop and evaluation runner."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .data import Sample, stack
from .distance import LevelSetCache
from .exceptions import DivergedLoss, EmptyDataset, InvalidConfig, NonFiniteValue, ShapeMismatch
from .losses import LossSchedule, compute_loss, fusion_alpha_at, update_fusion_alpha
from .metrics import (
    METRIC_ORDER,
    ConfusionCounts,
    confusion,
    metrics,
    select_threshold_max_f1,
)
from .model import TAFMNet, binarize, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 40
    batch_size: int = 8
    early_stop_start_epoch: int = 10
    early_stop_patience: int = 9
    early_stop_min_delta: float = 1e-6
    loss: LossSchedule = field(default_factory=LossSchedule)
    seed: int = 0
    monitored_metric: str = "val_J"
    eval_batch_size: int = 8

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossSchedule(**self.loss)
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise InvalidConfig("Adam betas must lie in [0, 1)")
        if self.early_stop_patience < 1:
            raise InvalidConfig("early_stop_patience must be at least 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("max_epochs and batch_size must be positive")
        if self.monitored_metric not in ("val_J", "val_loss"):
            raise InvalidConfig("monitored_metric must be 'val_J' or 'val_loss'")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
              state: AdamState, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    A missing gradient counts as zero.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeMismatch("params, grads and optimizer state have different lengths")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeMismatch(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class EarlyStopping:
    """Stop once ``epoch >= start`` and the best score is ``patience`` epochs old.

    Higher scores are better; improvement means exceeding the best by more
    than ``min_delta``.
    """

    def __init__(self, start_epoch: int = 10, patience: int = 9, min_delta: float = 1e-6):
        self.start_epoch = start_epoch
        self.patience = patience
        self.min_delta = min_delta
        self.best = -math.inf
        self.best_epoch = 0

    def update(self, epoch: int, score: float) -> tuple[bool, bool]:
        """Record ``score`` for ``epoch``; returns ``(improved, should_stop)``."""
        improved = score > self.best + self.min_delta
        if improved:
            self.best = score
            self.best_epoch = epoch
        stop = epoch >= self.start_epoch and epoch - self.best_epoch >= self.patience
        return improved, stop


# ------------------------------------------------------------------ training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_J: float
    alpha: float


@dataclass
class RunReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    best_epoch: int = 0
    best_val_J: float = float("nan")
    stopped_early: bool = False
    best_checkpoint: str | None = None
    wall_clock: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return d

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_J", "alpha"])
        for r in self.epochs:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_J), repr(r.alpha)])
        return buf.getvalue()


def _level_sets(samples: Sequence[Sample], cache: LevelSetCache) -> np.ndarray:
    return np.stack([cache.get(s.mask).phi for s in samples])


def batch_loss(model: TAFMNet, images: np.ndarray, masks: np.ndarray, phis: np.ndarray | None,
               schedule: LossSchedule, mode: str = "train",
               rng: np.random.Generator | None = None) -> tc.Tensor:
    p = model(images, mode, rng)
    g = masks[..., None].astype(p.data.dtype)
    phi = None if phis is None else phis[..., None]
    return compute_loss(p, g, phi, schedule)


def _validate(model, val, schedule, phis, batch_size) -> tuple[float, float]:
    """Validation loss (batch-weighted mean) and pooled Jaccard at threshold 0.5."""
    images, masks = stack(val)
    total, counts = 0.0, ConfusionCounts()
    with tc.no_grad():
        for i in range(0, len(val), batch_size):
            sl = slice(i, i + batch_size)
            p = model(images[sl], "infer")
            g = masks[sl][..., None].astype(p.data.dtype)
            phi = None if phis is None else phis[sl][..., None]
            total += float(compute_loss(p, g, phi, schedule).data) * len(images[sl])
            counts = counts + confusion(binarize(p.data[..., 0], 0.5), masks[sl])
    return total / len(val), metrics(counts)["J"]


def train(model: TAFMNet, train_set: Sequence[Sample], val_set: Sequence[Sample] | None,
          cfg: TrainConfig, out_dir=None, checkpoint_name: str = "best.ckpt") -> RunReport:
    """Fit ``model`` in place and restore its best-validation weights at the end."""
    if not train_set:
        raise EmptyDataset("training split is empty")
    if not val_set:
        raise EmptyDataset("early stopping needs a validation split")
    start = time.perf_counter()
    schedule = LossSchedule(**asdict(cfg.loss))
    schedule = update_fusion_alpha(schedule, 0)
    cache = LevelSetCache()
    images, masks = stack(train_set)
    phis = _level_sets(train_set, cache) if schedule.needs_level_set else None
    val_phis = _level_sets(val_set, cache) if schedule.needs_level_set else None

    params = model.parameters()
    opt = AdamState()
    dropout_rng = np.random.default_rng([cfg.seed, 7])
    stopper = EarlyStopping(cfg.early_stop_start_epoch, cfg.early_stop_patience,
                            cfg.early_stop_min_delta)
    report = RunReport()
    best_state = None
    out = Path(out_dir) if out_dir is not None else None
    n = len(train_set)

    for epoch in range(1, cfg.max_epochs + 1):
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            try:
                loss = batch_loss(model, images[idx], masks[idx],
                                  None if phis is None else phis[idx],
                                  schedule, "train", dropout_rng)
            except NonFiniteValue as exc:
                tc.reset_tape()
                raise DivergedLoss(f"non-finite value in epoch {epoch}: {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                tc.reset_tape()
                raise DivergedLoss(f"loss became {value} in epoch {epoch}")
            model.zero_grad()
            tc.backward(loss)
            adam_step([p.data for p in params], [p.grad for p in params], opt,
                      cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            total += value * len(idx)
        model.zero_grad()

        val_loss, val_j = _validate(model, val_set, schedule, val_phis, cfg.eval_batch_size)
        schedule = update_fusion_alpha(schedule, epoch)
        report.epochs.append(EpochRecord(epoch, total / n, val_loss, val_j, schedule.fusion_alpha))
        score = val_j if cfg.monitored_metric == "val_J" else -val_loss
        if not math.isfinite(score):
            score = -math.inf
        improved, stop = stopper.update(epoch, score)
        if improved:
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
                save_checkpoint(model, out / checkpoint_name)
                report.best_checkpoint = checkpoint_name
        log.info("epoch %d loss %.4f val_loss %.4f val_J %.4f alpha %.3f",
                 epoch, total / n, val_loss, val_j, schedule.fusion_alpha)
        if stop:
            report.stopped_early = epoch < cfg.max_epochs
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    report.best_epoch = stopper.best_epoch
    report.best_val_J = next((r.val_J for r in report.epochs if r.epoch == stopper.best_epoch),
                             float("nan"))
    report.wall_clock = time.perf_counter() - start
    return report


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    threshold: float
    pooled: dict
    per_image: list[dict]
    per_image_mean: dict

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in METRIC_ORDER:
            w.writerow([k, repr(float(self.pooled[k]))])
        return buf.getvalue()

    def table_csv(self) -> str:
        """One row per image plus pooled and per-image-mean rows, columns A,Sn,Sp,J,D."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", *METRIC_ORDER])
        for row in self.per_image:
            w.writerow([row["id"], *(repr(float(row[k])) for k in METRIC_ORDER)])
        w.writerow(["pooled", *(repr(float(self.pooled[k])) for k in METRIC_ORDER)])
        w.writerow(["per_image_mean", *(repr(float(self.per_image_mean[k])) for k in METRIC_ORDER)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        def clean(d):
            return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}
        return {
            "threshold": self.threshold,
            "metrics": clean({k: self.pooled[k] for k in METRIC_ORDER}),
            "undefined": [k for k in METRIC_ORDER if math.isnan(self.pooled[k])],
            "per_image_mean": clean(self.per_image_mean),
            "per_image": [clean(r) for r in self.per_image],
        }


def predict_probs(model: TAFMNet, images: np.ndarray, batch_size: int = 8,
                  threads: int = 1) -> np.ndarray:
    """Infer-mode probabilities; chunks are fixed, so any thread count gives the same bits."""
    chunks = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
    if threads <= 1 or len(chunks) <= 1:
        results = [model.predict_proba(c, batch_size) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: model.predict_proba(c, batch_size), chunks))
    return np.concatenate(results, axis=0)


def evaluate(model: TAFMNet, samples: Sequence[Sample], threshold_policy: str = "fixed",
             threshold: float = 0.5, batch_size: int = 8, threads: int = 1,
             probs: np.ndarray | None = None) -> EvalResult:
    if not samples:
        raise EmptyDataset("nothing to evaluate")
    images, masks = stack(samples)
    if probs is None:
        probs = predict_probs(model, images, batch_size, threads)
    if threshold_policy == "max_f1":
        threshold = select_threshold_max_f1(list(probs), list(masks))
    elif threshold_policy != "fixed":
        raise InvalidConfig(f"unknown threshold policy {threshold_policy!r}")
    total = ConfusionCounts()
    rows = []
    for smp, p in zip(samples, probs):
        c = confusion(binarize(p, threshold), smp.mask)
        total = total + c
        rows.append({"id": smp.id, **metrics(c)})
    means = {k: float(np.nanmean([r[k] for r in rows])) if any(not math.isnan(r[k]) for r in rows)
             else float("nan") for k in METRIC_ORDER}
    return EvalResult(threshold, metrics(total), rows, means)


def alpha_column_ok(report: RunReport, cfg: TrainConfig) -> bool:
    return all(r.alpha == fusion_alpha_at(r.epoch, cfg.loss.delta_alpha, cfg.loss.alpha_min)
               for r in report.epochs)


def write_run_outputs(report: RunReport, out_dir, result: EvalResult | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (out / "curves.csv").write_text(report.curves_csv())
    (out / "timing.json").write_text(json.dumps({"wall_clock": report.wall_clock}) + "\n")
    if result is not None:
        write_eval_outputs(result, out)


def write_eval_outputs(result: EvalResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(result.metrics_csv())
    (out / "metrics.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    (out / "per_image.csv").write_text(result.table_csv())
