"""Training loop, evaluation metrics and leave-one-embryo-out cross-validation."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .autodiff import Adam
from .core import Embryo4D, validate_embryo
from .pointnet import (AugmentConfig, NormalizationSpec, PointNetRegressor, augment, predict_ensemble,
                       sample_points)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0
    sample_size: int = 4096
    ensemble_runs: int = 25
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)
    lr_decay: float = 1.0  # multiply lr by this every lr_decay_every epochs; 1.0 = constant
    lr_decay_every: int = 20
    ortho_weight: float = 0.001
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.augment, Mapping):
            self.augment = AugmentConfig(**self.augment)
        if isinstance(self.normalization, Mapping):
            self.normalization = NormalizationSpec(**self.normalization)
        for name in ("epochs", "batch_size", "sample_size", "ensemble_runs", "lr_decay_every", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.learning_rate > 0 or not self.lr_decay > 0:
            raise ValueError("learning_rate and lr_decay must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: PointNetRegressor
    epoch_losses: List[float]
    train_ids: List[str]
    visited: set  # (embryo id, frame) pairs used for training


def train(embryos: Mapping[str, Embryo4D], cfg: TrainConfig, held_out: Optional[str] = None,
          model: Optional[PointNetRegressor] = None,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Fit a model on every frame of every embryo except ``held_out``.

    Each epoch visits all (embryo, frame) pairs once in a seeded shuffle,
    drawing a fresh subsample and augmentation per visit. The recorded epoch
    loss is the mean squared error over the epoch's samples.
    """
    if held_out is not None and held_out not in embryos:
        raise TrainingError(f"held-out embryo {held_out!r} not in dataset")
    train_ids = [k for k in embryos if k != held_out]
    if not train_ids:
        raise TrainingError("no training embryos left")
    for k in train_ids:
        report = validate_embryo(embryos[k])
        if not report.ok:
            raise TrainingError(f"embryo {k!r}: {report.failures[0]}")

    items = [(eid, f) for eid in train_ids for f in range(len(embryos[eid]))]
    labels = {(eid, f): embryos[eid].hpf(f) for eid, f in items}
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = PointNetRegressor(seed=int(rng.integers(2**31)), ortho_weight=cfg.ortho_weight)
        # start the regression output at the mean label instead of 0 h
        model.params["head3.b"].data[:] = np.mean(list(labels.values()))
    opt = Adam(model.parameters(), lr=cfg.learning_rate)

    losses, visited = [], set()
    for epoch in range(cfg.epochs):
        opt.lr = cfg.learning_rate * cfg.lr_decay ** (epoch // cfg.lr_decay_every)
        order = rng.permutation(len(items))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            clouds = [_training_cloud(embryos[eid][f].points, cfg, rng) for eid, f in batch]
            targets = [labels[b] for b in batch]
            opt.zero_grad()
            loss, mse = model.loss(clouds, targets)
            loss.backward()
            opt.step()
            if not math.isfinite(mse.item()):
                raise TrainingError(f"non-finite loss in epoch {epoch}")
            total += mse.item() * len(batch)
            seen += len(batch)
            visited.update(batch)
        losses.append(total / seen)
        log.info("epoch %d/%d  mse %.5f h^2", epoch + 1, cfg.epochs, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    return TrainResult(model, losses, train_ids, visited)


def _training_cloud(points, cfg: TrainConfig, rng) -> np.ndarray:
    cloud = cfg.normalization.apply(sample_points(points, cfg.sample_size, rng))
    return augment(cloud, cfg.augment, rng)


# -- evaluation ----------------------------------------------------------


def deviation_stats(pred, true) -> Dict[str, float]:
    """Mean and (population) std of |pred - true|, and the RMSD, in hours."""
    err = np.asarray(pred, dtype=np.float64) - np.asarray(true, dtype=np.float64)
    if err.size == 0:
        raise ValueError("no predictions to score")
    absdev = np.abs(err)
    return {
        "mae": float(np.mean(absdev)),
        "std": float(np.std(absdev)),
        "rmsd": float(np.sqrt(np.mean(err * err))),
        "n": int(err.size),
    }


@dataclass
class EvalReport:
    embryo_id: str
    frames: List[int]
    true_hpf: List[float]
    pred_hpf: List[float]
    pred_std: List[float] = field(default_factory=list)

    @property
    def stats(self) -> Dict[str, float]:
        return deviation_stats(self.pred_hpf, self.true_hpf)

    @property
    def mae(self):
        return self.stats["mae"]

    @property
    def std(self):
        return self.stats["std"]

    @property
    def rmsd(self):
        return self.stats["rmsd"]

    def to_dict(self) -> dict:
        out = {"embryo_id": self.embryo_id, **self.stats}
        out["frames"] = [
            {"frame": f, "true_hpf": t, "pred_hpf": p, **({"ensemble_std": s} if self.pred_std else {})}
            for f, t, p, s in zip(self.frames, self.true_hpf, self.pred_hpf,
                                  self.pred_std or [None] * len(self.frames))
        ]
        return out


def frame_seed(seed: int, frame: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, frame])


def evaluate(model: PointNetRegressor, embryo: Embryo4D, cfg: TrainConfig, embryo_id: str = "",
             frames: Optional[Sequence[int]] = None) -> EvalReport:
    """Ensemble-predict every frame and compare against its stage label."""
    frames = list(range(len(embryo))) if frames is None else list(frames)

    def one(f):
        return predict_ensemble(model, embryo[f].points, runs=cfg.ensemble_runs, seed=frame_seed(cfg.seed, f),
                                sample_size=cfg.sample_size, norm=cfg.normalization)

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            preds = list(pool.map(one, frames))
    else:
        preds = [one(f) for f in frames]
    return EvalReport(embryo_id, frames, [embryo.hpf(f) for f in frames],
                      [p.mean for p in preds], [p.std for p in preds])


@dataclass
class CrossValidationReport:
    folds: List[EvalReport]
    losses: Dict[str, List[float]]

    @property
    def pooled(self) -> Dict[str, float]:
        pred = np.concatenate([f.pred_hpf for f in self.folds])
        true = np.concatenate([f.true_hpf for f in self.folds])
        return deviation_stats(pred, true)

    @property
    def per_fold_mean(self) -> Dict[str, float]:
        stats = [f.stats for f in self.folds]
        return {k: float(np.mean([s[k] for s in stats])) for k in ("mae", "std", "rmsd")}

    def to_dict(self) -> dict:
        return {
            "aggregate": self.pooled,
            "per_fold_mean": self.per_fold_mean,
            "folds": [f.to_dict() for f in self.folds],
        }


def cross_validate(embryos: Mapping[str, Embryo4D], cfg: TrainConfig,
                   on_fold: Optional[Callable[[str, TrainResult, EvalReport], None]] = None) -> CrossValidationReport:
    """One fold per embryo: train on the others, evaluate on it."""
    if len(embryos) < 2:
        raise TrainingError("cross-validation needs at least 2 embryos")
    folds, losses = [], {}
    for held_out in embryos:
        result = train(embryos, cfg, held_out=held_out)
        if any(eid == held_out for eid, _ in result.visited):
            raise TrainingError(f"held-out embryo {held_out!r} leaked into training")
        report = evaluate(result.model, embryos[held_out], cfg, embryo_id=held_out)
        log.info("fold %s: MAE %.3f h, RMSD %.3f h", held_out, report.mae, report.rmsd)
        folds.append(report)
        losses[held_out] = result.epoch_losses
        if on_fold is not None:
            on_fold(held_out, result, report)
    return CrossValidationReport(folds, losses)


def midpoint_baseline(embryo: Embryo4D) -> Dict[str, float]:
    """Scores of always predicting the middle of the labelled range."""
    lm = embryo.label_map
    true = lm.all_hpf()
    return deviation_stats(np.full_like(true, 0.5 * (lm.hpf_start + lm.hpf_end)), true)
