"""Training with early stopping, evaluation, k-fold CV and the cross-dataset matrix.

Every evaluation is subject-disjoint from the data the evaluated model was
trained on; the helpers below assert this structurally rather than trusting
the caller.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from gazecnn import model as M
from gazecnn import optim
from gazecnn import tensor as T
from gazecnn.data import (GazeSample, preprocess_batch, split_folds, subjects_of, targets,
                          with_mirrors)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training could not run or diverged."""


class LeakageError(AssertionError):
    """A test subject was found in the training data of the evaluated model."""


@dataclass
class TrainConfig:
    max_epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    val_fraction: float = 0.1
    mirror: bool = True
    seed: int = 0
    # overfit mode: no validation split, validation set = training set
    overfit: bool = False
    # optional extra stopping rules
    max_steps: int | None = None
    target_mae: float | None = None
    # replace every head pose by zeros (head-pose ablation)
    zero_head_pose: bool = False
    precision: str = "single"

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not 0 < self.val_fraction < 1:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")

    @property
    def hyper(self) -> optim.AdamHyper:
        return optim.AdamHyper(self.lr, self.beta1, self.beta2, self.eps)

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    @classmethod
    def field_types(cls) -> dict[str, str]:
        return {f.name: f.type for f in fields(cls)}


@dataclass
class EvalReport:
    mae_mean_deg: float
    mae_std_deg: float
    max_error_deg: float
    n_samples: int

    @classmethod
    def from_errors(cls, errors: np.ndarray) -> "EvalReport":
        if errors.size == 0:
            raise ValueError("cannot report on an empty sample set")
        return cls(float(errors.mean()), float(errors.std()), float(errors.max()), int(errors.size))


@dataclass
class MatrixReport:
    names: list[str]
    cells: list[list[EvalReport]]

    def cell(self, train: str, test: str) -> EvalReport:
        return self.cells[self.names.index(train)][self.names.index(test)]

    def row_max(self, train: str) -> float:
        return max(r.mae_mean_deg for r in self.cells[self.names.index(train)])


@dataclass
class TrainResult:
    net: M.GazeNet
    history: list[dict]
    train_subjects: set[str]
    val_subjects: set[str]
    best_epoch: int
    steps: int


def _check_disjoint(train: Sequence[GazeSample], test: Sequence[GazeSample]) -> None:
    overlap = set(subjects_of(train)) & set(subjects_of(test))
    if overlap:
        raise LeakageError(f"subjects present in both training and test data: {sorted(overlap)}")


def _inputs(samples: Sequence[GazeSample], config: TrainConfig):
    eyes, pose = preprocess_batch(samples)
    if config.zero_head_pose:
        pose[:] = 0
    return eyes, pose


def predict_samples(net: M.GazeNet, samples: Sequence[GazeSample], batch_size: int = 64,
                    zero_head_pose: bool = False) -> np.ndarray:
    """``N x 2`` predicted (pitch, yaw) in degrees."""
    preds = np.zeros((len(samples), 2))
    for i in range(0, len(samples), batch_size):
        eyes, pose = preprocess_batch(samples[i:i + batch_size])
        if zero_head_pose:
            pose[:] = 0
        preds[i:i + batch_size] = M.forward(net, eyes, pose)[0]
    return preds


def evaluate(net: M.GazeNet, samples: Sequence[GazeSample], zero_head_pose: bool = False) -> EvalReport:
    if not samples:
        raise ValueError("cannot evaluate on an empty sample set")
    preds = predict_samples(net, samples, zero_head_pose=zero_head_pose)
    return EvalReport.from_errors(optim.per_sample_error(preds, targets(samples)))


def validation_split(samples: Sequence[GazeSample], fraction: float, seed: int):
    """Hold out ``fraction`` of the subjects (at least one) for early stopping."""
    subjects = sorted(subjects_of(samples))
    if len(subjects) < 2:
        raise TrainingError(f"need >= 2 subjects for a validation split, got {len(subjects)}")
    n_val = min(max(1, int(round(fraction * len(subjects)))), len(subjects) - 1)
    order = T.make_rng([seed, 1]).permutation(len(subjects))
    val_subjects = {subjects[j] for j in order[:n_val]}
    train = [s for s in samples if s.base_subject not in val_subjects]
    val = [s for s in samples if s.base_subject in val_subjects]
    return train, val


def train(samples: Sequence[GazeSample], config: TrainConfig = TrainConfig()) -> TrainResult:
    """Minimise MSE with Adam; keep the snapshot with the best validation MAE.

    Mirroring (when enabled) is applied to the training part only, after the
    validation subjects have been set aside.
    """
    samples = list(samples)
    if not samples:
        raise TrainingError("no training samples")
    if config.overfit:
        train_set = with_mirrors(samples) if config.mirror else samples
        val_set = train_set
    else:
        train_set, val_set = validation_split(samples, config.val_fraction, config.seed)
        _check_disjoint(train_set, val_set)
        if config.mirror:
            train_set = with_mirrors(train_set)

    rng = T.make_rng([config.seed, 2])
    net = M.build(rng, dtype=config.dtype)
    state = optim.AdamState.zeros_like(net.params.values())
    hyper = config.hyper
    params = list(net.params.values())
    y_train = targets(train_set)

    best_mae, best_net, best_epoch = np.inf, net.copy(), 0
    history = []
    steps = 0
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        loss_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            eyes, pose = _inputs([train_set[i] for i in idx], config)
            out, trace = M.forward(net, eyes, pose)
            diff = out.astype(np.float64) - y_train[idx]
            loss_sum += float(np.mean(diff ** 2, axis=1).sum())
            # per-sample MSE gradient is (pred - target); average over the batch
            grads = M.backward(net, trace, diff / len(idx))
            try:
                optim.adam_step(params, grads.values(), state, hyper)
            except optim.NonFiniteGradientError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break

        val = evaluate(net, val_set, zero_head_pose=config.zero_head_pose)
        history.append({"epoch": epoch, "steps": steps,
                        "train_loss": loss_sum / len(order) if len(order) else 0.0,
                        "val_mae": val.mae_mean_deg})
        log.info("epoch %d: train mse %.4f, val mae %.3f deg (%.1fs)", epoch,
                 history[-1]["train_loss"], val.mae_mean_deg, time.perf_counter() - t0)
        if not np.isfinite(val.mae_mean_deg):
            raise TrainingError(f"epoch {epoch}: validation error is not finite")
        if val.mae_mean_deg < best_mae:
            best_mae, best_net, best_epoch = val.mae_mean_deg, net.copy(), epoch
            since_best = 0
        else:
            since_best += 1
        if since_best >= config.patience:
            break
        if config.target_mae is not None and best_mae < config.target_mae:
            break
        if config.max_steps is not None and steps >= config.max_steps:
            break

    return TrainResult(best_net, history, set(subjects_of(train_set)), set(subjects_of(val_set)),
                       best_epoch, steps)


def _map(fn, items, jobs: int):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


@dataclass
class CVResult:
    folds: list[EvalReport]
    pooled: EvalReport
    fold_subjects: list[tuple[set[str], set[str]]]


def cross_validate(samples: Sequence[GazeSample], k: int = 4,
                   config: TrainConfig = TrainConfig(), jobs: int = 1) -> CVResult:
    """Subject-disjoint k-fold CV; the pooled report covers every held-out prediction."""
    if k < 2:
        raise ValueError("cross-validation needs k >= 2")
    samples = list(samples)
    split = split_folds(samples, k, config.seed)

    def run(fold):
        train_idx, test_idx = split.train_test(fold)
        train_set = [samples[i] for i in train_idx]
        test_set = [samples[i] for i in test_idx]
        _check_disjoint(train_set, test_set)
        result = train(train_set, config)
        preds = predict_samples(result.net, test_set, zero_head_pose=config.zero_head_pose)
        err = optim.per_sample_error(preds, targets(test_set))
        log.info("fold %d/%d: mae %.3f deg", fold + 1, k, err.mean())
        return err, (set(subjects_of(train_set)), set(subjects_of(test_set)))

    outputs = _map(run, range(k), jobs)
    reports = [EvalReport.from_errors(err) for err, _ in outputs]
    pooled = EvalReport.from_errors(np.concatenate([err for err, _ in outputs]))
    return CVResult(reports, pooled, [subj for _, subj in outputs])


@dataclass
class MatrixResult:
    report: MatrixReport
    train_subjects: dict[str, set[str]]
    test_subjects: dict[str, set[str]]


def cross_dataset_matrix(named: Mapping[str, Sequence[GazeSample]],
                         config: TrainConfig = TrainConfig(), k: int = 4,
                         combined_name: str = "combined", jobs: int = 1) -> MatrixResult:
    """Train on each dataset (and their union), test on every dataset.

    Each named dataset is split once into a training part and a held-out part
    (one of ``k`` subject-disjoint folds).  Rows train on training parts,
    columns evaluate on held-out parts, so no cell ever tests on a subject its
    model saw, including the diagonal and the combined row.
    """
    if len(named) < 2:
        raise ValueError("the cross-dataset matrix needs at least two datasets")
    if combined_name in named:
        raise ValueError(f"dataset name {combined_name!r} is reserved for the union")
    train_parts, test_parts = {}, {}
    for name, samples in named.items():
        samples = list(samples)
        split = split_folds(samples, k, config.seed)
        tr, te = split.train_test(0)
        train_parts[name] = [samples[i] for i in tr]
        test_parts[name] = [samples[i] for i in te]
    train_parts[combined_name] = [s for n in named for s in train_parts[n]]
    test_parts[combined_name] = [s for n in named for s in test_parts[n]]
    names = list(named) + [combined_name]

    def run(train_name):
        result = train(train_parts[train_name], config)
        row = []
        for test_name in names:
            _check_disjoint(train_parts[train_name], test_parts[test_name])
            row.append(evaluate(result.net, test_parts[test_name], config.zero_head_pose))
        log.info("trained on %s: %s", train_name,
                 ", ".join(f"{n} {r.mae_mean_deg:.2f}" for n, r in zip(names, row)))
        return row

    cells = _map(run, names, jobs)
    return MatrixResult(MatrixReport(names, cells),
                        {n: set(subjects_of(train_parts[n])) for n in names},
                        {n: set(subjects_of(test_parts[n])) for n in names})


# --------------------------------------------------------------------------
# report files

REPORT_FIELDS = ("mae_mean_deg", "mae_std_deg", "max_error_deg", "n_samples")


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "steps", "train_loss", "val_mae"])
        for h in history:
            w.writerow([h["epoch"], h["steps"], _fmt(h["train_loss"]), _fmt(h["val_mae"])])


def write_eval_report(out_dir, report: EvalReport, label: str = "eval") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{label}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set", *REPORT_FIELDS])
        w.writerow([label, *(_fmt(getattr(report, f)) for f in REPORT_FIELDS)])
    (out_dir / f"{label}.json").write_text(json.dumps(asdict(report), indent=2) + "\n")


def write_cv_report(out_dir, cv: CVResult) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [(str(i + 1), r) for i, r in enumerate(cv.folds)] + [("pooled", cv.pooled)]
    with open(out_dir / "crossval.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", *REPORT_FIELDS])
        for label, r in rows:
            w.writerow([label, *(_fmt(getattr(r, f)) for f in REPORT_FIELDS)])
    summary = {"k": len(cv.folds), "folds": [asdict(r) for r in cv.folds],
               "pooled": asdict(cv.pooled)}
    (out_dir / "crossval.json").write_text(json.dumps(summary, indent=2) + "\n")


def write_matrix_report(out_dir, matrix: MatrixReport) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "matrix.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["train", "test", *REPORT_FIELDS])
        for tr, row in zip(matrix.names, matrix.cells):
            for te, r in zip(matrix.names, row):
                w.writerow([tr, te, *(_fmt(getattr(r, f)) for f in REPORT_FIELDS)])
    summary = {
        "names": matrix.names,
        "cells": {tr: {te: asdict(r) for te, r in zip(matrix.names, row)}
                  for tr, row in zip(matrix.names, matrix.cells)},
        "row_max_mae": {n: matrix.row_max(n) for n in matrix.names},
    }
    (out_dir / "matrix.json").write_text(json.dumps(summary, indent=2) + "\n")
