"""Diagnostic experiments over FOIL probes.

Learning curves, data-size ablations, confidence-threshold sweeps, and
statistics relating per-datapoint success to caption covariates.
"""
from __future__ import annotations

import csv
import hashlib
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import core_math as cm
from .data import DatapointRecord, EmbeddingBank, atomic_write_bytes, subset_fraction
from .encoder import EncoderDims, EncoderParams
from .errors import BadFraction, ConfigError, DataError, MissingCovariate
from .training import (
    Checkpoint,
    FoilModel,
    RunSetting,
    TrainConfig,
    evaluate_foil,
    fit,
    foil_accuracy,
    foil_arrays,
    probe_model,
    train_foil_probe,
)

DEFAULT_FRACTIONS = (0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0)
THRESHOLD_LO = 0.50
THRESHOLD_HI = 0.70
THRESHOLD_STEP = 0.01


@dataclass(frozen=True)
class CurvePoint:
    x: float
    y: float
    series: str
    # digest of the evaluation ids, so a fixed test set is checkable
    test_digest: str = ""


def _digest(records: Sequence[DatapointRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(f"{r.image_id}\t{r.language_id}\n".encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# learning over time
# ---------------------------------------------------------------------------

def learning_curve(
    setting: RunSetting | str,
    train: Sequence[DatapointRecord],
    validation: Sequence[DatapointRecord],
    test: Sequence[DatapointRecord],
    visual: EmbeddingBank,
    language: EmbeddingBank,
    cfg: TrainConfig,
    dims: EncoderDims,
    encoder: EncoderParams | None = None,
    horizon: int = 50,
) -> list[CurvePoint]:
    """Test accuracy before training (epoch 0) and after each of ``horizon`` epochs.

    Early stopping is disabled so every epoch up to the horizon is reported.
    A setting that never trains its head yields a flat curve.
    """
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    setting = RunSetting(setting)
    model = probe_model(setting, dims, cfg, encoder)
    test_arr = foil_arrays(test, visual, language)
    digest = _digest(test)

    def accuracy() -> float:
        return foil_accuracy(model.probabilities(test_arr), test_arr.y).overall

    points = [CurvePoint(0, accuracy(), setting.value, digest)]
    if not setting.trains_head:
        return points + [CurvePoint(e, points[0].y, setting.value, digest) for e in range(1, horizon + 1)]
    train_arr = foil_arrays(train, visual, language)
    val_arr = foil_arrays(validation, visual, language)
    fit(model, model.batches_from(train_arr), val_arr, cfg, lambda: None,
        on_epoch=lambda e: points.append(CurvePoint(e, accuracy(), setting.value, digest)),
        early_stopping=False, max_epochs=horizon)
    return points


# ---------------------------------------------------------------------------
# data-size ablation
# ---------------------------------------------------------------------------

def _check_fractions(fractions: Sequence[float]) -> list[float]:
    fr = [float(f) for f in fractions]
    if not fr:
        raise BadFraction("at least one fraction is required")
    for f in fr:
        if not 0.0 < f <= 1.0:
            raise BadFraction(f"fraction {f} outside (0, 1]")
    if any(b <= a for a, b in zip(fr, fr[1:])):
        raise BadFraction("fractions must be strictly ascending")
    return fr


def _ablation_cell(args) -> CurvePoint:
    setting, fraction, train, validation, test, visual, language, cfg, dims, encoder = args
    subset = subset_fraction(train, fraction, cfg.seed)
    ckpt = train_foil_probe(setting, subset, validation, visual, language, cfg, dims, encoder)
    acc = evaluate_foil(ckpt, test, visual, language).overall
    return CurvePoint(fraction, acc, RunSetting(setting).value, _digest(test))


def data_size_ablation(
    setting: RunSetting | str,
    train: Sequence[DatapointRecord],
    validation: Sequence[DatapointRecord],
    test: Sequence[DatapointRecord],
    visual: EmbeddingBank,
    language: EmbeddingBank,
    cfg: TrainConfig,
    dims: EncoderDims,
    encoder: EncoderParams | None = None,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    jobs: int = 1,
) -> list[CurvePoint]:
    """A fresh probe per training-set fraction, all scored on the same test set.

    Subsets are nested (see ``subset_fraction``); validation is not subsampled.
    """
    fr = _check_fractions(fractions)
    cells = [(RunSetting(setting), f, list(train), list(validation), list(test), visual, language,
              cfg, dims, encoder) for f in fr]
    return run_cells(_ablation_cell, cells, jobs)


def run_cells(fn, cells: Sequence, jobs: int = 1) -> list:
    """Apply ``fn`` to every cell, optionally in worker processes; order is kept."""
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    if jobs == 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=min(jobs, len(cells))) as pool:
        return list(pool.map(fn, cells))


# ---------------------------------------------------------------------------
# confidence sweep
# ---------------------------------------------------------------------------

def sweep_thresholds() -> np.ndarray:
    n = int(round((THRESHOLD_HI - THRESHOLD_LO) / THRESHOLD_STEP)) + 1
    return np.round(THRESHOLD_LO + THRESHOLD_STEP * np.arange(n), 2)


@dataclass
class ConfidenceSweep:
    thresholds: np.ndarray
    accuracies: np.ndarray
    auc: float
    series: str = ""

    def points(self) -> list[CurvePoint]:
        return [CurvePoint(float(t), float(a), self.series) for t, a in zip(self.thresholds, self.accuracies)]


def threshold_accuracy(probs: np.ndarray, y: np.ndarray, t: float) -> float:
    """Share of datapoints whose true class is the argmax with probability >= t."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    pred = np.argmax(probs, axis=1)
    p_true = probs[np.arange(len(y)), y]
    return float(np.mean((pred == y) & (p_true >= t)))


def sweep_from_probabilities(probs: np.ndarray, y: np.ndarray, series: str = "") -> ConfidenceSweep:
    if len(y) == 0:
        raise DataError("confidence sweep needs at least one datapoint")
    thr = sweep_thresholds()
    acc = np.array([threshold_accuracy(probs, y, t) for t in thr])
    auc = float(np.trapezoid(acc, thr) / (THRESHOLD_HI - THRESHOLD_LO))
    return ConfidenceSweep(thr, acc, min(max(auc, 0.0), 1.0), series)


def confidence_sweep(ckpt: Checkpoint, records: Sequence[DatapointRecord], visual: EmbeddingBank,
                     language: EmbeddingBank) -> ConfidenceSweep:
    arr = foil_arrays(records, visual, language)
    probs = FoilModel(ckpt.encoder, ckpt.head, frozen=False).probabilities(arr)
    return sweep_from_probabilities(probs, arr.y, ckpt.setting)


def success_bits(ckpt: Checkpoint, records: Sequence[DatapointRecord], visual: EmbeddingBank,
                 language: EmbeddingBank) -> np.ndarray:
    """1 where the probe classifies a datapoint correctly, else 0."""
    arr = foil_arrays(records, visual, language)
    probs = FoilModel(ckpt.encoder, ckpt.head, frozen=False).probabilities(arr)
    return (np.argmax(probs, axis=1) == arr.y).astype(np.int64)


# ---------------------------------------------------------------------------
# success statistics
# ---------------------------------------------------------------------------

def correlate_success(success: Sequence[int], covariate: str, meta: Sequence[Mapping]) -> dict:
    """Pearson and Spearman correlation of success with one numeric covariate.

    Datapoints whose meta lacks the covariate are skipped; ``n`` counts the rest.
    """
    if len(success) != len(meta):
        raise DataError(f"{len(success)} success bits for {len(meta)} datapoints")
    xs, ys = [], []
    for s, m in zip(success, meta):
        if covariate in m:
            v = m[covariate]
            if isinstance(v, str) or not math.isfinite(float(v)):
                raise DataError(f"covariate {covariate!r} has non-numeric value {v!r}")
            xs.append(float(v))
            ys.append(float(s))
    if len(xs) < 2:
        raise MissingCovariate(f"covariate {covariate!r} present on {len(xs)} datapoints (need 2)")
    return {"pearson": cm.pearson(ys, xs), "spearman": cm.spearman(ys, xs), "n": len(xs)}


@dataclass
class LogisticFit:
    coefficients: np.ndarray
    intercept: float
    steps: int
    converged: bool
    # training data perfectly classified: the unpenalised optimum is at infinity
    separated: bool
    feature_names: list[str] = field(default_factory=list)


def logistic_success_regression(
    success: Sequence[int],
    features,
    l2: float = 1e-4,
    lr: float = 0.05,
    max_steps: int = 10_000,
    tol: float = 1e-6,
    feature_names: Sequence[str] = (),
) -> LogisticFit:
    """Penalised maximum-likelihood logistic regression fitted with Adam.

    Objective: mean log-loss + (l2 / 2) * ||w||^2, intercept unpenalised.
    Stops when the gradient norm drops below ``tol`` or after ``max_steps``.
    """
    y = np.asarray(success, dtype=np.float64)
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if len(y) != n:
        raise DataError(f"{len(y)} outcomes for {n} feature rows")
    if n < p + 1:
        raise DataError(f"need at least {p + 1} datapoints for {p} features")
    if not np.all(np.isfinite(X)):
        raise DataError("features must be finite")
    if np.any((y != 0) & (y != 1)):
        raise DataError("success bits must be 0 or 1")
    params = {"w": np.zeros(p), "c": np.zeros(1)}
    state = cm.AdamState(lr=lr)
    converged = False
    steps = 0
    for steps in range(1, max_steps + 1):
        z = X @ params["w"] + params["c"][0]
        r = (0.5 * (1.0 + np.tanh(0.5 * z)) - y) / n  # sigmoid via tanh, stable
        grads = {"w": X.T @ r + l2 * params["w"], "c": np.array([r.sum()])}
        if math.sqrt(float(grads["w"] @ grads["w"]) + float(grads["c"][0] ** 2)) < tol:
            converged = True
            break
        cm.adam_step(params, grads, state)
    z = X @ params["w"] + params["c"][0]
    separated = bool(np.all((z > 0) == (y == 1)))
    return LogisticFit(params["w"].copy(), float(params["c"][0]), steps, converged, separated,
                       list(feature_names))


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def _csv_bytes(header: Sequence[str], rows: Iterable[Sequence]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue().encode()


def sorted_points(points: Iterable[CurvePoint]) -> list[CurvePoint]:
    return sorted(points, key=lambda p: (p.series, p.x))


def write_curve_csv(path, points: Iterable[CurvePoint]) -> None:
    """``epochs.csv`` / ``datasize.csv`` / ``confidence.csv`` layout."""
    atomic_write_bytes(path, _csv_bytes(("x", "y", "series"),
                                        ((p.x, p.y, p.series) for p in sorted_points(points))))


def write_correlations_csv(path, rows: Iterable[tuple[str, str, Mapping]]) -> None:
    """Rows of ``(series, covariate, {pearson, spearman, n})``."""
    atomic_write_bytes(path, _csv_bytes(
        ("series", "covariate", "pearson", "spearman", "n"),
        ((s, c, float(r["pearson"]), float(r["spearman"]), int(r["n"])) for s, c, r in rows)))
