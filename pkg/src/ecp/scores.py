"""Nonconformity score types, synthetic data generation, and CSV ingestion.

Scores are validated once, on the way in (generation or file load); every
other module assumes finite nonnegative values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateX,
    NegativeScore,
    NonFinite,
    ParseError,
    SchemaMismatch,
    TooFew,
)


@dataclass(frozen=True)
class CalibScores:
    """Ordered calibration scores with their cached sum."""

    values: tuple[float, ...]
    sum: float
    count: int

    def drop(self, index: int) -> "CalibScores":
        """Calibration set with one point removed (count must stay >= 2)."""
        rest = self.values[:index] + self.values[index + 1 :]
        return CalibScores(rest, self.sum - self.values[index], self.count - 1)


@dataclass(frozen=True)
class CandidateScores:
    """Per-class score vector for a single classification input."""

    values: tuple[float, ...]

    @property
    def n_classes(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class RegressionSample:
    prediction: float
    label: Optional[float] = None
    score: Optional[float] = None


def validate_calib_scores(raw: Sequence[float]) -> CalibScores:
    """Check nonnegativity and finiteness, cache the sum.

    Raises NonFinite / NegativeScore with the offending index, or TooFew
    when fewer than two scores are given.
    """
    arr = np.asarray(raw, dtype=float).ravel()
    if arr.size < 2:
        raise TooFew(arr.size)
    finite = np.isfinite(arr)
    if not finite.all():
        i = int(np.argmin(finite))
        raise NonFinite(i, raw[i])
    neg = arr < 0.0
    if neg.any():
        i = int(np.argmax(neg))
        raise NegativeScore(i, float(arr[i]))
    return CalibScores(tuple(float(v) for v in arr), float(math.fsum(arr)), int(arr.size))


def validate_candidates(raw: Sequence[float]) -> CandidateScores:
    """Per-class scores must be finite, nonnegative, and cover >= 2 classes."""
    arr = np.asarray(raw, dtype=float).ravel()
    if arr.size < 2:
        raise TooFew(arr.size)
    finite = np.isfinite(arr)
    if not finite.all():
        i = int(np.argmin(finite))
        raise NonFinite(i, raw[i])
    neg = arr < 0.0
    if neg.any():
        i = int(np.argmax(neg))
        raise NegativeScore(i, float(arr[i]))
    return CandidateScores(tuple(float(v) for v in arr))


def mae_score(prediction: float, label: float) -> float:
    """Absolute-error score |prediction - label|."""
    if not (math.isfinite(prediction) and math.isfinite(label)):
        raise NonFinite(value=(prediction, label))
    return abs(prediction - label)


def fit_ols_1d(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Least-squares line through 1-D data; returns (slope, intercept)."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size < 2 or x.size != y.size:
        raise TooFew(min(x.size, y.size))
    xm = x.mean()
    ym = y.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0.0:
        raise DegenerateX("all x values are equal")
    slope = float(((x - xm) * (y - ym)).sum()) / sxx
    return slope, float(ym - slope * xm)


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SyntheticRegressionSpec:
    """Linear-model generator: X ~ U[x_lo, x_hi], Y = slope*X + N(0, noise_sd^2)."""

    slope: float = 2.0
    noise_sd: float = 1.0
    x_lo: float = -5.0
    x_hi: float = 5.0
    n_train: int = 100
    n_calib: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.x_lo < self.x_hi:
            raise ValueError(f"x_lo must be < x_hi, got [{self.x_lo}, {self.x_hi}]")
        if self.noise_sd < 0:
            raise ValueError(f"noise_sd must be >= 0, got {self.noise_sd}")
        if self.n_train < 2:
            raise TooFew(self.n_train)
        if self.n_calib < 2:
            raise TooFew(self.n_calib)


@dataclass(frozen=True)
class SyntheticClassificationSpec:
    """Fixed random softmax-linear model scored by negative log-probability."""

    n_classes: int = 10
    feature_dim: int = 16
    logit_seed: int = 0
    temperature: float = 1.0
    n_calib: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"need >= 2 classes, got {self.n_classes}")
        if self.feature_dim < 1:
            raise ValueError(f"need >= 1 feature, got {self.feature_dim}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.n_calib < 2:
            raise TooFew(self.n_calib)


@dataclass(frozen=True)
class RegressionData:
    """Train split with its fitted line, plus scored calibration samples."""

    train_x: tuple[float, ...]
    train_y: tuple[float, ...]
    slope: float
    intercept: float
    calib: tuple[RegressionSample, ...]

    def predict(self, x: float) -> float:
        return self.slope * x + self.intercept

    def calib_scores(self) -> CalibScores:
        return validate_calib_scores([s.score for s in self.calib])


@dataclass(frozen=True)
class ClassificationData:
    """Labelled calibration points, each carrying its full per-class scores."""

    items: tuple[tuple[CandidateScores, int], ...]

    def true_scores(self) -> CalibScores:
        return validate_calib_scores([c.values[y] for c, y in self.items])

    @property
    def n_classes(self) -> int:
        return self.items[0][0].n_classes


def gen_synthetic_regression(spec: SyntheticRegressionSpec) -> RegressionData:
    """Draw train + calibration splits and score calibration against the OLS fit.

    All randomness derives from spec.seed (one child stream per component),
    so identical specs produce bit-identical datasets.
    """
    kids = np.random.SeedSequence(spec.seed).spawn(4)
    tx = np.random.default_rng(kids[0]).uniform(spec.x_lo, spec.x_hi, spec.n_train)
    ty = spec.slope * tx + spec.noise_sd * np.random.default_rng(kids[1]).standard_normal(spec.n_train)
    slope, intercept = fit_ols_1d(tx, ty)
    cx = np.random.default_rng(kids[2]).uniform(spec.x_lo, spec.x_hi, spec.n_calib)
    cy = spec.slope * cx + spec.noise_sd * np.random.default_rng(kids[3]).standard_normal(spec.n_calib)
    pred = slope * cx + intercept
    samples = tuple(
        RegressionSample(float(p), float(y), mae_score(float(p), float(y)))
        for p, y in zip(pred, cy)
    )
    return RegressionData(tuple(map(float, tx)), tuple(map(float, ty)), slope, intercept, samples)


class ClassificationModel:
    """Softmax-linear scorer with frozen random weights.

    The weight matrix depends only on logit_seed, so fresh draws from the
    same model (different data seeds) share one underlying predictor, the
    way new calibration sets share one pretrained black box.
    """

    def __init__(self, spec: SyntheticClassificationSpec):
        self.spec = spec
        self.weights = np.random.default_rng(
            np.random.SeedSequence(spec.logit_seed)
        ).standard_normal((spec.n_classes, spec.feature_dim))

    def sample(self, rng: np.random.Generator, n: int) -> ClassificationData:
        spec = self.spec
        x = rng.standard_normal((n, spec.feature_dim))
        logits = x @ self.weights.T / spec.temperature
        logp = logits - _logsumexp_rows(logits)
        # -log p can round to a hair below zero when one class dominates
        scores = np.maximum(-logp, 0.0)
        cum = np.cumsum(np.exp(logp), axis=1)
        cum[:, -1] = 1.0
        u = rng.uniform(size=n)
        labels = (cum < u[:, None]).sum(axis=1)
        items = tuple(
            (CandidateScores(tuple(float(v) for v in row)), int(lab))
            for row, lab in zip(scores, labels)
        )
        return ClassificationData(items)


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=1, keepdims=True))


def gen_synthetic_classification(spec: SyntheticClassificationSpec) -> ClassificationData:
    model = ClassificationModel(spec)
    return model.sample(np.random.default_rng(np.random.SeedSequence(spec.seed)), spec.n_calib)


# ---------------------------------------------------------------------------
# CSV formats
#
#   regression calibration:  id,score
#   regression test:         id,prediction[,label]
#   classification:          id,label,s0,...,s{K-1}   (label -1 = unlabeled)


def _fmt(x: float) -> str:
    return repr(float(x))


def _parse_float(field: str, line_no: int) -> float:
    try:
        v = float(field)
    except ValueError:
        raise ParseError(line_no, f"not a number: {field!r}") from None
    if not math.isfinite(v):
        raise NonFinite(value=v)
    return v


def save_scores_csv(path, task: str, data) -> None:
    """Write calibration scores; inverse of load_scores_csv."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        if task == "regression":
            w.writerow(["id", "score"])
            for i, v in enumerate(data.values):
                w.writerow([i, _fmt(v)])
        elif task == "classification":
            k = data.n_classes
            w.writerow(["id", "label"] + [f"s{j}" for j in range(k)])
            for i, (cand, label) in enumerate(data.items):
                w.writerow([i, label] + [_fmt(v) for v in cand.values])
        else:
            raise ValueError(f"unknown task {task!r}")


def load_scores_csv(path, task: str):
    """Load calibration scores saved by save_scores_csv.

    Returns CalibScores for regression, ClassificationData for classification.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaMismatch(f"{path}: empty file")
    header = rows[0]
    if task == "regression":
        if header != ["id", "score"]:
            raise SchemaMismatch(f"{path}: expected header id,score, got {header}")
        vals = []
        for line_no, row in enumerate(rows[1:], start=2):
            if len(row) != 2:
                raise SchemaMismatch(f"{path}:{line_no}: expected 2 columns, got {len(row)}")
            v = _parse_float(row[1], line_no)
            if v < 0:
                raise NegativeScore(line_no, v)
            vals.append(v)
        return validate_calib_scores(vals)
    if task == "classification":
        if len(header) < 4 or header[:2] != ["id", "label"]:
            raise SchemaMismatch(f"{path}: expected header id,label,s0,..., got {header}")
        k = len(header) - 2
        if header[2:] != [f"s{j}" for j in range(k)]:
            raise SchemaMismatch(f"{path}: malformed score columns {header[2:]}")
        items = []
        for line_no, row in enumerate(rows[1:], start=2):
            if len(row) != k + 2:
                raise SchemaMismatch(
                    f"{path}:{line_no}: expected {k + 2} columns, got {len(row)}"
                )
            try:
                label = int(row[1])
            except ValueError:
                raise ParseError(line_no, f"bad label {row[1]!r}") from None
            if label < -1 or label >= k:
                raise SchemaMismatch(f"{path}:{line_no}: label {label} outside -1..{k - 1}")
            vals = []
            for field in row[2:]:
                v = _parse_float(field, line_no)
                if v < 0:
                    raise NegativeScore(line_no, v)
                vals.append(v)
            items.append((CandidateScores(tuple(vals)), label))
        if not items:
            raise SchemaMismatch(f"{path}: no data rows")
        return ClassificationData(tuple(items))
    raise ValueError(f"unknown task {task!r}")


def save_regression_test_csv(path, samples: Sequence[RegressionSample]) -> None:
    labelled = any(s.label is not None for s in samples)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "prediction", "label"] if labelled else ["id", "prediction"])
        for i, s in enumerate(samples):
            row = [i, _fmt(s.prediction)]
            if labelled:
                row.append("" if s.label is None else _fmt(s.label))
            w.writerow(row)


def load_regression_test_csv(path) -> list[RegressionSample]:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaMismatch(f"{path}: empty file")
    header = rows[0]
    if header not in (["id", "prediction"], ["id", "prediction", "label"]):
        raise SchemaMismatch(f"{path}: unexpected header {header}")
    labelled = len(header) == 3
    out = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise SchemaMismatch(f"{path}:{line_no}: expected {len(header)} columns")
        pred = _parse_float(row[1], line_no)
        label = None
        if labelled and row[2] != "":
            label = _parse_float(row[2], line_no)
        score = None if label is None else mae_score(pred, label)
        out.append(RegressionSample(pred, label, score))
    return out
