"""E-value conformal sets and their exact and differentiable sizes.

Set membership uses a strict `<` test throughout. Unbounded sets are
represented by math.inf, never by a large finite number, so a diverging
interval cannot silently corrupt a size average.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import AlphaOutOfRange, AlphaTooSmall
from .scores import CalibScores, CandidateScores

UNBOUNDED = math.inf


@dataclass(frozen=True)
class Alpha:
    """A miscoverage level together with the open range it was mapped into."""

    value: float
    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 < self.lo < self.value < self.hi <= 1.0):
            raise AlphaOutOfRange(self.value)


def _alpha_value(alpha: Union[Alpha, float]) -> float:
    a = alpha.value if isinstance(alpha, Alpha) else float(alpha)
    if not 0.0 < a < 1.0:
        raise AlphaOutOfRange(a)
    return a


@dataclass(frozen=True)
class LabelSet:
    members: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.members)

    def __contains__(self, label: int) -> bool:
        return label in self.members


@dataclass(frozen=True)
class PredictionInterval:
    center: float
    radius: float  # may be UNBOUNDED

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.radius)

    @property
    def size(self) -> float:
        return 2.0 * self.radius

    @property
    def lo(self) -> float:
        return self.center - self.radius

    @property
    def hi(self) -> float:
        return self.center + self.radius


@dataclass(frozen=True)
class SmoothingConfig:
    """Sigmoid sharpness for the differentiable set-size surrogate."""

    k: float = 100.0

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"k must be > 0, got {self.k}")


def sigmoid(x):
    """Numerically stable logistic function, scalar or ndarray."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def classification_threshold(calib: CalibScores, alpha) -> float:
    """Score cutoff below which a label enters the conformal set.

    Membership `E_y < 1/alpha` rearranges to `s_y < sum/((n+1)alpha - 1)`
    when (n+1)alpha > 1; otherwise every label passes (E <= n+1 < 1/alpha)
    and the threshold is UNBOUNDED.
    """
    a = _alpha_value(alpha)
    denom = (calib.count + 1) * a - 1.0
    if denom <= 0.0:
        return UNBOUNDED
    return calib.sum / denom


def classification_set(calib: CalibScores, candidates: CandidateScores, alpha) -> LabelSet:
    """Labels whose candidate score falls strictly below the threshold."""
    thr = classification_threshold(calib, alpha)
    if thr is UNBOUNDED:
        return LabelSet(tuple(range(candidates.n_classes)))
    return LabelSet(tuple(y for y, s in enumerate(candidates.values) if s < thr))


def classification_size_smooth(
    calib: CalibScores,
    candidates: CandidateScores,
    alpha,
    cfg: SmoothingConfig = SmoothingConfig(),
) -> tuple[float, float]:
    """Sigmoid-smoothed set size and its derivative in alpha.

    size = sum_y sigma(k (1/alpha - E_y)), with E_y the per-label e-value
    ratio. Defined for any alpha in (0,1); a label sitting exactly at the
    threshold contributes sigma(0) = 1/2.
    """
    a = _alpha_value(alpha)
    s = np.asarray(candidates.values, dtype=float)
    e = s * (calib.count + 1) / (calib.sum + s)
    z = cfg.k * (1.0 / a - e)
    sig = sigmoid(z)
    size = float(sig.sum())
    dsize = float((sig * (1.0 - sig)).sum()) * cfg.k * (-1.0 / (a * a))
    return size, dsize


def regression_interval(calib: CalibScores, center: float, alpha) -> PredictionInterval:
    """Interval around the point prediction under the absolute-error score."""
    a = _alpha_value(alpha)
    denom = (calib.count + 1) * a - 1.0
    if denom <= 0.0:
        return PredictionInterval(center, UNBOUNDED)
    return PredictionInterval(center, calib.sum / denom)


def regression_size(calib: CalibScores, alpha) -> tuple[float, float]:
    """Exact interval length 2*sum/((n+1)alpha - 1) and its alpha-derivative.

    Requires alpha > 1/(n+1); below that the interval diverges.
    """
    a = _alpha_value(alpha)
    n1 = calib.count + 1
    denom = n1 * a - 1.0
    if denom <= 0.0:
        raise AlphaTooSmall(a, 1.0 / n1)
    size = 2.0 * calib.sum / denom
    dsize = -2.0 * calib.sum * n1 / (denom * denom)
    return size, dsize
