"""Soft-rank e-values and Markov thresholding."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import AllZeroScores, AlphaOutOfRange, NegativeScore
from .scores import CalibScores


@dataclass(frozen=True)
class EValue:
    """Realized e-value; bounded by count+1 for nonnegative scores."""

    value: float


def soft_rank_evalue(calib: CalibScores, test_score: float) -> EValue:
    """Test score divided by the average of all n+1 scores.

    The all-zero case (calibration sum and test score both zero) carries no
    information and is rejected rather than defined as 0/0.
    """
    if test_score < 0:
        raise NegativeScore(None, test_score)
    denom = calib.sum + test_score
    if denom == 0.0:
        raise AllZeroScores("calibration sum and test score are all zero")
    return EValue(test_score * (calib.count + 1) / denom)


def markov_covered(e, alpha: float) -> bool:
    """True iff the e-value falls strictly below 1/alpha."""
    if not 0.0 < alpha < 1.0:
        raise AlphaOutOfRange(alpha)
    v = e.value if isinstance(e, EValue) else float(e)
    return v < 1.0 / alpha
