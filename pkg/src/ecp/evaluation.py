"""Monte Carlo validation of the coverage guarantees and size theory, the
constant-alpha oracle, and the fixed-alpha baselines.

Trials are seeded as pure functions of (master seed, trial index), so
results do not depend on execution order or worker count. The worker pool
size is capped by the ECP_THREADS environment variable.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .conformal import (
    LabelSet,
    PredictionInterval,
    classification_set,
    regression_interval,
)
from .errors import AlphaOutOfRange, AlphaTooSmall, EmptyGrid
from .evalue import markov_covered, soft_rank_evalue
from .policy import PolicyInput, PolicyParams, policy_forward
from .scores import (
    CalibScores,
    CandidateScores,
    ClassificationData,
    ClassificationModel,
    SyntheticClassificationSpec,
    SyntheticRegressionSpec,
    fit_ols_1d,
    validate_calib_scores,
)
from .trainer import _episode_arrays, _size_terms, build_loo_episodes, loo_mean_size

Policy = Union[PolicyParams, float]


def worker_count() -> int:
    raw = os.environ.get("ECP_THREADS", "")
    if raw.strip():
        return max(1, int(raw))
    return os.cpu_count() or 1


def _map_trials(fn, n: int) -> list:
    workers = min(worker_count(), n)
    if workers <= 1 or n < 64:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


def _trial_ss(seed: int, tag: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=(seed, tag, index))


# Seed-stream tags, one per trial family, so the families never collide.
_TAG_COVERAGE = 0
_TAG_CALIB_REP = 1
_TAG_MARGINAL = 2
_TAG_TESTS = 3


# ---------------------------------------------------------------------------
# Trial generators


class RegressionGenerator:
    """Fresh linear-model trials: refit the predictor on a fresh train split,
    score a fresh calibration set and test point against it."""

    task = "regression"

    def __init__(self, spec: SyntheticRegressionSpec = SyntheticRegressionSpec()):
        self.spec = spec

    def _draw(self, ss: np.random.SeedSequence, n: Optional[int]):
        spec = self.spec
        kids = ss.spawn(6)
        tx = np.random.default_rng(kids[0]).uniform(spec.x_lo, spec.x_hi, spec.n_train)
        ty = spec.slope * tx + spec.noise_sd * np.random.default_rng(kids[1]).standard_normal(spec.n_train)
        a, b = fit_ols_1d(tx, ty)
        m = n if n is not None else spec.n_calib
        cx = np.random.default_rng(kids[2]).uniform(spec.x_lo, spec.x_hi, m)
        cy = spec.slope * cx + spec.noise_sd * np.random.default_rng(kids[3]).standard_normal(m)
        calib = validate_calib_scores(np.abs(a * cx + b - cy))
        sx = np.random.default_rng(kids[4]).uniform(spec.x_lo, spec.x_hi)
        sy = spec.slope * sx + spec.noise_sd * np.random.default_rng(kids[5]).standard_normal()
        return calib, float(abs(a * sx + b - sy))

    def calib(self, ss: np.random.SeedSequence, n: Optional[int] = None) -> CalibScores:
        return self._draw(ss, n)[0]

    def trial(self, ss: np.random.SeedSequence, n: Optional[int] = None):
        return self._draw(ss, n)


class ClassificationGenerator:
    """Fresh calibration/test draws from one frozen softmax-linear scorer."""

    task = "classification"

    def __init__(self, spec: SyntheticClassificationSpec = SyntheticClassificationSpec()):
        self.spec = spec
        self.model = ClassificationModel(spec)

    def calib(self, ss: np.random.SeedSequence, n: Optional[int] = None) -> ClassificationData:
        kids = ss.spawn(2)
        m = n if n is not None else self.spec.n_calib
        return self.model.sample(np.random.default_rng(kids[0]), m)

    def trial(self, ss: np.random.SeedSequence, n: Optional[int] = None):
        kids = ss.spawn(2)
        m = n if n is not None else self.spec.n_calib
        calib = self.model.sample(np.random.default_rng(kids[0]), m)
        test = self.model.sample(np.random.default_rng(kids[1]), 1).items[0]
        return calib, test

    def tests(self, ss: np.random.SeedSequence, count: int):
        kids = ss.spawn(2)
        return self.model.sample(np.random.default_rng(kids[1]), count).items


def test_time_alpha(policy: Policy, calib: CalibScores, candidates: Optional[CandidateScores] = None) -> float:
    """Miscoverage for a test point: constant, or the policy applied to the
    full n-point calibration sum and the test statistic."""
    if isinstance(policy, PolicyParams):
        if candidates is None and policy.input_dim != 1:
            raise ValueError(
                "policy expects training-only inputs (loo-score); no test-time semantics"
            )
        alpha, _ = policy_forward(policy, PolicyInput(calib.sum, calib.count, candidates))
        return alpha.value
    a = float(policy)
    if not 0.0 < a < 1.0:
        raise AlphaOutOfRange(a)
    return a


# ---------------------------------------------------------------------------
# Coverage Monte Carlo


@dataclass(frozen=True)
class CoverageReport:
    trials: int
    miss_rate: float
    se_miss: float
    mean_ratio: float  # mean of 1{miss}/alpha, the post-hoc validity statistic
    se_ratio: float
    mean_alpha: float
    mean_size: float
    trial_rows: Optional[tuple] = None  # (trial, alpha, miss, size) when kept

    def to_json_dict(self) -> dict:
        return {
            "trials": self.trials,
            "miss_rate": self.miss_rate,
            "se_miss": self.se_miss,
            "mean_ratio": self.mean_ratio,
            "se_ratio": self.se_ratio,
            "mean_alpha": self.mean_alpha,
            "mean_size": self.mean_size,
        }


def write_trials_csv(report: CoverageReport, path) -> None:
    if report.trial_rows is None:
        raise ValueError("report was built without per-trial rows")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "alpha", "miss", "size"])
        for trial, alpha, miss, size in report.trial_rows:
            w.writerow([trial, repr(alpha), miss, "inf" if math.isinf(size) else repr(size)])


def _coverage_trial(generator, policy: Policy, seed: int, i: int):
    ss = _trial_ss(seed, _TAG_COVERAGE, i)
    if generator.task == "classification":
        calib_data, (candidates, label) = generator.trial(ss)
        calib = calib_data.true_scores()
        alpha = test_time_alpha(policy, calib, candidates)
        pred = classification_set(calib, candidates, alpha)
        miss = label not in pred
        size = float(pred.size)
    else:
        calib, test_score = generator.trial(ss)
        alpha = test_time_alpha(policy, calib)
        miss = not markov_covered(soft_rank_evalue(calib, test_score), alpha)
        size = regression_interval(calib, 0.0, alpha).size
    return alpha, miss, size


def _coverage_mc(generator, policy: Policy, trials: int, seed: int, keep_trials: bool) -> CoverageReport:
    rows = _map_trials(lambda i: _coverage_trial(generator, policy, seed, i), trials)
    alphas = np.array([r[0] for r in rows])
    misses = np.array([r[1] for r in rows], dtype=float)
    sizes = np.array([r[2] for r in rows])
    ratios = misses / alphas
    p = float(misses.mean())
    report = CoverageReport(
        trials=trials,
        miss_rate=p,
        se_miss=math.sqrt(p * (1.0 - p) / trials),
        mean_ratio=float(ratios.mean()),
        se_ratio=float(ratios.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0,
        mean_alpha=float(alphas.mean()),
        mean_size=float(sizes.mean()),
        trial_rows=tuple(
            (i, float(a), int(m), float(s))
            for i, (a, m, s) in enumerate(zip(alphas, misses, sizes))
        )
        if keep_trials
        else None,
    )
    return report


def mc_fixed_alpha_coverage(
    generator, alpha: float, trials: int, seed: int, keep_trials: bool = False
) -> CoverageReport:
    """Fresh calibration + test per trial, conformal set at a fixed alpha.

    Markov thresholding makes miss_rate <= alpha (up to MC error), usually
    with room to spare.
    """
    if not 0.0 < alpha < 1.0:
        raise AlphaOutOfRange(alpha)
    return _coverage_mc(generator, alpha, trials, seed, keep_trials)


def mc_posthoc_validity(
    generator, policy: Policy, trials: int, seed: int, keep_trials: bool = False
) -> CoverageReport:
    """Post-hoc guarantee check: mean of 1{miss}/alpha_tilde should be <= 1.

    The conditional miss probability is not observable per trial, so the
    bound is tested in its tower-property form.
    """
    return _coverage_mc(generator, policy, trials, seed, keep_trials)


# ---------------------------------------------------------------------------
# Size consistency (leave-one-out estimator vs test-time size)


@dataclass(frozen=True)
class SizeConsistencyReport:
    n: int
    regime: str  # "fresh" (marginal over calibration draws) or "fixed"
    loo_mean_size: tuple[float, ...]  # per rep
    mc_test_size: tuple[float, ...]  # per rep
    abs_gap: tuple[float, ...]
    rel_gap: tuple[float, ...]
    mean_score: tuple[float, ...]
    median_abs_gap: float

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "regime": self.regime,
            "loo_mean_size": list(self.loo_mean_size),
            "mc_test_size": list(self.mc_test_size),
            "abs_gap": list(self.abs_gap),
            "rel_gap": list(self.rel_gap),
            "mean_score": list(self.mean_score),
            "median_abs_gap": self.median_abs_gap,
        }


def _test_size(generator, policy: Policy, calib_data, test_item) -> float:
    if generator.task == "classification":
        calib = calib_data.true_scores()
        candidates, _ = test_item
        alpha = test_time_alpha(policy, calib, candidates)
        return float(classification_set(calib, candidates, alpha).size)
    calib = calib_data
    alpha = test_time_alpha(policy, calib)
    return regression_interval(calib, 0.0, alpha).size


def _marginal_test_size(generator, policy: Policy, n: int, trials: int, seed: int) -> float:
    def one(t: int) -> float:
        calib_data, test = generator.trial(_trial_ss(seed, _TAG_MARGINAL, t), n)
        return _test_size(generator, policy, calib_data, test)

    return math.fsum(_map_trials(one, trials)) / trials


def _fixed_calib_test_size(generator, policy: Policy, calib_data, trials: int, ss) -> float:
    if generator.task == "regression":
        # the interval length does not depend on the test feature
        return _test_size(generator, policy, calib_data, None)
    tests = generator.tests(ss, trials)
    sizes = [_test_size(generator, policy, calib_data, item) for item in tests]
    return math.fsum(sizes) / len(sizes)


def size_consistency_check(
    generator,
    policy: Policy,
    n_values: Sequence[int],
    reps: int,
    trials: int,
    seed: int,
    regime: str = "fresh",
) -> list[SizeConsistencyReport]:
    """Leave-one-out mean size against the test-time expected size.

    regime="fresh" compares each rep's estimator with the marginal
    expectation over fresh calibration draws (the quantity the estimator is
    consistent for, estimated once per n with `trials` draws). regime
    ="fixed" holds each rep's calibration set fixed and averages test
    conformal sets built on it, mirroring a single-calibration experiment.
    """
    if regime not in ("fresh", "fixed"):
        raise ValueError(f"unknown regime {regime!r}")
    reports = []
    for n in n_values:
        marginal = None
        if regime == "fresh":
            marginal = _marginal_test_size(generator, policy, n, trials, seed)
        loo_vals, mc_vals, scores_means = [], [], []
        for r in range(reps):
            ss = _trial_ss(seed, _TAG_CALIB_REP, r)
            calib_data = generator.calib(ss, n)
            calib = calib_data.true_scores() if generator.task == "classification" else calib_data
            loo_vals.append(loo_mean_size(policy, calib_data))
            if regime == "fresh":
                mc_vals.append(marginal)
            else:
                mc_vals.append(
                    _fixed_calib_test_size(
                        generator, policy, calib_data, trials, _trial_ss(seed, _TAG_TESTS, r)
                    )
                )
            scores_means.append(calib.sum / calib.count)
        abs_gap = tuple(abs(a - b) for a, b in zip(loo_vals, mc_vals))
        rel_gap = tuple(g / abs(b) for g, b in zip(abs_gap, mc_vals))
        reports.append(
            SizeConsistencyReport(
                n=n,
                regime=regime,
                loo_mean_size=tuple(loo_vals),
                mc_test_size=tuple(mc_vals),
                abs_gap=abs_gap,
                rel_gap=rel_gap,
                mean_score=tuple(scores_means),
                median_abs_gap=float(np.median(abs_gap)),
            )
        )
    return reports


# ---------------------------------------------------------------------------
# Constant-alpha oracle and monotonicity


@dataclass(frozen=True)
class MonotonicityReport:
    lambdas: tuple[float, ...]
    alpha_stars: tuple[float, ...]
    sizes: tuple[float, ...]
    is_monotone: bool

    def to_json_dict(self) -> dict:
        return {
            "lambdas": list(self.lambdas),
            "alpha_stars": list(self.alpha_stars),
            "sizes": list(self.sizes),
            "is_monotone": self.is_monotone,
        }


def _loo_size_curve(data, resolution: float, alpha_min: Optional[float], alpha_max: Optional[float]):
    """Mean leave-one-out exact size on a uniform alpha grid."""
    episodes = build_loo_episodes(data)
    _, loo_sums, cand = _episode_arrays(episodes, "definition2")
    n1 = episodes[0].loo_count + 1
    if alpha_min is None:
        # regression sizes diverge at 1/n, so the grid starts just above
        alpha_min = (1.0 / n1 if cand is None else 0.0) + resolution
    if alpha_max is None:
        alpha_max = 1.0 - resolution
    m = int(math.floor((alpha_max - alpha_min) / resolution + 1e-12)) + 1
    if m <= 0 or alpha_min >= 1.0:
        raise EmptyGrid(f"no grid points in [{alpha_min}, {alpha_max}]")
    grid = alpha_min + resolution * np.arange(m)
    if cand is None:
        if grid[0] * n1 <= 1.0:
            raise AlphaTooSmall(float(grid[0]), 1.0 / n1)
        sizes = 2.0 * loo_sums.mean() / (n1 * grid - 1.0)
    else:
        evals = np.sort((cand * n1 / (loo_sums[:, None] + cand)).ravel())
        with np.errstate(divide="ignore"):
            counts = np.searchsorted(evals, 1.0 / grid, side="left")
        sizes = counts / len(episodes)
    return grid, sizes


def constant_alpha_oracle(
    data,
    lam: float,
    resolution: float = 1e-4,
    alpha_min: Optional[float] = None,
    alpha_max: Optional[float] = None,
) -> tuple[float, float]:
    """Grid argmin of mean leave-one-out size + lam * alpha.

    Ties break toward smaller alpha (the larger, more conservative set).
    """
    grid, sizes = _loo_size_curve(data, resolution, alpha_min, alpha_max)
    i = int(np.argmin(sizes + lam * grid))  # argmin takes the first, i.e. smallest alpha
    return float(grid[i]), float(sizes[i])


def monotonicity_check(
    data, lambdas: Sequence[float], resolution: float = 1e-4
) -> MonotonicityReport:
    """Oracle sizes along an increasing lambda grid must be non-decreasing."""
    lams = [float(v) for v in lambdas]
    if any(b <= a for a, b in zip(lams, lams[1:])):
        raise ValueError("lambda grid must be strictly increasing")
    grid, sizes = _loo_size_curve(data, resolution, None, None)
    stars, star_sizes = [], []
    for lam in lams:
        i = int(np.argmin(sizes + lam * grid))
        stars.append(float(grid[i]))
        star_sizes.append(float(sizes[i]))
    monotone = all(b >= a for a, b in zip(star_sizes, star_sizes[1:]))
    return MonotonicityReport(tuple(lams), tuple(stars), tuple(star_sizes), monotone)


# ---------------------------------------------------------------------------
# Fixed-alpha baselines


def baseline_e_fixed(calib: CalibScores, test_inputs, alpha: float):
    """E-value conformal sets at a constant alpha (the e-fixed baseline).

    test_inputs: CandidateScores per test point (classification) or interval
    centers (regression). Returns (outputs, mean size).
    """
    if not 0.0 < alpha < 1.0:
        raise AlphaOutOfRange(alpha)
    outputs = []
    for item in test_inputs:
        if isinstance(item, CandidateScores):
            outputs.append(classification_set(calib, item, alpha))
        else:
            outputs.append(regression_interval(calib, float(item), alpha))
    mean_size = math.fsum(o.size for o in outputs) / len(outputs)
    return outputs, mean_size


def baseline_p_fixed(calib: CalibScores, test_inputs, alpha: float):
    """Standard split-conformal baseline at a constant alpha.

    The cutoff is the ceil((1-alpha)(n+1))-th smallest calibration score
    (infinite when the rank exceeds n); membership uses the conventional
    non-strict comparison.
    """
    if not 0.0 < alpha < 1.0:
        raise AlphaOutOfRange(alpha)
    rank = math.ceil((1.0 - alpha) * (calib.count + 1))
    q = math.inf if rank > calib.count else sorted(calib.values)[rank - 1]
    outputs = []
    for item in test_inputs:
        if isinstance(item, CandidateScores):
            outputs.append(LabelSet(tuple(y for y, s in enumerate(item.values) if s <= q)))
        else:
            outputs.append(PredictionInterval(float(item), q))
    mean_size = math.fsum(o.size for o in outputs) / len(outputs)
    return outputs, mean_size
