"""Two-stage search for the regularization strength hitting a target mean
set size: double/halve until the target is bracketed, then bisect.

The mean leave-one-out size is non-decreasing in lambda (for exact
constant-alpha minimizers this is a theorem; empirically it extends to
trained policies), which is what makes the bracket sound.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import NoBracket
from .trainer import TrainConfig, train_policy


@dataclass(frozen=True)
class LambdaSearchConfig:
    target_size: float
    tolerance: float = 0.1
    init_lambda: float = 10.0
    max_expansions: int = 60
    max_bisections: int = 60

    def __post_init__(self):
        if self.target_size <= 0 or self.tolerance <= 0 or self.init_lambda <= 0:
            raise ValueError("target_size, tolerance, init_lambda must be positive")


@dataclass(frozen=True)
class SearchStep:
    iteration: int
    phase: str  # "expand" | "bisect"
    lam: float
    size: float


@dataclass(frozen=True)
class SearchTrace:
    steps: tuple[SearchStep, ...]
    final_lambda: float
    converged: bool

    def to_json_dict(self) -> dict:
        return {
            "steps": [
                {"iteration": s.iteration, "phase": s.phase, "lambda": s.lam, "size": s.size}
                for s in self.steps
            ],
            "final_lambda": self.final_lambda,
            "converged": self.converged,
        }


def select_lambda(
    evaluate: Callable[[float], float],
    cfg: LambdaSearchConfig,
) -> tuple[float, SearchTrace]:
    """Find lambda whose measured mean size is within tolerance of the target.

    `evaluate` maps lambda to a leave-one-out mean size (in production it
    retrains from scratch; any callable works for testing). Expansion
    doubles lambda while the size is below target and halves while above,
    until the sign of (size - target) flips; ties count as crossed. The
    resulting bracket [lam_low, lam_high] has size(lam_low) < M <=
    size(lam_high) and is then bisected until |size - M| <= tolerance.

    Raises NoBracket when the expansion budget runs out (target
    unreachable). When the bisection budget runs out, returns the
    best-seen lambda flagged converged=False.
    """
    M, eps = cfg.target_size, cfg.tolerance
    steps: list[SearchStep] = []
    it = 0

    lam = cfg.init_lambda
    size = evaluate(lam)
    steps.append(SearchStep(it, "expand", lam, size))
    if abs(size - M) <= eps:
        return lam, SearchTrace(tuple(steps), lam, True)

    going_up = size < M
    prev_lam, prev_size = lam, size
    bracket = None
    for _ in range(cfg.max_expansions):
        it += 1
        lam = prev_lam * 2.0 if going_up else prev_lam / 2.0
        size = evaluate(lam)
        steps.append(SearchStep(it, "expand", lam, size))
        if going_up and size >= M:
            bracket = (prev_lam, lam)
            break
        if not going_up and size <= M:
            bracket = (lam, prev_lam)
            break
        prev_lam, prev_size = lam, size
    if bracket is None:
        raise NoBracket(
            f"no lambda bracketing target size {M} within {cfg.max_expansions} expansions"
        )

    lam_low, lam_high = bracket
    best = min(steps, key=lambda s: abs(s.size - M))
    for _ in range(cfg.max_bisections):
        it += 1
        lam = (lam_low + lam_high) / 2.0
        size = evaluate(lam)
        step = SearchStep(it, "bisect", lam, size)
        steps.append(step)
        if abs(size - M) <= eps:
            return lam, SearchTrace(tuple(steps), lam, True)
        if abs(size - M) < abs(best.size - M):
            best = step
        if size < M:
            lam_low = lam
        else:
            lam_high = lam
    return best.lam, SearchTrace(tuple(steps), best.lam, False)


def training_evaluator(
    data,
    template: TrainConfig,
    master_seed: int,
    policies: Optional[dict] = None,
) -> Callable[[float], float]:
    """Production evaluator: retrain from scratch at each lambda.

    The i-th call trains with a seed derived from (master_seed, i), so the
    whole search is reproducible while each evaluation stays independent.
    Pass a dict as `policies` to collect the trained parameters per call,
    keyed by (call index, lambda).
    """
    counter = {"i": 0}

    def evaluate(lam: float) -> float:
        i = counter["i"]
        counter["i"] += 1
        seed = derived_seed(master_seed, i)
        cfg = TrainConfig(
            lam=lam,
            k=template.k,
            lr=template.lr,
            batch_size=template.batch_size,
            epochs=template.epochs,
            seed=seed,
            hidden_dim=template.hidden_dim,
            policy_input=template.policy_input,
            init_output_near_one=template.init_output_near_one,
        )
        params, report = train_policy(data, cfg)
        if policies is not None:
            policies[(i, lam)] = (params, report)
        return report.final_loo_mean_size

    return evaluate


def derived_seed(master: int, index: int) -> int:
    """Deterministic per-iteration seed; independent of call ordering."""
    return int(np.random.SeedSequence(entropy=(master, index)).generate_state(1)[0])
