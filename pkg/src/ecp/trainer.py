"""Leave-one-out episode construction and the policy training loop.

Each calibration point in turn plays pseudo test point against the other
n-1, giving n labelled episodes. Training minimizes the mean surrogate set
size plus lambda times the predicted miscoverage, with Adam on shuffled
minibatches. Exact sizes are what gets logged; the surrogate appears only
in the gradient path.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import AlphaTooSmall, NonFiniteLoss, TooFew
from .policy import (
    AdamState,
    PolicyInput,
    PolicyParams,
    _forward_features,
    adam_step,
    backward_batch,
    forward_batch,
    init_policy,
    policy_backward,
    policy_forward,
)
from .conformal import (
    SmoothingConfig,
    classification_set,
    classification_size_smooth,
    regression_size,
    sigmoid,
)
from .scores import CalibScores, CandidateScores, ClassificationData, RegressionData

DEFAULTS = {
    "classification": {"batch_size": 64, "epochs": 2000},
    "regression": {"batch_size": 32, "epochs": 200},
}

POLICY_INPUT_MODES = ("definition2", "loo-score")


@dataclass(frozen=True)
class TrainConfig:
    lam: float
    k: float = 100.0
    lr: float = 1e-3
    batch_size: Optional[int] = None  # task default when None
    epochs: Optional[int] = None
    seed: int = 0
    hidden_dim: int = 32
    policy_input: str = "definition2"
    init_output_near_one: Optional[bool] = None  # default: True for regression

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.k <= 0 or self.lr <= 0 or self.hidden_dim < 1:
            raise ValueError("k, lr, hidden_dim must be positive")
        if self.policy_input not in POLICY_INPUT_MODES:
            raise ValueError(f"policy_input must be one of {POLICY_INPUT_MODES}")


@dataclass(frozen=True)
class Episode:
    """One leave-one-out pseudo episode: point `index` held out as test."""

    index: int
    loo_sum: float
    loo_count: int
    held_out_score: float
    candidates: Optional[CandidateScores] = None
    label: Optional[int] = None


@dataclass(frozen=True)
class TrainReport:
    """Per-epoch curves plus the final leave-one-out mean exact size."""

    losses: tuple[float, ...]
    mean_sizes: tuple[float, ...]  # exact sizes
    mean_alphas: tuple[float, ...]
    mean_smooth_sizes: tuple[float, ...]  # surrogate actually minimized
    final_loo_mean_size: float
    config: dict
    wall_time_s: float = 0.0  # informational; excluded from serialized artifacts

    def to_json_dict(self) -> dict:
        # wall time varies between identical runs and would break
        # bit-identical artifacts, so it stays out of the JSON
        return {
            "losses": list(self.losses),
            "mean_sizes": list(self.mean_sizes),
            "mean_alphas": list(self.mean_alphas),
            "mean_smooth_sizes": list(self.mean_smooth_sizes),
            "final_loo_mean_size": self.final_loo_mean_size,
            "config": self.config,
        }


def write_curves_csv(report: TrainReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "mean_size", "mean_alpha"])
        rows = zip(report.losses, report.mean_sizes, report.mean_alphas)
        for epoch, (loss, size, alpha) in enumerate(rows):
            w.writerow([epoch, repr(loss), repr(size), repr(alpha)])


CalibData = Union[CalibScores, RegressionData, ClassificationData]


def _as_task_data(data: CalibData):
    """Normalize the accepted data types to (task, scores, candidate items)."""
    if isinstance(data, ClassificationData):
        return "classification", data.true_scores(), data.items
    if isinstance(data, RegressionData):
        return "regression", data.calib_scores(), None
    if isinstance(data, CalibScores):
        return "regression", data, None
    raise TypeError(f"unsupported calibration data type {type(data).__name__}")


def build_loo_episodes(data: CalibData) -> list[Episode]:
    """One episode per calibration point; episode j excludes point j's score."""
    task, scores, items = _as_task_data(data)
    if scores.count < 3:
        raise TooFew(scores.count, minimum=3)
    episodes = []
    for j, s in enumerate(scores.values):
        cand, label = (items[j][0], items[j][1]) if items is not None else (None, None)
        episodes.append(Episode(j, scores.sum - s, scores.count - 1, s, cand, label))
    return episodes


def episode_features(ep: Episode, policy_input: str = "definition2") -> list[float]:
    """Raw (unstandardized) policy inputs for one episode.

    definition2: mean of the remaining scores, plus the pseudo test point's
    per-class scores when present. loo-score: the held-out score and the raw
    remaining sum (regression only; not meaningful at test time, where the
    held-out score is unobservable).
    """
    if policy_input == "definition2":
        feats = [ep.loo_sum / ep.loo_count]
        if ep.candidates is not None:
            feats.extend(ep.candidates.values)
        return feats
    if policy_input == "loo-score":
        if ep.candidates is not None:
            raise ValueError("loo-score inputs are defined for regression only")
        return [ep.held_out_score, ep.loo_sum]
    raise ValueError(f"unknown policy_input {policy_input!r}")


def _episode_arrays(episodes: list[Episode], policy_input: str):
    X_raw = np.asarray([episode_features(ep, policy_input) for ep in episodes])
    loo_sums = np.asarray([ep.loo_sum for ep in episodes])
    cand = None
    if episodes[0].candidates is not None:
        cand = np.asarray([ep.candidates.values for ep in episodes])
    return X_raw, loo_sums, cand


def _size_terms(task, alphas, loo_sums, cand, loo_n1, k):
    """Surrogate size, its alpha-derivative, and the exact size, per episode.

    loo_n1 is the conformal divisor (episode calibration count + 1).
    """
    if task == "regression":
        denom = loo_n1 * alphas - 1.0
        if np.any(denom <= 0.0):
            raise AlphaTooSmall(float(alphas.min()), 1.0 / loo_n1)
        size = 2.0 * loo_sums / denom
        dsize = -2.0 * loo_sums * loo_n1 / (denom * denom)
        return size, dsize, size
    e = cand * loo_n1 / (loo_sums[:, None] + cand)
    z = k * (1.0 / alphas[:, None] - e)
    sig = sigmoid(z)
    smooth = sig.sum(axis=1)
    dsize = (sig * (1.0 - sig)).sum(axis=1) * k * (-1.0 / (alphas * alphas))
    with np.errstate(divide="ignore"):
        thr = np.where(loo_n1 * alphas > 1.0, loo_sums / (loo_n1 * alphas - 1.0), np.inf)
    exact = (cand < thr[:, None]).sum(axis=1).astype(float)
    return smooth, dsize, exact


def episode_loss_with_grad(params: PolicyParams, ep: Episode, cfg: TrainConfig):
    """Loss, exact size, alpha, and full parameter gradient for one episode.

    loss = surrogate size + lambda * alpha, where the surrogate is the
    sigmoid-smoothed count (classification) or the exact interval length
    (regression, already differentiable).
    """
    task = "regression" if ep.candidates is None else "classification"
    inp = PolicyInput(ep.loo_sum, ep.loo_count, ep.candidates)
    if cfg.policy_input == "loo-score":
        x = (np.asarray(episode_features(ep, "loo-score")) - params.norm_mean) / params.norm_sd
        alpha, cache = _forward_features(params, x)
    else:
        alpha, cache = policy_forward(params, inp)
    loo = CalibScores((), ep.loo_sum, ep.loo_count)  # values unused downstream
    if task == "regression":
        size, dsize = regression_size(loo, alpha)
        exact = size
    else:
        size, dsize = classification_size_smooth(loo, ep.candidates, alpha, SmoothingConfig(cfg.k))
        exact = float(classification_set(loo, ep.candidates, alpha).size)
    loss = size + cfg.lam * alpha.value
    grads = policy_backward(params, cache, dsize + cfg.lam)
    return loss, exact, alpha.value, grads


def train_policy(data: CalibData, cfg: TrainConfig) -> tuple[PolicyParams, TrainReport]:
    """Run the leave-one-out training loop; deterministic given (data, cfg)."""
    t0 = time.perf_counter()
    task, scores, _ = _as_task_data(data)
    episodes = build_loo_episodes(data)
    n = len(episodes)
    batch_size = cfg.batch_size or DEFAULTS[task]["batch_size"]
    epochs = cfg.epochs if cfg.epochs is not None else DEFAULTS[task]["epochs"]
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch size {batch_size} not in 1..{n}")
    near_one = cfg.init_output_near_one
    if near_one is None:
        near_one = task == "regression"

    X_raw, loo_sums, cand = _episode_arrays(episodes, cfg.policy_input)
    mean = X_raw.mean(axis=0)
    sd = np.maximum(X_raw.std(axis=0), 1e-8)  # keep sd > 0 on degenerate features
    init_seed, shuffle_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    params = init_policy(
        task,
        input_dim=X_raw.shape[1],
        hidden_dim=cfg.hidden_dim,
        n_calib=n,
        seed=init_seed,
        init_output_near_one=near_one,
    )
    params.norm_mean = mean
    params.norm_sd = sd
    X = (X_raw - mean) / sd
    loo_n1 = episodes[0].loo_count + 1  # == n

    adam = AdamState.for_params(params, lr=cfg.lr)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    losses, mean_sizes, mean_alphas, mean_smooth = [], [], [], []
    ep_loss = np.empty(n)
    ep_exact = np.empty(n)
    ep_alpha = np.empty(n)
    ep_smooth = np.empty(n)
    for epoch in range(epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            alphas, cache = forward_batch(params, X[idx])
            c_idx = cand[idx] if cand is not None else None
            smooth, dsize, exact = _size_terms(task, alphas, loo_sums[idx], c_idx, loo_n1, cfg.k)
            batch_losses = smooth + cfg.lam * alphas
            if not np.all(np.isfinite(batch_losses)):
                raise NonFiniteLoss(epoch, f"alphas={alphas!r}")
            grads = backward_batch(params, cache, (dsize + cfg.lam) / idx.size)
            adam_step(params, grads, adam)
            ep_loss[idx] = batch_losses
            ep_exact[idx] = exact
            ep_alpha[idx] = alphas
            ep_smooth[idx] = smooth
        losses.append(float(ep_loss.mean()))
        mean_sizes.append(float(ep_exact.mean()))
        mean_alphas.append(float(ep_alpha.mean()))
        mean_smooth.append(float(ep_smooth.mean()))

    final_size = loo_mean_size(params, data, k=cfg.k, policy_input=cfg.policy_input)
    report = TrainReport(
        losses=tuple(losses),
        mean_sizes=tuple(mean_sizes),
        mean_alphas=tuple(mean_alphas),
        mean_smooth_sizes=tuple(mean_smooth),
        final_loo_mean_size=final_size,
        config={
            "task": task,
            "n_calib": n,
            "lambda": cfg.lam,
            "k": cfg.k,
            "lr": cfg.lr,
            "batch_size": batch_size,
            "epochs": epochs,
            "seed": cfg.seed,
            "hidden_dim": cfg.hidden_dim,
            "policy_input": cfg.policy_input,
            "init_output_near_one": near_one,
        },
        wall_time_s=time.perf_counter() - t0,
    )
    return params, report


def loo_alphas(
    policy: Union[PolicyParams, float],
    data: CalibData,
    policy_input: str = "definition2",
) -> np.ndarray:
    """Per-episode miscoverage levels under a trained or constant policy."""
    episodes = build_loo_episodes(data)
    if isinstance(policy, PolicyParams):
        X_raw, _, _ = _episode_arrays(episodes, policy_input)
        X = (X_raw - policy.norm_mean) / policy.norm_sd
        alphas, _ = forward_batch(policy, X)
        return alphas
    return np.full(len(episodes), float(policy))


def loo_mean_size(
    policy: Union[PolicyParams, float],
    data: CalibData,
    exact: bool = True,
    k: float = 100.0,
    policy_input: str = "definition2",
) -> float:
    """Mean leave-one-out prediction-set size across all n episodes.

    This is the training-side estimator of the expected test-time size; the
    policy's alpha range keeps every episode's set bounded.
    """
    task, _, _ = _as_task_data(data)
    episodes = build_loo_episodes(data)
    _, loo_sums, cand = _episode_arrays(episodes, policy_input)
    alphas = loo_alphas(policy, data, policy_input)
    loo_n1 = episodes[0].loo_count + 1
    smooth, _, exact_sizes = _size_terms(task, alphas, loo_sums, cand, loo_n1, k)
    sizes = exact_sizes if exact else smooth
    return math.fsum(sizes) / len(sizes)
