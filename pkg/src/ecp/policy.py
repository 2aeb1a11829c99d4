"""The coverage-policy network: a 1-hidden-layer ReLU MLP whose sigmoid
output is affinely mapped into an admissible miscoverage range.

The range map (rather than a raw sigmoid plus clamp) keeps the output
differentiable everywhere and makes inadmissible alphas impossible by
construction: in regression alpha_lo sits above 1/n, so interval sizes are
finite for both the n-1-point training sets and the n-point test set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .conformal import Alpha, sigmoid
from .errors import (
    BadDims,
    CorruptFile,
    DimMismatch,
    SchemaVersionMismatch,
    ShapeMismatch,
    StaleCache,
)
from .scores import CandidateScores

CHECKPOINT_SCHEMA_VERSION = 1

ALPHA_LO_CLASSIFICATION = 1e-4
ALPHA_HI = 1.0 - 1e-6


@dataclass
class PolicyParams:
    """Network weights plus the frozen alpha range and input normalizer.

    Arrays are mutated in place by the optimizer; `version` is bumped on
    every update so stale forward caches can be detected.
    """

    W1: np.ndarray  # (hidden_dim, input_dim)
    b1: np.ndarray  # (hidden_dim,)
    w2: np.ndarray  # (hidden_dim,)
    b2: float
    alpha_lo: float
    alpha_hi: float
    norm_mean: np.ndarray  # (input_dim,)
    norm_sd: np.ndarray  # (input_dim,)
    version: int = 0

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.W1.copy(), self.b1.copy(), self.w2.copy(), float(self.b2),
            self.alpha_lo, self.alpha_hi, self.norm_mean.copy(), self.norm_sd.copy(),
        )


@dataclass(frozen=True)
class PolicyInput:
    """Policy inputs: calibration sum/count plus the per-class test scores
    (classification) or nothing else (regression)."""

    calib_sum: float
    calib_count: int
    test_stat: Optional[CandidateScores] = None


@dataclass(frozen=True)
class ForwardCache:
    x: np.ndarray
    z1: np.ndarray
    u: float
    version: int


def alpha_range(task: str, n_calib: int) -> tuple[float, float]:
    """Admissible open alpha range for the task.

    Regression needs alpha > 1/n so that leave-one-out interval sizes
    (built from n-1 points) stay finite.
    """
    if task == "regression":
        return 1.0 / n_calib + 1e-4, ALPHA_HI
    if task == "classification":
        return ALPHA_LO_CLASSIFICATION, ALPHA_HI
    raise ValueError(f"unknown task {task!r}")


def init_policy(
    task: str,
    input_dim: int,
    hidden_dim: int = 32,
    n_calib: int = 2,
    seed: int = 0,
    init_output_near_one: bool = False,
) -> PolicyParams:
    """Uniform fan-in initialization; identity normalizer until one is frozen in.

    With init_output_near_one the output bias is set so sigma(b2) >= 0.99,
    starting the policy near the top of its alpha range.
    """
    if input_dim < 1 or hidden_dim < 1 or n_calib < 2:
        raise BadDims(f"input_dim={input_dim}, hidden_dim={hidden_dim}, n_calib={n_calib}")
    lo, hi = alpha_range(task, n_calib)
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    rng = np.random.default_rng(seed)
    lim1 = 1.0 / math.sqrt(input_dim)
    lim2 = 1.0 / math.sqrt(hidden_dim)
    return PolicyParams(
        W1=rng.uniform(-lim1, lim1, size=(hidden_dim, input_dim)),
        b1=np.zeros(hidden_dim),
        w2=rng.uniform(-lim2, lim2, size=hidden_dim),
        b2=5.0 if init_output_near_one else 0.0,  # sigma(5) ~ 0.9933
        alpha_lo=lo,
        alpha_hi=hi,
        norm_mean=np.zeros(input_dim),
        norm_sd=np.ones(input_dim),
    )


def featurize(inp: PolicyInput, norm_mean: np.ndarray, norm_sd: np.ndarray) -> np.ndarray:
    """[mean calibration score] ++ candidate scores, standardized.

    Dividing the sum by its count puts n-1-point training inputs and
    n-point test inputs on a common scale.
    """
    feats = [inp.calib_sum / inp.calib_count]
    if inp.test_stat is not None:
        feats.extend(inp.test_stat.values)
    x = np.asarray(feats, dtype=float)
    if x.shape != np.shape(norm_mean):
        raise DimMismatch(f"got {x.size} features, normalizer expects {np.size(norm_mean)}")
    return (x - norm_mean) / norm_sd


def policy_forward(params: PolicyParams, inp: PolicyInput) -> tuple[Alpha, ForwardCache]:
    """Map policy inputs to a miscoverage level strictly inside (lo, hi)."""
    x = featurize(inp, params.norm_mean, params.norm_sd)
    alpha, cache = _forward_features(params, x)
    return alpha, cache


def _forward_features(params: PolicyParams, x: np.ndarray) -> tuple[Alpha, ForwardCache]:
    if x.size != params.input_dim:
        raise DimMismatch(f"feature dim {x.size}, expected {params.input_dim}")
    z1 = params.W1 @ x + params.b1
    h = np.maximum(z1, 0.0)
    u = float(params.w2 @ h + params.b2)
    a = float(_range_map(u, params.alpha_lo, params.alpha_hi))
    return Alpha(a, params.alpha_lo, params.alpha_hi), ForwardCache(x, z1, u, params.version)


def _range_map(u, lo: float, hi: float):
    # a saturated sigmoid can round onto an endpoint; keep the output
    # strictly interior (one ulp suffices, and the gradient there is ~0)
    a = lo + (hi - lo) * sigmoid(u)
    return np.clip(a, np.nextafter(lo, hi), np.nextafter(hi, lo))


def policy_backward(params: PolicyParams, cache: ForwardCache, dloss_dalpha: float) -> dict:
    """Chain dloss/dalpha back to every trainable parameter.

    The normalizer and alpha range are constants and get no gradient.
    """
    if cache.version != params.version:
        raise StaleCache("parameters were updated after this forward pass")
    s = sigmoid(cache.u)
    du = dloss_dalpha * (params.alpha_hi - params.alpha_lo) * s * (1.0 - s)
    h = np.maximum(cache.z1, 0.0)
    dh = du * params.w2
    dz1 = dh * (cache.z1 > 0.0)
    return {
        "W1": np.outer(dz1, cache.x),
        "b1": dz1,
        "w2": du * h,
        "b2": du,
    }


# Batched twins of the forward/backward above, used by the trainer. Same
# arithmetic per example, one gemm per layer.


def forward_batch(params: PolicyParams, X: np.ndarray):
    if X.shape[1] != params.input_dim:
        raise DimMismatch(f"feature dim {X.shape[1]}, expected {params.input_dim}")
    Z1 = X @ params.W1.T + params.b1
    H = np.maximum(Z1, 0.0)
    U = H @ params.w2 + params.b2
    A = _range_map(U, params.alpha_lo, params.alpha_hi)
    return A, (X, Z1, U, params.version)


def backward_batch(params: PolicyParams, cache, dloss_dalpha: np.ndarray) -> dict:
    X, Z1, U, version = cache
    if version != params.version:
        raise StaleCache("parameters were updated after this forward pass")
    S = sigmoid(U)
    dU = dloss_dalpha * (params.alpha_hi - params.alpha_lo) * S * (1.0 - S)
    H = np.maximum(Z1, 0.0)
    dZ1 = dU[:, None] * params.w2[None, :] * (Z1 > 0.0)
    return {
        "W1": dZ1.T @ X,
        "b1": dZ1.sum(axis=0),
        "w2": H.T @ dU,
        "b2": float(dU.sum()),
    }


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    """Bias-corrected first/second moment accumulators, one per parameter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: PolicyParams, lr: float = 1e-3) -> "AdamState":
        st = cls(lr=lr)
        for key, shape in (("W1", params.W1.shape), ("b1", params.b1.shape),
                           ("w2", params.w2.shape), ("b2", ())):
            st.m[key] = np.zeros(shape)
            st.v[key] = np.zeros(shape)
        return st


def adam_step(params: PolicyParams, grads: dict, state: AdamState) -> tuple[PolicyParams, AdamState]:
    """Standard bias-corrected update, in place; bumps the params version."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for key in ("W1", "b1", "w2", "b2"):
        g = np.asarray(grads[key], dtype=float)
        if g.shape != np.shape(state.m[key]):
            raise ShapeMismatch(f"{key}: grad shape {g.shape}, expected {np.shape(state.m[key])}")
        state.m[key] = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        state.v[key] = state.beta2 * state.v[key] + (1.0 - state.beta2) * g * g
        update = state.lr * (state.m[key] / c1) / (np.sqrt(state.v[key] / c2) + state.eps)
        if key == "b2":
            params.b2 = float(params.b2 - update)
        else:
            getattr(params, key).__isub__(update)
    params.version += 1
    return params, state


# ---------------------------------------------------------------------------
# Checkpoints

_CHECKPOINT_FIELDS = (
    "schema_version", "task", "n_calib", "input_dim", "hidden_dim",
    "alpha_lo", "alpha_hi", "k", "lambda", "seed", "normalizer",
    "W1", "b1", "w2", "b2",
)


def save_checkpoint(path, params: PolicyParams, meta: dict) -> None:
    """JSON checkpoint; floats round-trip exactly (repr serialization).

    meta must supply task, n_calib, k, lambda, and seed.
    """
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "task": meta["task"],
        "n_calib": int(meta["n_calib"]),
        "input_dim": params.input_dim,
        "hidden_dim": params.hidden_dim,
        "alpha_lo": params.alpha_lo,
        "alpha_hi": params.alpha_hi,
        "k": float(meta["k"]),
        "lambda": float(meta["lambda"]),
        "seed": int(meta["seed"]),
        "normalizer": {
            "mean": [float(v) for v in params.norm_mean],
            "sd": [float(v) for v in params.norm_sd],
        },
        "W1": [float(v) for v in params.W1.ravel()],  # row-major
        "b1": [float(v) for v in params.b1],
        "w2": [float(v) for v in params.w2],
        "b2": float(params.b2),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CorruptFile(f"{path}: not a JSON object")
    missing = [f for f in _CHECKPOINT_FIELDS if f not in doc]
    if missing:
        raise CorruptFile(f"{path}: missing fields {missing}")
    if doc["schema_version"] != CHECKPOINT_SCHEMA_VERSION:
        raise SchemaVersionMismatch(doc["schema_version"], CHECKPOINT_SCHEMA_VERSION)
    norm = doc["normalizer"]
    if "mean" not in norm or "sd" not in norm:
        raise CorruptFile(f"{path}: normalizer missing mean/sd")
    h, d = int(doc["hidden_dim"]), int(doc["input_dim"])
    w1 = np.asarray(doc["W1"], dtype=float)
    if w1.size != h * d:
        raise CorruptFile(f"{path}: W1 has {w1.size} entries, expected {h * d}")
    params = PolicyParams(
        W1=w1.reshape(h, d),
        b1=np.asarray(doc["b1"], dtype=float),
        w2=np.asarray(doc["w2"], dtype=float),
        b2=float(doc["b2"]),
        alpha_lo=float(doc["alpha_lo"]),
        alpha_hi=float(doc["alpha_hi"]),
        norm_mean=np.asarray(norm["mean"], dtype=float),
        norm_sd=np.asarray(norm["sd"], dtype=float),
    )
    if params.b1.shape != (h,) or params.w2.shape != (h,):
        raise CorruptFile(f"{path}: bias/weight vectors do not match hidden_dim {h}")
    if params.norm_mean.shape != (d,) or params.norm_sd.shape != (d,):
        raise CorruptFile(f"{path}: normalizer does not match input_dim {d}")
    meta = {key: doc[key] for key in ("task", "n_calib", "k", "lambda", "seed")}
    return params, meta


def constant_policy(task: str, alpha: float, n_calib: int, input_dim: int = 1) -> PolicyParams:
    """Degenerate policy returning (almost exactly) a fixed alpha.

    Zero weights route everything through b2 = logit((alpha-lo)/(hi-lo)).
    Handy for oracle comparisons against closed forms.
    """
    lo, hi = alpha_range(task, n_calib)
    if not lo < alpha < hi:
        raise BadDims(f"alpha {alpha} outside admissible range ({lo}, {hi})")
    frac = (alpha - lo) / (hi - lo)
    return PolicyParams(
        W1=np.zeros((1, input_dim)),
        b1=np.zeros(1),
        w2=np.zeros(1),
        b2=float(math.log(frac / (1.0 - frac))),
        alpha_lo=lo,
        alpha_hi=hi,
        norm_mean=np.zeros(input_dim),
        norm_sd=np.ones(input_dim),
    )
