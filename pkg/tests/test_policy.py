import json
import math

import numpy as np
import pytest

from ecp.errors import (
    BadDims,
    CorruptFile,
    DimMismatch,
    SchemaVersionMismatch,
    ShapeMismatch,
    StaleCache,
)
from ecp.policy import (
    AdamState,
    PolicyInput,
    PolicyParams,
    adam_step,
    constant_policy,
    featurize,
    init_policy,
    load_checkpoint,
    policy_backward,
    policy_forward,
    save_checkpoint,
)
from ecp.scores import CandidateScores


def reference_forward(params, feats):
    """Loop-based re-implementation of the range-mapped MLP, for cross-checking."""
    h = params.hidden_dim
    hidden = []
    for i in range(h):
        z = sum(params.W1[i, j] * feats[j] for j in range(params.input_dim)) + params.b1[i]
        hidden.append(max(z, 0.0))
    u = sum(params.w2[i] * hidden[i] for i in range(h)) + params.b2
    s = 1.0 / (1.0 + math.exp(-u))
    return params.alpha_lo + (params.alpha_hi - params.alpha_lo) * s


def zeroed(params):
    params.W1[:] = 0.0
    params.b1[:] = 0.0
    params.w2[:] = 0.0
    params.b2 = 0.0
    return params


def test_zero_params_give_range_midpoint():
    params = zeroed(init_policy("regression", 1, 8, n_calib=100, seed=0))
    alpha, _ = policy_forward(params, PolicyInput(6.0, 3))
    assert alpha.value == pytest.approx((params.alpha_lo + params.alpha_hi) / 2, abs=1e-15)


def test_regression_alpha_floor():
    params = init_policy("regression", 1, 4, n_calib=100, seed=0)
    assert params.alpha_lo == pytest.approx(0.0101, abs=1e-12)


def test_init_deterministic():
    a = init_policy("classification", 11, 32, n_calib=50, seed=9)
    b = init_policy("classification", 11, 32, n_calib=50, seed=9)
    assert np.array_equal(a.W1, b.W1) and np.array_equal(a.w2, b.w2)


def test_init_near_one_flag():
    params = init_policy("regression", 1, 32, n_calib=100, seed=0, init_output_near_one=True)
    from ecp.conformal import sigmoid

    assert sigmoid(params.b2) >= 0.99


def test_init_bad_dims():
    with pytest.raises(BadDims):
        init_policy("regression", 0, 4, n_calib=100, seed=0)


def test_featurize_examples():
    mean1, sd1 = np.zeros(1), np.ones(1)
    assert featurize(PolicyInput(6.0, 3), mean1, sd1).tolist() == [2.0]

    mean3, sd3 = np.zeros(3), np.ones(3)
    got = featurize(PolicyInput(6.0, 3, CandidateScores((1.0, 5.0))), mean3, sd3)
    assert got.tolist() == [2.0, 1.0, 5.0]

    mean = np.array([2.0, 1.0, 5.0])
    sd = np.array([1.0, 2.0, 2.0])
    got = featurize(PolicyInput(6.0, 3, CandidateScores((1.0, 5.0))), mean, sd)
    assert got.tolist() == [0.0, 0.0, 0.0]


def test_featurize_dim_mismatch():
    with pytest.raises(DimMismatch):
        featurize(PolicyInput(6.0, 3, CandidateScores((1.0, 5.0))), np.zeros(2), np.ones(2))


def test_forward_monotone_in_b2():
    params = init_policy("classification", 3, 8, n_calib=50, seed=1)
    inp = PolicyInput(5.0, 10, CandidateScores((0.1, 0.9)))
    alphas = []
    for b2 in (-50.0, 0.0, 50.0):
        params.b2 = b2
        alphas.append(policy_forward(params, inp)[0].value)
    assert alphas[0] < alphas[1] < alphas[2]
    assert alphas[2] == pytest.approx(params.alpha_hi, abs=1e-9)
    assert params.alpha_lo < alphas[0] < params.alpha_hi


def test_forward_matches_reference_implementation():
    rng = np.random.default_rng(13)
    for _ in range(25):
        d = int(rng.integers(1, 6))
        params = init_policy("classification", d, int(rng.integers(1, 9)), n_calib=20, seed=int(rng.integers(1e6)))
        params.b1[:] = rng.normal(size=params.hidden_dim)
        feats = rng.normal(size=d)
        from ecp.policy import _forward_features

        alpha, _ = _forward_features(params, feats)
        assert alpha.value == pytest.approx(reference_forward(params, feats), rel=1e-12)


def test_backward_zero_loss_gradient():
    params = init_policy("regression", 1, 8, n_calib=100, seed=2)
    alpha, cache = policy_forward(params, PolicyInput(6.0, 3))
    grads = policy_backward(params, cache, 0.0)
    assert all(np.all(np.asarray(g) == 0.0) for g in grads.values())


def test_backward_single_unit_hand_case():
    # x = 0 so the input weight gets no gradient; b1, w2, b2 follow the chain
    params = PolicyParams(
        W1=np.array([[0.7]]),
        b1=np.array([0.3]),
        w2=np.array([-1.2]),
        b2=0.4,
        alpha_lo=0.05,
        alpha_hi=0.95,
        norm_mean=np.zeros(1),
        norm_sd=np.ones(1),
    )
    inp = PolicyInput(0.0, 5)  # mean score 0 -> feature 0
    alpha, cache = policy_forward(params, inp)
    u = -1.2 * 0.3 + 0.4
    s = 1.0 / (1.0 + math.exp(-u))
    assert alpha.value == pytest.approx(0.05 + 0.9 * s, rel=1e-14)
    g = 2.5
    grads = policy_backward(params, cache, g)
    du = g * 0.9 * s * (1.0 - s)
    assert grads["W1"][0, 0] == 0.0
    assert grads["b1"][0] == pytest.approx(du * -1.2, rel=1e-12)
    assert grads["w2"][0] == pytest.approx(du * 0.3, rel=1e-12)
    assert grads["b2"] == pytest.approx(du, rel=1e-12)


def test_backward_matches_finite_differences():
    from ecp.policy import _forward_features

    rng = np.random.default_rng(4)
    h = 1e-4
    checked = 0
    while checked < 40:
        d = int(rng.integers(1, 8))
        params = init_policy(
            "classification", d, int(rng.integers(2, 12)), n_calib=30, seed=int(rng.integers(1e6))
        )
        params.b1[:] = rng.normal(scale=0.5, size=params.hidden_dim)
        feats = rng.normal(size=d)
        z1 = params.W1 @ feats + params.b1
        if np.min(np.abs(z1)) < 10 * h:  # keep the relu gates away from the kink
            continue
        _, cache = _forward_features(params, feats)
        grads = policy_backward(params, cache, 1.0)  # gradient of alpha itself

        def alpha_of(p):
            return _forward_features(p, feats)[0].value

        for key in ("W1", "b1", "w2"):
            arr = getattr(params, key)
            flat = arr.ravel()
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                up = alpha_of(params)
                flat[idx] = orig - h
                dn = alpha_of(params)
                flat[idx] = orig
                fd = (up - dn) / (2 * h)
                got = np.asarray(grads[key]).ravel()[idx]
                assert abs(got - fd) <= 1e-5 * max(abs(got), abs(fd), 1e-6)
        params.b2 += h
        up = alpha_of(params)
        params.b2 -= 2 * h
        dn = alpha_of(params)
        params.b2 += h
        fd = (up - dn) / (2 * h)
        assert abs(grads["b2"] - fd) <= 1e-5 * max(abs(grads["b2"]), abs(fd), 1e-6)
        checked += 1


def test_adam_zero_grad_keeps_params():
    params = init_policy("regression", 1, 4, n_calib=100, seed=3)
    before = params.copy()
    state = AdamState.for_params(params)
    grads = {"W1": np.zeros_like(params.W1), "b1": np.zeros_like(params.b1),
             "w2": np.zeros_like(params.w2), "b2": 0.0}
    adam_step(params, grads, state)
    assert np.array_equal(params.W1, before.W1)
    assert params.b2 == before.b2
    assert state.step == 1


def test_adam_first_step_is_signed_lr():
    params = init_policy("regression", 1, 4, n_calib=100, seed=3)
    before = params.copy()
    state = AdamState.for_params(params, lr=1e-3)
    g = np.full_like(params.w2, 0.25)
    grads = {"W1": np.zeros_like(params.W1), "b1": np.zeros_like(params.b1),
             "w2": g, "b2": -0.5}
    adam_step(params, grads, state)
    expected = 1e-3 * 0.25 / (0.25 + 1e-8)
    assert np.allclose(params.w2, before.w2 - expected, atol=1e-15)
    assert params.b2 == pytest.approx(before.b2 + 1e-3 * 0.5 / (0.5 + 1e-8), abs=1e-15)


def test_adam_shape_mismatch():
    params = init_policy("regression", 1, 4, n_calib=100, seed=3)
    state = AdamState.for_params(params)
    grads = {"W1": np.zeros((2, 2)), "b1": np.zeros_like(params.b1),
             "w2": np.zeros_like(params.w2), "b2": 0.0}
    with pytest.raises(ShapeMismatch):
        adam_step(params, grads, state)


def test_adam_deterministic_trajectory():
    def run():
        params = init_policy("regression", 1, 8, n_calib=100, seed=5)
        state = AdamState.for_params(params, lr=1e-2)
        rng = np.random.default_rng(0)
        for _ in range(20):
            grads = {"W1": rng.normal(size=params.W1.shape),
                     "b1": rng.normal(size=params.b1.shape),
                     "w2": rng.normal(size=params.w2.shape),
                     "b2": float(rng.normal())}
            adam_step(params, grads, state)
        return params

    a, b = run(), run()
    assert np.array_equal(a.W1, b.W1) and a.b2 == b.b2


def test_stale_cache_detected_after_update():
    params = init_policy("regression", 1, 4, n_calib=100, seed=6)
    _, cache = policy_forward(params, PolicyInput(6.0, 3))
    state = AdamState.for_params(params)
    grads = {"W1": np.ones_like(params.W1), "b1": np.ones_like(params.b1),
             "w2": np.ones_like(params.w2), "b2": 1.0}
    adam_step(params, grads, state)
    with pytest.raises(StaleCache):
        policy_backward(params, cache, 1.0)


def test_constant_policy_returns_alpha():
    params = constant_policy("regression", 0.5, n_calib=100)
    alpha, _ = policy_forward(params, PolicyInput(123.0, 100))
    assert alpha.value == pytest.approx(0.5, abs=1e-12)


# --- checkpoints -----------------------------------------------------------


def meta():
    return {"task": "classification", "n_calib": 100, "k": 100.0, "lambda": 50.0, "seed": 7}


def test_checkpoint_round_trip(tmp_path):
    params = init_policy("classification", 11, 32, n_calib=100, seed=7)
    params.norm_mean = np.linspace(-1, 1, 11)
    params.norm_sd = np.linspace(0.5, 2.0, 11)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, params, meta())
    loaded, got_meta = load_checkpoint(path)
    assert np.array_equal(loaded.W1, params.W1)
    assert np.array_equal(loaded.b1, params.b1)
    assert np.array_equal(loaded.w2, params.w2)
    assert loaded.b2 == params.b2
    assert np.array_equal(loaded.norm_mean, params.norm_mean)
    assert np.array_equal(loaded.norm_sd, params.norm_sd)
    assert (loaded.alpha_lo, loaded.alpha_hi) == (params.alpha_lo, params.alpha_hi)
    assert got_meta == meta()


def test_checkpoint_missing_field(tmp_path):
    params = init_policy("classification", 3, 4, n_calib=100, seed=7)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, params, meta())
    doc = json.loads(path.read_text())
    del doc["w2"]
    path.write_text(json.dumps(doc))
    with pytest.raises(CorruptFile):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    params = init_policy("classification", 3, 4, n_calib=100, seed=7)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, params, meta())
    doc = json.loads(path.read_text())
    doc["schema_version"] = 999
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaVersionMismatch):
        load_checkpoint(path)


def test_checkpoint_garbage(tmp_path):
    path = tmp_path / "ckpt.json"
    path.write_text("{not json")
    with pytest.raises(CorruptFile):
        load_checkpoint(path)
