import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deyo_lab.errors import ConfigurationError, FormatError, StateError
from deyo_lab.model import (
    ADAPT_PARAMS,
    ALL_PARAMS,
    Counters,
    NormLayer,
    accuracy,
    forward,
    grad_adapt_params,
    init_model,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    sgd_step,
)
from deyo_lab.numerics import make_rng
from gradcheck import numeric_adapt_grads, random_model_and_batch, relative_error


def small_model(seed=0, norm="batch", d=5, hidden=4, c=3):
    return init_model(d, c, make_rng(seed), hidden=hidden, norm=norm)


def test_equal_logits_give_max_entropy():
    model = small_model()
    model.W2[:] = 0.0
    pred = forward(model, make_rng(1).normal(size=(4, 5)))
    np.testing.assert_allclose(pred.entropy, math.log(3), atol=1e-12)
    np.testing.assert_array_equal(pred.pseudo_labels, 0)  # ties go to the lowest index


def test_forward_counts_samples():
    c = Counters()
    forward(small_model(), np.ones((6, 5)) * np.arange(6)[:, None], c)
    assert c.forwards_main == 6


def test_batch_norm_rejects_single_sample():
    with pytest.raises(ConfigurationError, match="layer"):
        forward(small_model(norm="batch"), np.ones((1, 5)))
    forward(small_model(norm="layer"), np.ones((1, 5)) * np.arange(5))


def test_unknown_norm_kind():
    with pytest.raises(ConfigurationError):
        NormLayer("group", np.ones(2), np.zeros(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["batch", "layer"]))
def test_forward_invariants(seed, norm):
    rng = make_rng(seed)
    model = small_model(seed, norm=norm)
    x = rng.normal(0, 3, size=(5, 5))
    pred = forward(model, x)
    assert np.all(pred.entropy >= -1e-15) and np.all(pred.entropy <= math.log(3) + 1e-12)
    np.testing.assert_array_equal(np.argmax(pred.logits, axis=1), pred.pseudo_labels)


def test_batch_norm_standardization_invariance():
    # exact only without the variance stabilizer; with eps the error is O(eps / var)
    rng = make_rng(4)
    model = small_model(4)
    model.norm.eps = 0.0
    x = rng.normal(size=(8, 5))
    ref = forward(model, x).logits
    np.testing.assert_allclose(forward(model, 3.7 * x - 1.2).logits, ref, atol=1e-8, rtol=0)
    model.norm.eps = 1e-5
    np.testing.assert_allclose(forward(model, 3.7 * x - 1.2).logits, forward(model, x).logits, atol=1e-4)


def test_zero_weights_zero_gradient():
    model = small_model()
    g = grad_adapt_params(model, make_rng(0).normal(size=(4, 5)), np.zeros(4))
    for k in ADAPT_PARAMS:
        np.testing.assert_array_equal(g[k], 0.0)


def test_single_sample_layer_norm_gradient_matches_finite_differences():
    rng = make_rng(8)
    model = init_model(3, 2, rng, hidden=2, norm="layer")
    model.norm.gamma = np.array([1.3, 0.7])
    model.norm.beta = np.array([0.2, -0.1])
    x = rng.normal(size=(1, 3))
    w = np.array([1.0])
    assert relative_error(grad_adapt_params(model, x, w), numeric_adapt_grads(model, x, w)) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradient_matches_finite_differences(seed):
    model, x, w = random_model_and_batch(make_rng(seed))
    if not w.any():
        w[0] = 1.0
    assert relative_error(grad_adapt_params(model, x, w), numeric_adapt_grads(model, x, w)) < 1e-4


@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_gradient_is_linear_in_weights(seed, c):
    model, x, w = random_model_and_batch(make_rng(seed))
    denom = 5.0
    g1 = grad_adapt_params(model, x, w, denom=denom)
    gc = grad_adapt_params(model, x, c * w, denom=denom)
    for k in ADAPT_PARAMS:
        np.testing.assert_allclose(gc[k], c * g1[k], rtol=1e-12, atol=1e-15)


def test_sgd_without_momentum():
    model = small_model()
    g = {k: np.full_like(model.param(k), 0.5) for k in ADAPT_PARAMS}
    before = {k: model.param(k).copy() for k in ADAPT_PARAMS}
    sgd_step(model, g, lr=0.1, momentum=0.0)
    for k in ADAPT_PARAMS:
        np.testing.assert_allclose(model.param(k), before[k] - 0.05, rtol=0, atol=1e-15)


def test_sgd_two_momentum_steps():
    model = small_model()
    g = {k: np.full_like(model.param(k), 0.3) for k in ADAPT_PARAMS}
    before = {k: model.param(k).copy() for k in ADAPT_PARAMS}
    sgd_step(model, g, lr=0.01, momentum=0.9)
    sgd_step(model, g, lr=0.01, momentum=0.9)
    for k in ADAPT_PARAMS:
        np.testing.assert_allclose(model.param(k) - before[k], -0.01 * 2.9 * 0.3, rtol=1e-12)


def test_sgd_touches_only_norm_affine():
    model = small_model()
    frozen = {k: model.param(k).copy() for k in ALL_PARAMS if k not in ADAPT_PARAMS}
    g = {k: np.ones_like(model.param(k)) for k in ADAPT_PARAMS}
    sgd_step(model, g, lr=0.1)
    for k, v in frozen.items():
        np.testing.assert_array_equal(model.param(k), v)
    zero = {k: np.zeros_like(model.param(k)) for k in ADAPT_PARAMS}
    fresh = small_model()
    sgd_step(fresh, zero, lr=0.1)
    for k in ALL_PARAMS:
        np.testing.assert_array_equal(fresh.param(k), small_model().param(k))


def _toy(seed, n=256):
    rng = make_rng(seed)
    labels = rng.integers(0, 2, n)
    x = rng.normal(0, 0.5, (n, 2)) + np.where(labels[:, None] == 1, 2.0, -2.0)
    return x, labels


def test_pretrain_one_epoch_on_separable_toy():
    from sklearn.linear_model import LogisticRegression

    x, y = _toy(0)
    assert LogisticRegression().fit(x, y).score(x, y) == 1.0  # separability oracle
    model = init_model(2, 2, make_rng(1), hidden=16)
    pretrain(model, x, y, epochs=1, lr=0.05, rng=make_rng(2))
    assert accuracy(model, x, y) > 0.9


def test_pretrain_rejects_empty_set():
    with pytest.raises(ValueError):
        pretrain(small_model(d=2), np.zeros((0, 2)), np.zeros(0, dtype=int), 1, 0.1, make_rng(0))


def test_permissive_plpd_filter_matches_plain_pretraining():
    x, y = _toy(3, n=64)
    x = np.tile(x, (1, 8)).reshape(64, 4, 4)  # image-shaped so patch shuffle applies
    plain = init_model(16, 2, make_rng(5), hidden=8)
    filtered = init_model(16, 2, make_rng(5), hidden=8)
    pretrain(plain, x, y, epochs=4, lr=0.05, rng=make_rng(6), batch_size=16)
    pretrain(filtered, x, y, epochs=4, lr=0.05, rng=make_rng(6), batch_size=16, plpd_filter=-1.0)
    for k in ALL_PARAMS:
        np.testing.assert_array_equal(plain.param(k), filtered.param(k))


def test_impossible_plpd_filter_freezes_after_warmup():
    x, y = _toy(3, n=64)
    x = x.repeat(8, axis=1).reshape(64, 4, 4)
    warm = init_model(16, 2, make_rng(5), hidden=8)
    full = init_model(16, 2, make_rng(5), hidden=8)
    # warm-up of 0.25 * 4 = 1 epoch, then nothing passes PLPD > 1.1
    pretrain(warm, x, y, epochs=1, lr=0.05, rng=make_rng(6), batch_size=16)
    pretrain(full, x, y, epochs=4, lr=0.05, rng=make_rng(6), batch_size=16, plpd_filter=1.1)
    for k in ALL_PARAMS:
        np.testing.assert_array_equal(warm.param(k), full.param(k))


def test_snapshot_reset_roundtrip():
    rng = make_rng(0)
    model = small_model()
    x = rng.normal(size=(6, 5))
    ref = forward(model, x).logits
    model.snapshot()
    for _ in range(10):
        sgd_step(model, grad_adapt_params(model, x, np.ones(6)), lr=0.5)
    assert not np.array_equal(forward(model, x).logits, ref)
    model.reset()
    np.testing.assert_array_equal(forward(model, x).logits, ref)
    model.reset()
    np.testing.assert_array_equal(forward(model, x).logits, ref)
    for k in ADAPT_PARAMS:
        np.testing.assert_array_equal(model.velocity[k], 0.0)


def test_snapshot_after_adaptation_restores_adapted_state():
    rng = make_rng(1)
    model = small_model()
    x = rng.normal(size=(6, 5))
    sgd_step(model, grad_adapt_params(model, x, np.ones(6)), lr=0.5)
    adapted = forward(model, x).logits
    model.snapshot()
    sgd_step(model, grad_adapt_params(model, x, np.ones(6)), lr=0.5)
    model.reset()
    np.testing.assert_array_equal(forward(model, x).logits, adapted)


def test_reset_without_snapshot():
    with pytest.raises(StateError):
        small_model().reset()


def test_checkpoint_roundtrip(tmp_path):
    model = small_model(norm="layer")
    model.velocity["gamma"] += 0.25
    path = save_checkpoint(model, tmp_path / "m.npz")
    back = load_checkpoint(path)
    for k in ALL_PARAMS:
        np.testing.assert_array_equal(back.param(k), model.param(k))
    np.testing.assert_array_equal(back.velocity["gamma"], model.velocity["gamma"])
    assert back.norm.kind == "layer" and back.norm.eps == model.norm.eps


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "other.npz"
    np.savez(path, a=np.zeros(2))
    with pytest.raises(FormatError):
        load_checkpoint(path)
