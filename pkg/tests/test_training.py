import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import batch_loss, fd_gradient_check, fd_within, random_weights
from voicequery.augment import AugmentConfig
from voicequery.data_io import Waveform
from voicequery.frontend import DEFAULT_PCEN
from voicequery.model import Hyperparams, forward_full, softmax, zero_weights
from voicequery.training import (
    TrainConfig,
    TrainingDivergedError,
    backward,
    backward_batch,
    cross_entropy,
    cross_entropy_logits,
    featurize,
    forward_batch,
    lr_at,
    pool_backward,
    pool_forward,
    predict_probs,
    sgd_step,
    train,
)

VARIANTS = ("crnn-m", "crnn", "rnn-m")


def tiny(variant="crnn-m", n_classes=4):
    return Hyperparams(c=5, k=7, d=6, r_hidden=8, n_classes=n_classes, variant=variant)


def clips(seed, lengths=(6, 4, 1)):
    rng = np.random.default_rng(seed)
    return [rng.uniform(0, 1.5, (t, 40)) for t in lengths]


# ---------------------------------------------------------------------------
# loss


def test_cross_entropy_uniform_and_onehot():
    assert cross_entropy(np.full(201, 1 / 201), 17) == pytest.approx(math.log(201), rel=1e-12)
    onehot = np.zeros(201)
    onehot[3] = 1.0
    assert cross_entropy(onehot, 3) == 0.0


def test_cross_entropy_matches_high_precision():
    rng = np.random.default_rng(0)
    mpmath.mp.dps = 40
    for _ in range(20):
        logits = rng.normal(0, 5, 201)
        label = int(rng.integers(201))
        exps = [mpmath.exp(mpmath.mpf(float(v))) for v in logits]
        ref = float(-mpmath.log(exps[label] / mpmath.fsum(exps)))
        assert cross_entropy(softmax(logits), label) == pytest.approx(ref, rel=1e-8)
        assert cross_entropy_logits(logits, label)[0] == pytest.approx(ref, rel=1e-8)


def test_cross_entropy_logits_stable_for_large_values():
    out = cross_entropy_logits(np.array([[1000.0, 0.0], [0.0, 1000.0]]), [0, 0])
    assert out[0] == pytest.approx(0.0, abs=1e-12) and out[1] == pytest.approx(1000.0)


# ---------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("variant,train_bn", [
    ("crnn-m", False), ("crnn-m", True), ("crnn", False), ("crnn", True), ("rnn-m", False),
])
def test_gradients_match_finite_differences(variant, train_bn):
    hp = tiny(variant)
    w = random_weights(hp, seed=1)
    results = fd_gradient_check(clips(2), [0, 3, 1], w, hp, train_bn=train_bn, per_tensor=6)
    bad = [r for r in results if not fd_within(r[2], r[3])]
    assert not bad, bad[:5]


def test_zero_weights_output_bias_gradient():
    hp = tiny()
    w = zero_weights(hp, dtype=np.float64)
    _, g = backward(clips(3, (5,))[0], 2, w, hp)
    expected = np.full(hp.n_classes, 1 / hp.n_classes)
    expected[2] -= 1
    np.testing.assert_allclose(g["dnn_b2"], expected, atol=1e-15)


def test_buffers_get_zero_gradient():
    hp = tiny()
    _, g = backward(clips(4, (5,))[0], 1, random_weights(hp, seed=4), hp)
    assert not g["bn_mean"].any() and not g["bn_var"].any()


@pytest.mark.parametrize("variant", VARIANTS)
def test_padded_batch_matches_single_clips(variant):
    hp = tiny(variant)
    w = random_weights(hp, seed=5)
    feats, labels = clips(6), [1, 2, 3]
    logits, cache = forward_batch(feats, w, hp)
    _, g = backward_batch(logits, cache, labels, w, hp)
    mean = {k: np.zeros_like(v) for k, v in w.items()}
    for i, (f, y) in enumerate(zip(feats, labels)):
        np.testing.assert_allclose(softmax(logits[i]), forward_full(f, w, hp), rtol=1e-10)
        _, gi = backward(f, y, w, hp)
        for k in mean:
            mean[k] += gi[k] / len(feats)
    for k in g:
        np.testing.assert_allclose(g[k], mean[k], rtol=1e-9, atol=1e-14)


@pytest.mark.parametrize("train_bn", [False, True])
def test_batch_order_invariance(train_bn):
    hp = tiny()
    w = random_weights(hp, seed=7)
    feats, labels = clips(8), [0, 1, 3]
    perm = [2, 0, 1]
    l1, g1 = backward_batch(*forward_batch(feats, w, hp, train_bn)[:2], labels, w, hp)
    l2, g2 = backward_batch(
        *forward_batch([feats[i] for i in perm], w, hp, train_bn)[:2], [labels[i] for i in perm], w, hp
    )
    assert l1 == pytest.approx(l2, rel=1e-12)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-9, atol=1e-14)


def test_gradient_ignores_frames_after_argmax_when_last_state_unused():
    # With the last hidden state cut out of the classifier, frames after every
    # pooled winner get no gradient, so trailing frames do not change it.
    hp = tiny("crnn-m")
    checked = 0
    for seed in range(40):
        w = random_weights(hp, seed=seed)
        w["dnn_w1"][:, hp.d:] = 0
        x = clips(seed, (5,))[0]
        x_long = np.concatenate([x, np.zeros((3, 40))])
        _, cache = forward_batch([x_long], w, hp)
        if cache["arg"].max() >= 5:
            continue  # a trailing frame won the pool for some channel
        _, g_short = backward(x, 1, w, hp)
        _, g_long = backward(x_long, 1, w, hp)
        for k in ("dnn_w2", "fconv_w", "gru_uz", "gru_wn", "conv_w", "bn_gamma"):
            np.testing.assert_allclose(g_long[k], g_short[k], rtol=1e-10, atol=1e-14)
        checked += 1
    assert checked >= 3


@given(arrays(np.float64, (2, 5, 3), elements=st.floats(-5, 5)), st.integers(1, 5))
def test_pool_gradient_routes_to_winner(feat, valid):
    mask = np.zeros((2, 5), dtype=bool)
    mask[:, :valid] = True
    c_max, arg = pool_forward(feat, mask)
    np.testing.assert_array_equal(c_max, feat[:, :valid].max(axis=1))
    d = np.arange(1, 7, dtype=np.float64).reshape(2, 3)
    back = pool_backward(d, arg, 5)
    np.testing.assert_array_equal(back.sum(axis=1), d)
    assert not back[:, valid:].any()
    for b in range(2):
        for ch in range(3):
            nz = np.flatnonzero(back[b, :, ch])
            assert len(nz) == 1 and feat[b, nz[0], ch] == c_max[b, ch]
            assert nz[0] == np.flatnonzero(feat[b, :valid, ch] == c_max[b, ch])[0]


# ---------------------------------------------------------------------------
# optimizer / schedule


def plain_cfg(**kw):
    return TrainConfig(**{"weight_decay": 0.0, "augment": None, **kw})


def test_sgd_first_step():
    w, g = {"a": np.array([1.0])}, {"a": np.array([1.0])}
    w1, v1 = sgd_step(w, g, {"a": np.zeros(1)}, 0.1, plain_cfg())
    assert v1["a"][0] == 1.0 and w1["a"][0] == pytest.approx(0.9)
    assert w["a"][0] == 1.0  # input untouched


def test_sgd_two_step_unroll():
    cfg = TrainConfig(momentum=0.9, weight_decay=1e-4, augment=None)
    w = {"a": np.array([2.0])}
    v = {"a": np.zeros(1)}
    w1, v1 = sgd_step(w, {"a": np.array([0.5])}, v, 0.01, cfg)
    w2, v2 = sgd_step(w1, {"a": np.array([-0.3])}, v1, 0.01, cfg)
    ev1 = 0.5 + 1e-4 * 2.0
    ew1 = 2.0 - 0.01 * ev1
    ev2 = 0.9 * ev1 + (-0.3 + 1e-4 * ew1)
    assert v2["a"][0] == pytest.approx(ev2, rel=1e-14)
    assert w2["a"][0] == pytest.approx(ew1 - 0.01 * ev2, rel=1e-14)


def test_sgd_velocity_geometric_under_constant_gradient():
    w, v = {"a": np.zeros(1)}, {"a": np.zeros(1)}
    for t in range(1, 30):
        w, v = sgd_step(w, {"a": np.ones(1)}, v, 0.0, plain_cfg())
        assert v["a"][0] == pytest.approx((1 - 0.9**t) / 0.1, rel=1e-12)


@given(arrays(np.float64, 4, elements=st.floats(-3, 3)), arrays(np.float64, 4, elements=st.floats(-3, 3)))
def test_weight_decay_is_gradient_shift(w0, g0):
    lam = 1e-4
    a = sgd_step({"a": w0}, {"a": g0}, {"a": np.zeros(4)}, 0.05, TrainConfig(weight_decay=lam, augment=None))
    b = sgd_step({"a": w0}, {"a": g0 + lam * w0}, {"a": np.zeros(4)}, 0.05, plain_cfg())
    np.testing.assert_allclose(a[0]["a"], b[0]["a"], rtol=1e-12, atol=1e-15)


def test_sgd_leaves_buffers():
    w = {"bn_mean": np.ones(2), "bn_var": np.ones(2), "a": np.ones(2)}
    g = {k: np.ones(2) for k in w}
    v = {k: np.zeros(2) for k in w}
    w1, _ = sgd_step(w, g, v, 0.1)
    assert (w1["bn_mean"] == 1).all() and (w1["bn_var"] == 1).all() and (w1["a"] < 1).all()


@pytest.mark.parametrize("epoch,lr", [(1, 1e-2), (8, 1e-2), (9, 1e-3), (12, 1e-3), (13, 1e-4), (16, 1e-4)])
def test_lr_schedule(epoch, lr):
    assert lr_at(epoch) == lr


@pytest.mark.parametrize("epoch", [0, 17])
def test_lr_schedule_out_of_range(epoch):
    with pytest.raises(ValueError):
        lr_at(epoch)


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.momentum, cfg.weight_decay, cfg.total_epochs) == (48, 0.9, 1e-4, 16)


# ---------------------------------------------------------------------------
# training loop


def separable_set(n_per_class=12, n_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0, 1, (n_classes, 40))
    return [
        (np.clip(protos[y] + rng.normal(0, 0.05, (int(rng.integers(3, 8)), 40)), 0, None), y)
        for y in range(n_classes) for _ in range(n_per_class)
    ]


def test_train_is_deterministic():
    hp = tiny(n_classes=3)
    data = separable_set()
    cfg = TrainConfig(total_epochs=2, batch_size=8, augment=None, lr_schedule=((1, 0.05),))
    w1, m1 = train(data, data[:6], hp, cfg)
    w2, m2 = train(data, data[:6], hp, cfg)
    assert m1 == m2
    for k in w1:
        np.testing.assert_array_equal(w1[k], w2[k])


def test_train_fits_separable_classes():
    hp = tiny(n_classes=3)
    data = separable_set()
    cfg = TrainConfig(total_epochs=50, batch_size=8, augment=None, lr_schedule=((1, 0.1),))
    w, metrics = train(data, data, hp, cfg)
    assert metrics[-1]["train_loss"] < 0.1
    assert metrics[-1]["val_qer"] == 0.0
    assert len(metrics) == 50 and [r["epoch"] for r in metrics] == list(range(1, 51))


def test_running_bn_statistics_update():
    hp = tiny(n_classes=3)
    data = separable_set(n_per_class=2)
    cfg = TrainConfig(total_epochs=1, batch_size=len(data), augment=None, lr_schedule=((1, 1e-9),))
    w0 = random_weights(hp, seed=11, dtype=np.float32)
    w0["bn_mean"][:] = 0
    w0["bn_var"][:] = 1
    w1, _ = train(data, [], hp, cfg, weights={k: v.copy() for k, v in w0.items()})
    _, cache = forward_batch([f.astype(np.float32) for f, _ in data], w0, hp, train_bn=True)
    mu, var, count = cache["bn_stats"]
    np.testing.assert_allclose(w1["bn_mean"], 0.1 * mu, rtol=1e-3, atol=1e-6)
    np.testing.assert_allclose(w1["bn_var"], 0.9 + 0.1 * var * count / (count - 1), rtol=1e-3)


def test_divergence_reports_batch():
    hp = tiny(n_classes=3)
    w = random_weights(hp, seed=12, dtype=np.float32)
    w["dnn_w2"][0, 0] = np.nan
    cfg = TrainConfig(total_epochs=1, batch_size=8, augment=None)
    with pytest.raises(TrainingDivergedError) as err:
        train(separable_set(), [], hp, cfg, weights=w)
    assert err.value.batch_id == (1, 0)


def test_train_rejects_bad_labels():
    hp = tiny(n_classes=3)
    with pytest.raises(ValueError):
        train([(np.ones((2, 40)), 3)], [], hp, TrainConfig(augment=None))
    with pytest.raises(ValueError):
        train([], [], hp)


def test_featurize():
    feats = np.ones((3, 40))
    assert featurize(feats, None, None, DEFAULT_PCEN).dtype == np.float32
    wav = Waveform(np.random.default_rng(0).normal(0, 0.1, 1600))
    plain = featurize(wav, None, None, DEFAULT_PCEN)
    assert plain.shape == (8, 40)
    aug = AugmentConfig(apply_probs=(1.0, 1.0, 1.0))
    a1 = featurize(wav, np.random.default_rng(3), aug, DEFAULT_PCEN)
    a2 = featurize(wav, np.random.default_rng(3), aug, DEFAULT_PCEN)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, plain)


def test_predict_probs_rows_are_distributions():
    hp = tiny()
    p = predict_probs(clips(13, (3, 5, 2, 7)), random_weights(hp, seed=13), hp, batch_size=3)
    assert p.shape == (4, hp.n_classes)
    np.testing.assert_allclose(p.sum(axis=1), 1, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_batch_loss_nonnegative(seed):
    hp = tiny()
    rng = np.random.default_rng(seed)
    assert batch_loss(clips(seed), list(rng.integers(0, 4, 3)), random_weights(hp, seed=seed % 7), hp) >= 0
