import numpy as np
import pytest

from voicequery.model import Hyperparams, init_weights

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_hp():
    return Hyperparams(c=8, m=3, n=20, k=16, d=8, r_hidden=12, n_classes=5)


def random_weights(hp, seed=0, dtype=np.float64, scale=1.0):
    """Random weights with non-trivial BN statistics."""
    rng = np.random.default_rng(seed)
    w = {k: (v * scale).astype(dtype) for k, v in init_weights(hp, rng, dtype=np.float64).items()}
    if hp.has_conv:
        w["bn_mean"] = rng.uniform(0, 0.5, hp.c).astype(dtype)
        w["bn_var"] = rng.uniform(0.5, 2.0, hp.c).astype(dtype)
        w["bn_gamma"] = rng.uniform(0.5, 1.5, hp.c).astype(dtype)
        w["bn_beta"] = rng.uniform(-0.2, 0.2, hp.c).astype(dtype)
    return w


def batch_loss(feats, labels, w, hp, train_bn=False):
    from voicequery.training import cross_entropy_logits, forward_batch

    logits, _ = forward_batch(feats, w, hp, train_bn=train_bn)
    return float(cross_entropy_logits(logits, labels).mean())


def fd_gradient_check(feats, labels, w, hp, train_bn=False, per_tensor=5, eps=1e-5, seed=0):
    """Central differences on sampled entries of every trainable tensor.

    Returns ``(name, index, numeric, analytic)`` tuples.
    """
    from voicequery.model import BUFFERS
    from voicequery.training import backward_batch, forward_batch

    logits, cache = forward_batch(feats, w, hp, train_bn=train_bn)
    _, grads = backward_batch(logits, cache, labels, w, hp)
    rng = np.random.default_rng(seed)
    out = []
    for name, value in w.items():
        if name in BUFFERS:
            continue
        for flat in rng.choice(value.size, size=min(per_tensor, value.size), replace=False):
            idx = np.unravel_index(flat, value.shape)
            wp = {k: v.copy() for k, v in w.items()}
            wm = {k: v.copy() for k, v in w.items()}
            wp[name][idx] += eps
            wm[name][idx] -= eps
            num = (batch_loss(feats, labels, wp, hp, train_bn) - batch_loss(feats, labels, wm, hp, train_bn)) / (2 * eps)
            out.append((name, idx, num, float(grads[name][idx])))
    return out


def fd_within(num, ana, rel=1e-4, abs_=1e-6):
    return abs(num - ana) <= max(rel * abs(num), abs_)
