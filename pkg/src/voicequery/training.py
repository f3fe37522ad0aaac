"""Manual backprop through the ConvRNN and the SGD training loop.

The batched forward pads clips to the longest one and carries a validity
mask: on padded steps the GRU state is held and the max-pool ignores the
step, so every clip's result equals its unpadded forward.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import evaluation
from .augment import AugmentConfig, augment
from .data_io import Waveform
from .frontend import DEFAULT_PCEN, PcenConfig, pcen_full
from .model import (
    BN_EPS,
    BUFFERS,
    N_FEATURES,
    Hyperparams,
    conv_patches,
    init_weights,
    relu,
    sigmoid,
    softmax,
)

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, msg: str, batch_id=None):
        super().__init__(msg)
        self.batch_id = batch_id


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 48
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # (first epoch, rate) steps
    lr_schedule: tuple[tuple[int, float], ...] = ((1, 1e-2), (9, 1e-3), (13, 1e-4))
    total_epochs: int = 16
    seed: int = 0
    bn_momentum: float = 0.9
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.lr_schedule[0][0] != 1:
            raise ValueError("lr schedule must start at epoch 1")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.total_epochs < 1:
            raise ValueError("batch_size and total_epochs must be >= 1")


def lr_at(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    if not 1 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.total_epochs}")
    rate = cfg.lr_schedule[0][1]
    for start, lr in cfg.lr_schedule:
        if epoch >= start:
            rate = lr
    return rate


def cross_entropy(probs: np.ndarray, label: int) -> float:
    return float(-np.log(probs[label]))


def cross_entropy_logits(logits: np.ndarray, labels) -> np.ndarray:
    """Per-example ``-log softmax(logits)[label]`` via log-sum-exp."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    mx = logits.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
    return lse - logits[np.arange(len(labels)), labels]


# ---------------------------------------------------------------------------
# Batched forward / backward
# ---------------------------------------------------------------------------

def _pad(feats: Sequence[np.ndarray], dtype) -> tuple[np.ndarray, np.ndarray]:
    lengths = [len(f) for f in feats]
    if min(lengths) < 1:
        raise ValueError("every clip needs at least one frame")
    x = np.zeros((len(feats), max(lengths), N_FEATURES), dtype=dtype)
    mask = np.zeros((len(feats), max(lengths)), dtype=bool)
    for i, f in enumerate(feats):
        x[i, : len(f)] = f
        mask[i, : len(f)] = True
    return x, mask


def pool_forward(feat: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max over valid steps of ``(B, T, d)`` features; also the winning step per channel.

    Ties go to the earliest step.
    """
    feat = np.where(mask[:, :, None], feat, -np.inf)
    arg = feat.argmax(axis=1)
    return np.take_along_axis(feat, arg[:, None, :], axis=1)[:, 0], arg


def pool_backward(d_max: np.ndarray, arg: np.ndarray, T: int) -> np.ndarray:
    """Route the pooled gradient ``(B, d)`` back to the winning steps only."""
    B, d = d_max.shape
    out = np.zeros((B, T, d), dtype=d_max.dtype)
    bi, ci = np.meshgrid(np.arange(B), np.arange(d), indexing="ij")
    out[bi, arg, ci] = d_max
    return out


def forward_batch(feats: Sequence[np.ndarray], w: dict, hp: Hyperparams, train_bn: bool = False):
    """Forward a list of ``(T_i, 40)`` clips; returns ``(logits, cache)``.

    With ``train_bn`` the BN layer normalizes with statistics of this batch
    (valid positions only) instead of the stored running estimates.
    """
    dtype = w["gru_uz"].dtype
    x, mask = _pad(feats, dtype)
    B, T, _ = x.shape
    c = {"mask": mask, "B": B, "T": T, "train_bn": train_bn}

    if hp.has_conv:
        patches = np.stack([conv_patches(xi, hp) for xi in x])  # (B, T, f, m*n)
        pre = patches @ w["conv_w"].reshape(hp.c, -1).T + w["conv_b"]  # (B, T, f, c)
        act = relu(pre)
        if train_bn:
            sel = act[mask]  # (valid, f, c)
            count = sel.shape[0] * sel.shape[1]
            mu = sel.sum(axis=(0, 1)) / count
            var = ((sel - mu) ** 2).sum(axis=(0, 1)) / count
            c["bn_stats"] = (mu, var, count)
        else:
            mu, var = w["bn_mean"], w["bn_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (act - mu) * inv_std
        s = xhat * w["bn_gamma"] + w["bn_beta"]
        xs = s.transpose(0, 1, 3, 2).reshape(B, T, -1)
        c.update(patches=patches, pre=pre, xhat=xhat, inv_std=inv_std)
    else:
        xs = x
    c["xs"] = xs

    xz = xs @ w["gru_wz"].T + w["gru_bz"]
    xr = xs @ w["gru_wr"].T + w["gru_br"]
    xn = xs @ w["gru_wn"].T + w["gru_bn"]
    k = hp.k
    hprev = np.empty((B, T, k), dtype=dtype)
    zs = np.empty_like(hprev)
    rs = np.empty_like(hprev)
    ns = np.empty_like(hprev)
    uns = np.empty_like(hprev)
    hs = np.empty_like(hprev)
    h = np.zeros((B, k), dtype=dtype)
    uz, ur, un = w["gru_uz"].T, w["gru_ur"].T, w["gru_un"].T
    for t in range(T):
        hprev[:, t] = h
        z = sigmoid(xz[:, t] + h @ uz)
        r = sigmoid(xr[:, t] + h @ ur)
        u = h @ un
        n = np.tanh(xn[:, t] + r * u)
        h_new = (1 - z) * n + z * h
        h = np.where(mask[:, t, None], h_new, h)
        zs[:, t], rs[:, t], ns[:, t], uns[:, t], hs[:, t] = z, r, n, u, h
    c.update(hprev=hprev, z=zs, r=rs, n=ns, un=uns, hs=hs)

    if hp.has_pool:
        fpre = hs @ w["fconv_w"].T + w["fconv_b"]  # (B, T, d)
        c_max, arg = pool_forward(relu(fpre), mask)
        ctx = np.concatenate([c_max, h], axis=1)
        c.update(fpre=fpre, arg=arg)
    else:
        ctx = h
    hidden = relu(ctx @ w["dnn_w1"].T + w["dnn_b1"])
    logits = hidden @ w["dnn_w2"].T + w["dnn_b2"]
    c.update(ctx=ctx, hidden=hidden)
    return logits, c


def backward_batch(logits, cache, labels, w: dict, hp: Hyperparams):
    """Mean cross-entropy over the batch and its gradient for every tensor.

    Buffers (BN running statistics) get zero gradients.
    """
    labels = np.asarray(labels)
    B, T, mask = cache["B"], cache["T"], cache["mask"]
    loss = float(cross_entropy_logits(logits, labels).mean())
    g = {name: np.zeros_like(v) for name, v in w.items()}

    dlogits = softmax(logits)
    dlogits[np.arange(B), labels] -= 1
    dlogits /= B
    hidden, ctx = cache["hidden"], cache["ctx"]
    g["dnn_w2"] = dlogits.T @ hidden
    g["dnn_b2"] = dlogits.sum(axis=0)
    dhid = (dlogits @ w["dnn_w2"]) * (hidden > 0)
    g["dnn_w1"] = dhid.T @ ctx
    g["dnn_b1"] = dhid.sum(axis=0)
    dctx = dhid @ w["dnn_w1"]

    hs = cache["hs"]
    d_hs = np.zeros_like(hs)  # gradient reaching each step's output from the pool path
    if hp.has_pool:
        d = hp.d
        dfpre = pool_backward(dctx[:, :d], cache["arg"], T) * (cache["fpre"] > 0)
        g["fconv_w"] = dfpre.reshape(-1, d).T @ hs.reshape(-1, hp.k)
        g["fconv_b"] = dfpre.sum(axis=(0, 1))
        d_hs = dfpre @ w["fconv_w"]
        dh = dctx[:, d:].copy()
    else:
        dh = dctx.copy()

    z, r, n, un, hprev = cache["z"], cache["r"], cache["n"], cache["un"], cache["hprev"]
    daz = np.empty_like(z)
    dar = np.empty_like(z)
    dan = np.empty_like(z)
    uz, ur, unw = w["gru_uz"], w["gru_ur"], w["gru_un"]
    for t in range(T - 1, -1, -1):
        dh = dh + d_hs[:, t]
        m = mask[:, t, None]
        dnew = np.where(m, dh, 0)
        zt, rt, nt = z[:, t], r[:, t], n[:, t]
        dn = dnew * (1 - zt)
        a_n = dn * (1 - nt * nt)
        a_z = dnew * (hprev[:, t] - nt) * zt * (1 - zt)
        a_r = a_n * un[:, t] * rt * (1 - rt)
        daz[:, t], dar[:, t], dan[:, t] = a_z, a_r, a_n
        dh_prev = dnew * zt + a_z @ uz + a_r @ ur + (a_n * rt) @ unw
        dh = np.where(m, dh_prev, dh)

    hp_flat = hprev.reshape(-1, hp.k)
    xs = cache["xs"].reshape(B * T, -1)
    dx = np.zeros_like(cache["xs"])
    for gate, da in (("z", daz), ("r", dar), ("n", dan)):
        flat = da.reshape(-1, hp.k)
        g[f"gru_w{gate}"] = flat.T @ xs
        g[f"gru_b{gate}"] = flat.sum(axis=0)
        dx += da @ w[f"gru_w{gate}"]
    g["gru_uz"] = daz.reshape(-1, hp.k).T @ hp_flat
    g["gru_ur"] = dar.reshape(-1, hp.k).T @ hp_flat
    g["gru_un"] = (dan * r).reshape(-1, hp.k).T @ hp_flat

    if hp.has_conv:
        ds = dx.reshape(B, T, hp.c, hp.f).transpose(0, 1, 3, 2)  # (B, T, f, c)
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        g["bn_gamma"] = (ds * xhat).sum(axis=(0, 1, 2))
        g["bn_beta"] = ds.sum(axis=(0, 1, 2))
        dxhat = ds * w["bn_gamma"]
        if cache["train_bn"]:
            _, _, count = cache["bn_stats"]
            valid = mask[:, :, None, None]
            dxhat = np.where(valid, dxhat, 0)
            s1 = dxhat.sum(axis=(0, 1, 2))
            s2 = (dxhat * np.where(valid, xhat, 0)).sum(axis=(0, 1, 2))
            dact = inv_std / count * (count * dxhat - s1 - xhat * s2)
            dact = np.where(valid, dact, 0)
        else:
            dact = dxhat * inv_std
        dpre = dact * (cache["pre"] > 0)
        flat = dpre.reshape(-1, hp.c)
        g["conv_w"] = (flat.T @ cache["patches"].reshape(flat.shape[0], -1)).reshape(w["conv_w"].shape)
        g["conv_b"] = flat.sum(axis=0)
    return loss, g


def backward(pcen: np.ndarray, label: int, w: dict, hp: Hyperparams):
    """Loss and exact gradients for one clip, BN using stored statistics."""
    logits, cache = forward_batch([np.asarray(pcen)], w, hp)
    loss, grads = backward_batch(logits, cache, [label], w, hp)
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(f"non-finite gradient in {name}")
    return loss, grads


def predict_probs(feats: Sequence[np.ndarray], w: dict, hp: Hyperparams, batch_size: int = 64) -> np.ndarray:
    """Inference-mode probabilities for many clips."""
    out = []
    for i in range(0, len(feats), batch_size):
        logits, _ = forward_batch(feats[i: i + batch_size], w, hp)
        out.append(softmax(logits))
    return np.concatenate(out) if out else np.zeros((0, hp.n_classes))


# ---------------------------------------------------------------------------
# Optimizer and loop
# ---------------------------------------------------------------------------

def sgd_step(w: dict, grads: dict, velocity: dict, lr: float, cfg: TrainConfig = TrainConfig()):
    """Momentum SGD with L2 decay folded into the gradient; buffers are left alone."""
    new_w, new_v = dict(w), dict(velocity)
    for name in w:
        if name in BUFFERS:
            continue
        v = cfg.momentum * velocity[name] + (grads[name] + cfg.weight_decay * w[name])
        new_v[name] = v.astype(w[name].dtype, copy=False)
        new_w[name] = (w[name] - lr * v).astype(w[name].dtype, copy=False)
    return new_w, new_v


def featurize(item, rng: np.random.Generator | None, aug: AugmentConfig | None, pcen_cfg: PcenConfig) -> np.ndarray:
    """Waveforms go through (optional) augmentation and PCEN; feature matrices pass through."""
    if isinstance(item, Waveform):
        if aug is not None and rng is not None:
            item = augment(item, aug, rng)
        return pcen_full(item, pcen_cfg).astype(np.float32)
    return np.asarray(item, dtype=np.float32)


def evaluate(feats: Sequence[np.ndarray], labels: Sequence[int], w: dict, hp: Hyperparams):
    probs = predict_probs(feats, w, hp)
    records = evaluation.records_from_probs(probs, labels)
    return evaluation.far(records, hp.unknown), evaluation.qer(records, hp.unknown), records


def train(
    train_set: Sequence[tuple[object, int]],
    val_set: Sequence[tuple[object, int]],
    hp: Hyperparams,
    cfg: TrainConfig = TrainConfig(),
    pcen_cfg: PcenConfig = DEFAULT_PCEN,
    weights: dict | None = None,
    on_epoch: Callable[[dict, dict], None] | None = None,
):
    """Train from scratch (or from ``weights``); returns ``(weights, metrics)``.

    Examples are ``(waveform_or_features, label)`` pairs. Waveforms are
    augmented afresh every epoch; feature matrices are used as given.
    ``on_epoch(metrics_row, weights)`` runs after each epoch.
    """
    if not train_set:
        raise ValueError("training set is empty")
    for _, label in list(train_set) + list(val_set):
        if not 0 <= label < hp.n_classes:
            raise ValueError(f"label {label} outside [0, {hp.n_classes})")

    rng = np.random.default_rng(cfg.seed)
    w = weights if weights is not None else init_weights(hp, rng)
    velocity = {name: np.zeros_like(v) for name, v in w.items()}
    val_feats = [featurize(x, None, None, pcen_cfg) for x, _ in val_set]
    val_labels = [label for _, label in val_set]
    needs_aug = any(isinstance(x, Waveform) for x, _ in train_set)
    static = None if needs_aug and cfg.augment is not None else [featurize(x, None, None, pcen_cfg) for x, _ in train_set]

    metrics = []
    for epoch in range(1, cfg.total_epochs + 1):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(train_set))
        epoch_seed = rng.integers(2**63)
        losses, sizes = [], []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start: start + cfg.batch_size]
            if static is not None:
                feats = [static[i] for i in idx]
            else:
                # One rng per (epoch, example) keeps augmentation independent of batch order.
                feats = [
                    featurize(train_set[i][0], np.random.default_rng([epoch_seed, i]), cfg.augment, pcen_cfg)
                    for i in idx
                ]
            labels = [train_set[i][1] for i in idx]
            logits, cache = forward_batch(feats, w, hp, train_bn=hp.has_conv)
            loss, grads = backward_batch(logits, cache, labels, w, hp)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(gv)) for gv in grads.values()):
                raise TrainingDivergedError(f"non-finite loss/gradient at epoch {epoch}, batch {b}", (epoch, b))
            w, velocity = sgd_step(w, grads, velocity, lr, cfg)
            if hp.has_conv:
                mu, var, count = cache["bn_stats"]
                unbiased = var * count / max(count - 1, 1)
                w["bn_mean"] = (cfg.bn_momentum * w["bn_mean"] + (1 - cfg.bn_momentum) * mu).astype(w["bn_mean"].dtype)
                w["bn_var"] = (cfg.bn_momentum * w["bn_var"] + (1 - cfg.bn_momentum) * unbiased).astype(w["bn_var"].dtype)
            losses.append(loss)
            sizes.append(len(idx))

        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.average(losses, weights=sizes))}
        if val_set:
            row["val_far"], row["val_qer"], _ = evaluate(val_feats, val_labels, w, hp)
        else:
            row["val_far"] = row["val_qer"] = float("nan")
        log.info("epoch %d lr %.0e loss %.4f val FAR %.4f QER %.4f", epoch, lr, row["train_loss"], row["val_far"], row["val_qer"])
        metrics.append(row)
        if on_epoch is not None:
            on_epoch(row, w)
    return w, metrics


def format_metrics(rows: Sequence[dict]) -> str:
    return "".join(
        f"{r['epoch']}\t{r['lr']:g}\t{r['train_loss']:.6f}\t{r['val_far']:.6f}\t{r['val_qer']:.6f}\n" for r in rows
    )
