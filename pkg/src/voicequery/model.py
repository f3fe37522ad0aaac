"""ConvRNN forward computation and footprint accounting.

Three variants share one parameter layout:

* ``crnn-m``: causal conv + BN -> GRU -> feature conv + max-pool -> DNN
* ``crnn``:   causal conv + BN -> GRU -> DNN on the last hidden state
* ``rnn-m``:  PCEN frames fed straight into the GRU, with feature conv + max-pool

Weights are a plain ``dict`` of named numpy arrays; :func:`weight_shapes`
is the single source of truth for which names a variant needs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

N_FEATURES = 40
BN_EPS = 1e-5

VARIANTS = ("crnn-m", "crnn", "rnn-m")

# Tensors that carry statistics rather than trainable values.
BUFFERS = frozenset({"bn_mean", "bn_var"})


@dataclass(frozen=True)
class Hyperparams:
    c: int = 250
    m: int = 3
    n: int = 20
    stride_t: int = 1
    stride_f: int = 10
    k: int = 750
    d: int = 350
    r_hidden: int = 768
    n_classes: int = 201
    variant: str = "crnn-m"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("c", "m", "n", "stride_t", "stride_f", "k", "d", "r_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2 (at least one query plus unknown)")
        if self.stride_t != 1:
            raise ValueError("only a time stride of 1 is streamable")
        if self.has_conv and (self.n > N_FEATURES or (N_FEATURES - self.n) % self.stride_f):
            raise ValueError("conv length/stride must tile the 40 PCEN channels exactly")

    @property
    def has_conv(self) -> bool:
        return self.variant != "rnn-m"

    @property
    def has_pool(self) -> bool:
        return self.variant != "crnn"

    @property
    def f(self) -> int:
        """Frequency positions produced by the causal conv."""
        return (N_FEATURES - self.n) // self.stride_f + 1

    @property
    def gru_in(self) -> int:
        return self.c * self.f if self.has_conv else N_FEATURES

    @property
    def ctx_dim(self) -> int:
        return self.k + self.d if self.has_pool else self.k

    @property
    def unknown(self) -> int:
        return self.n_classes - 1

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "crnn-750m": Hyperparams(variant="crnn-m"),
    "crnn-750": Hyperparams(variant="crnn"),
    "rnn-750m": Hyperparams(variant="rnn-m"),
}


def preset(name: str, **overrides) -> Hyperparams:
    """Look up a named variant, optionally overriding dimensions."""
    try:
        hp = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    return replace(hp, **overrides)


def weight_shapes(hp: Hyperparams) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    if hp.has_conv:
        shapes["conv_w"] = (hp.c, hp.m, hp.n)
        shapes["conv_b"] = (hp.c,)
        for name in ("bn_gamma", "bn_beta", "bn_mean", "bn_var"):
            shapes[name] = (hp.c,)
    for g in "zrn":
        shapes[f"gru_w{g}"] = (hp.k, hp.gru_in)
    for g in "zrn":
        shapes[f"gru_u{g}"] = (hp.k, hp.k)
    for g in "zrn":
        shapes[f"gru_b{g}"] = (hp.k,)
    if hp.has_pool:
        shapes["fconv_w"] = (hp.d, hp.k)
        shapes["fconv_b"] = (hp.d,)
    shapes["dnn_w1"] = (hp.r_hidden, hp.ctx_dim)
    shapes["dnn_b1"] = (hp.r_hidden,)
    shapes["dnn_w2"] = (hp.n_classes, hp.r_hidden)
    shapes["dnn_b2"] = (hp.n_classes,)
    return shapes


def init_weights(hp: Hyperparams, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Uniform(+-sqrt(1/fan_in)) for weights and biases; BN starts as identity."""
    fan_in = {
        "conv": hp.m * hp.n,
        "gru_w": hp.gru_in,
        "gru_u": hp.k,
        "gru_b": hp.k,
        "fconv": hp.k,
        "dnn_w1": hp.ctx_dim,
        "dnn_b1": hp.ctx_dim,
        "dnn_w2": hp.r_hidden,
        "dnn_b2": hp.r_hidden,
    }
    w = {}
    for name, shape in weight_shapes(hp).items():
        if name in ("bn_gamma", "bn_var"):
            w[name] = np.ones(shape, dtype=dtype)
        elif name in ("bn_beta", "bn_mean"):
            w[name] = np.zeros(shape, dtype=dtype)
        else:
            key = next(p for p in fan_in if name.startswith(p))
            bound = np.sqrt(1.0 / fan_in[key])
            w[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return w


def zero_weights(hp: Hyperparams, dtype=np.float32) -> dict[str, np.ndarray]:
    w = {name: np.zeros(shape, dtype=dtype) for name, shape in weight_shapes(hp).items()}
    if hp.has_conv:
        w["bn_gamma"][:] = 1
        w["bn_var"][:] = 1
    return w


def check_weights(w: dict[str, np.ndarray], hp: Hyperparams) -> None:
    expected = weight_shapes(hp)
    missing = expected.keys() - w.keys()
    if missing:
        raise KeyError(f"missing tensors: {sorted(missing)}")
    extra = w.keys() - expected.keys()
    if extra:
        raise KeyError(f"unexpected tensors for variant {hp.variant}: {sorted(extra)}")
    for name, shape in expected.items():
        if w[name].shape != shape:
            raise ValueError(f"{name}: shape {w[name].shape} != expected {shape}")


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------

def sigmoid(x):
    # tanh form never overflows, unlike 1/(1+exp(-x)).
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x):
    return np.maximum(x, 0)


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def bn_scale_shift(w: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Fold stored BN statistics into a per-channel affine map."""
    scale = w["bn_gamma"] / np.sqrt(w["bn_var"] + BN_EPS)
    shift = w["bn_beta"] - w["bn_mean"] * scale
    return scale, shift


def causal_conv(frames: np.ndarray, w: dict[str, np.ndarray], hp: Hyperparams) -> np.ndarray:
    """Convolve the last ``m`` PCEN frames (oldest first) into a ``(c, f)`` context.

    Conv -> ReLU -> BN with stored statistics.
    """
    if frames.shape != (hp.m, N_FEATURES):
        raise ValueError(f"expected ({hp.m}, {N_FEATURES}) frames, got {frames.shape}")
    patches = np.stack(
        [frames[:, j * hp.stride_f: j * hp.stride_f + hp.n].reshape(-1) for j in range(hp.f)]
    )  # (f, m*n)
    y = relu(w["conv_w"].reshape(hp.c, -1) @ patches.T + w["conv_b"][:, None])  # (c, f)
    scale, shift = bn_scale_shift(w)
    return y * scale[:, None] + shift[:, None]


def conv_patches(pcen: np.ndarray, hp: Hyperparams) -> np.ndarray:
    """All causal conv patches for a ``(T, 40)`` sequence: ``(T, f, m*n)``.

    ``m - 1`` frames of silence are prepended so frame ``t`` sees ``t-m+1..t``.
    """
    pad = np.zeros((hp.m - 1, N_FEATURES), dtype=pcen.dtype)
    x = np.concatenate([pad, pcen], axis=0)
    win = np.lib.stride_tricks.sliding_window_view(x, (hp.m, hp.n))  # (T, 40-n+1, m, n)
    win = win[:, :: hp.stride_f]
    return win.reshape(pcen.shape[0], hp.f, hp.m * hp.n)


def conv_sequence(pcen: np.ndarray, w: dict[str, np.ndarray], hp: Hyperparams) -> np.ndarray:
    """Causal conv over a whole sequence; returns flattened GRU inputs ``(T, c*f)``."""
    y = relu(conv_patches(pcen, hp) @ w["conv_w"].reshape(hp.c, -1).T + w["conv_b"])  # (T, f, c)
    scale, shift = bn_scale_shift(w)
    y = y * scale + shift
    return y.transpose(0, 2, 1).reshape(pcen.shape[0], -1)


def gru_step(x: np.ndarray, h: np.ndarray, w: dict[str, np.ndarray]) -> np.ndarray:
    z = sigmoid(w["gru_wz"] @ x + w["gru_uz"] @ h + w["gru_bz"])
    r = sigmoid(w["gru_wr"] @ x + w["gru_ur"] @ h + w["gru_br"])
    n = np.tanh(w["gru_wn"] @ x + r * (w["gru_un"] @ h) + w["gru_bn"])
    return (1 - z) * n + z * h


def feature_conv(h: np.ndarray, w: dict[str, np.ndarray]) -> np.ndarray:
    return relu(w["fconv_w"] @ h + w["fconv_b"])


def maxpool_update(running: np.ndarray | None, feat: np.ndarray) -> np.ndarray:
    if running is None:
        return feat.copy()
    return np.maximum(running, feat)


def context_vector(c_max: np.ndarray | None, h: np.ndarray, hp: Hyperparams) -> np.ndarray:
    if hp.has_pool:
        return np.concatenate([c_max, h])
    return h


def classify_logits(ctx: np.ndarray, w: dict[str, np.ndarray]) -> np.ndarray:
    hidden = relu(w["dnn_w1"] @ ctx + w["dnn_b1"])
    return w["dnn_w2"] @ hidden + w["dnn_b2"]


def classify(ctx: np.ndarray, w: dict[str, np.ndarray]) -> np.ndarray:
    return softmax(classify_logits(ctx, w))


def forward_full(pcen: np.ndarray, w: dict[str, np.ndarray], hp: Hyperparams) -> np.ndarray:
    """Class probabilities for a whole ``(T, 40)`` PCEN clip."""
    pcen = np.asarray(pcen)
    if pcen.ndim != 2 or pcen.shape[1] != N_FEATURES or pcen.shape[0] < 1:
        raise ValueError(f"expected (T>=1, {N_FEATURES}) features, got {pcen.shape}")
    dtype = w["gru_uz"].dtype
    pcen = pcen.astype(dtype, copy=False)
    xs = conv_sequence(pcen, w, hp) if hp.has_conv else pcen

    # Input projections for every step at once; only U.h stays in the loop.
    xz = xs @ w["gru_wz"].T + w["gru_bz"]
    xr = xs @ w["gru_wr"].T + w["gru_br"]
    xn = xs @ w["gru_wn"].T + w["gru_bn"]
    h = np.zeros(hp.k, dtype=dtype)
    hs = np.empty((pcen.shape[0], hp.k), dtype=dtype)
    for t in range(pcen.shape[0]):
        z = sigmoid(xz[t] + w["gru_uz"] @ h)
        r = sigmoid(xr[t] + w["gru_ur"] @ h)
        n = np.tanh(xn[t] + r * (w["gru_un"] @ h))
        h = (1 - z) * n + z * h
        hs[t] = h

    c_max = None
    if hp.has_pool:
        c_max = relu(hs @ w["fconv_w"].T + w["fconv_b"]).max(axis=0)
    return classify(context_vector(c_max, h, hp), w)


# ---------------------------------------------------------------------------
# Footprint accounting
# ---------------------------------------------------------------------------

LAYERS = ("conv", "bn", "gru", "fconv", "dnn", "softmax")


def count_params(hp: Hyperparams) -> dict[str, int]:
    """Trainable parameters per layer (BN running statistics excluded)."""
    k, i = hp.k, hp.gru_in
    return {
        "conv": hp.c * hp.m * hp.n + hp.c if hp.has_conv else 0,
        "bn": 2 * hp.c if hp.has_conv else 0,
        "gru": 3 * (k * i + k * k + k),
        "fconv": hp.d * k + hp.d if hp.has_pool else 0,
        "dnn": hp.ctx_dim * hp.r_hidden + hp.r_hidden,
        "softmax": hp.r_hidden * hp.n_classes + hp.n_classes,
    }


def count_multiplies(hp: Hyperparams, frames_per_s: int = 100, classify_per_s: int = 10) -> dict[str, int]:
    """Matrix-product multiplies per second of audio (plus BN's 2 per element)."""
    k, i = hp.k, hp.gru_in
    return {
        "conv": frames_per_s * hp.f * hp.c * hp.m * hp.n if hp.has_conv else 0,
        "bn": frames_per_s * hp.f * hp.c * 2 if hp.has_conv else 0,
        "gru": frames_per_s * 3 * (k * i + k * k),
        "fconv": frames_per_s * hp.d * k if hp.has_pool else 0,
        "dnn": classify_per_s * hp.ctx_dim * hp.r_hidden,
        "softmax": classify_per_s * hp.r_hidden * hp.n_classes,
    }


LAYER_LABELS = {
    "conv": "C. Conv",
    "bn": "BN",
    "gru": "GRU",
    "fconv": "Conv",
    "dnn": "DNN",
    "softmax": "Softmax",
}


def display_count(n: float, sig: int = 3) -> str:
    """Compact count like ``4.66M`` or ``150K`` at ``sig`` significant digits."""
    for div, suffix in ((1e9, "G"), (1e6, "M"), (1e3, "K")):
        if abs(n) >= div:
            return f"{n / div:.{sig}g}{suffix}"
    return f"{n:.{sig}g}"


def footprint_report(hp: Hyperparams, frames_per_s: int = 100, classify_per_s: int = 10) -> str:
    """Per-layer parameter and multiply table for one variant."""
    params = count_params(hp)
    mults = count_multiplies(hp, frames_per_s, classify_per_s)
    lines = [
        f"variant {hp.variant}: c={hp.c} m={hp.m} n={hp.n} f={hp.f} k={hp.k} d={hp.d} "
        f"r={hp.r_hidden} classes={hp.n_classes}",
        f"{'layer':<9}{'#par':>11}{'':>8}{'#mult/s':>13}{'':>8}",
    ]
    for layer in LAYERS:
        if params[layer] == 0 and mults[layer] == 0:
            continue
        lines.append(
            f"{LAYER_LABELS[layer]:<9}{params[layer]:>11,}{display_count(params[layer]):>8}"
            f"{mults[layer]:>13,}{display_count(mults[layer]):>8}"
        )
    tp, tm = sum(params.values()), sum(mults.values())
    lines.append(f"{'Total':<9}{tp:>11,}{display_count(tp):>8}{tm:>13,}{display_count(tm):>8}")
    return "\n".join(lines) + "\n"
