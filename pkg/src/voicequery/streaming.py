"""Constant-space incremental inference over unbounded 16 kHz audio.

Each completed 10 ms hop runs mel -> PCEN -> causal conv -> GRU -> feature
conv -> running max. A prediction is emitted whenever the stream clock
reaches a multiple of the prediction interval and at least one frame has
been processed. Hops that complete exactly on a boundary are included in
that boundary's prediction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data_io import SAMPLE_RATE
from .frontend import DEFAULT_FRAME, DEFAULT_PCEN, FrameConfig, PcenConfig, PcenState, mel_energies, pcen_step
from .model import N_FEATURES, Hyperparams, causal_conv, classify, context_vector, feature_conv, gru_step

REAL_BYTES = 4


@dataclass
class StreamState:
    pcen_state: PcenState
    conv_history: np.ndarray  # (m-1, 40), oldest first
    gru_hidden: np.ndarray
    max_state: np.ndarray | None  # None until the first frame
    frames_seen: int = 0
    samples_seen: int = 0
    predictions_emitted: int = 0
    # Tail of the audio still needed for upcoming windows (< one window long).
    sample_buffer: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def copy(self) -> "StreamState":
        return StreamState(
            self.pcen_state.copy(),
            self.conv_history.copy(),
            self.gru_hidden.copy(),
            None if self.max_state is None else self.max_state.copy(),
            self.frames_seen,
            self.samples_seen,
            self.predictions_emitted,
            self.sample_buffer.copy(),
        )


@dataclass(frozen=True)
class Prediction:
    at_ms: int
    label: int
    probs: np.ndarray

    @property
    def top_prob(self) -> float:
        return float(self.probs[self.label])


class NoFramesError(RuntimeError):
    """Classification requested before the stream produced any frame."""


def init_stream(hp: Hyperparams, dtype=np.float32) -> StreamState:
    return StreamState(
        pcen_state=PcenState(np.zeros(N_FEATURES)),
        conv_history=np.zeros((hp.m - 1, N_FEATURES), dtype=dtype),
        gru_hidden=np.zeros(hp.k, dtype=dtype),
        max_state=None,
    )


def state_size_bytes(st: StreamState, hp: Hyperparams) -> int:
    """Bytes of the recurrent core: conv history, GRU hidden state, running max.

    The running max is counted at its full ``d`` size from the start; it is
    preallocated storage even while still at its identity.
    """
    history = st.conv_history.size if hp.has_conv else 0
    pool = hp.d if hp.has_pool else 0
    return REAL_BYTES * (history + st.gru_hidden.size + pool)


def auxiliary_state_bytes(st: StreamState, frame_cfg: FrameConfig = DEFAULT_FRAME) -> dict[str, int]:
    """State that exists but is outside the core figure, at its maximum size."""
    return {
        "pcen_smoother": REAL_BYTES * st.pcen_state.m.size,
        "sample_buffer": 2 * (frame_cfg.window - 1),  # int16 PCM
    }


def step_frame(st: StreamState, window: np.ndarray, w: dict, hp: Hyperparams,
               pcen_cfg: PcenConfig = DEFAULT_PCEN, frame_cfg: FrameConfig = DEFAULT_FRAME) -> None:
    """Advance the model state by one analysis window (mutates ``st``)."""
    frame, st.pcen_state = pcen_step(mel_energies(window, frame_cfg), st.pcen_state, pcen_cfg)
    dtype = st.gru_hidden.dtype
    frame = frame.astype(dtype)
    if hp.has_conv:
        stacked = np.concatenate([st.conv_history, frame[None]], axis=0)
        x = causal_conv(stacked, w, hp).reshape(-1)
        st.conv_history = stacked[1:]
    else:
        x = frame
    st.gru_hidden = gru_step(x, st.gru_hidden, w)
    if hp.has_pool:
        feat = feature_conv(st.gru_hidden, w)
        st.max_state = feat if st.max_state is None else np.maximum(st.max_state, feat)
    st.frames_seen += 1


def current_probs(st: StreamState, w: dict, hp: Hyperparams) -> np.ndarray:
    if st.frames_seen == 0:
        raise NoFramesError("no audio frame has been processed yet")
    return classify(context_vector(st.max_state, st.gru_hidden, hp), w)


def push_samples(
    st: StreamState,
    samples: np.ndarray,
    w: dict,
    hp: Hyperparams,
    interval_ms: int = 100,
    pcen_cfg: PcenConfig = DEFAULT_PCEN,
    frame_cfg: FrameConfig = DEFAULT_FRAME,
) -> tuple[StreamState, list[Prediction]]:
    """Feed unit-scale samples; returns the advanced state and any predictions due.

    The input state is not modified.
    """
    st = st.copy()
    samples = np.asarray(samples, dtype=np.float64)
    interval = SAMPLE_RATE * interval_ms // 1000
    if interval < 1:
        raise ValueError("prediction interval shorter than one sample")
    win, hop = frame_cfg.window, frame_cfg.hop
    buf = np.concatenate([st.sample_buffer, samples])
    buf_start = st.samples_seen - len(st.sample_buffer)  # stream index of buf[0]
    end = st.samples_seen + len(samples)
    preds = []

    while True:
        next_hop = win + hop * st.frames_seen  # stream sample count completing the next frame
        next_pred = interval * (st.predictions_emitted + 1)
        if next_hop <= end and next_hop <= next_pred:
            lo = next_hop - win - buf_start
            step_frame(st, buf[lo: lo + win], w, hp, pcen_cfg, frame_cfg)
        elif next_pred <= end:
            st.predictions_emitted += 1
            if st.frames_seen:
                probs = current_probs(st, w, hp)
                preds.append(Prediction(next_pred * 1000 // SAMPLE_RATE, int(np.argmax(probs)), probs))
        else:
            break

    # Keep only the samples the next window still needs.
    keep_from = hop * st.frames_seen  # start of the next window
    st.sample_buffer = buf[keep_from - buf_start:].copy()
    st.samples_seen = end
    return st, preds


def stream_clip(samples: np.ndarray, w: dict, hp: Hyperparams, chunk: int | None = None,
                interval_ms: int = 100, dtype=np.float32, **cfg) -> tuple[StreamState, list[Prediction]]:
    """Run a whole clip through a fresh stream in ``chunk``-sized pieces."""
    st = init_stream(hp, dtype)
    samples = np.asarray(samples, dtype=np.float64)
    chunk = chunk or max(len(samples), 1)
    preds = []
    for i in range(0, len(samples), chunk):
        st, p = push_samples(st, samples[i: i + chunk], w, hp, interval_ms, **cfg)
        preds.extend(p)
    return st, preds


def profile_stream(samples: np.ndarray, w: dict, hp: Hyperparams, interval_ms: int = 100,
                   dtype=np.float32) -> tuple[np.ndarray, float]:
    """Wall time of every hop (fed one hop of samples at a time) and the real-time factor."""
    hop = DEFAULT_FRAME.hop
    samples = np.asarray(samples, dtype=np.float64)
    st = init_stream(hp, dtype)
    times = []
    start = time.perf_counter()
    for i in range(0, len(samples), hop):
        t0 = time.perf_counter()
        st, _ = push_samples(st, samples[i: i + hop], w, hp, interval_ms)
        times.append(time.perf_counter() - t0)
    total = time.perf_counter() - start
    return np.array(times), total / (len(samples) / SAMPLE_RATE)


def latency_trend(times: np.ndarray) -> dict[str, float]:
    """Least-squares slope of per-hop latency against hop index."""
    from scipy.stats import linregress

    fit = linregress(np.arange(len(times)), times)
    return {
        "slope_s_per_hop": float(fit.slope),
        "slope_stderr": float(fit.stderr),
        "p_value": float(fit.pvalue),
        "median_s": float(np.median(times)),
        "p99_s": float(np.percentile(times, 99)),
        "drift_over_stream_s": float(fit.slope * len(times)),
    }


def paired_latency_trend(samples: np.ndarray, w: dict, hp: Hyperparams, reset_every: int = 100,
                         seed: int = 0, dtype=np.float32) -> dict[str, float]:
    """Latency trend of a long stream, measured against a constantly restarted one.

    Each hop of the long stream is timed back to back with a hop of a
    reference stream that restarts every ``reset_every`` hops, in random
    order. Regressing the per-hop difference on hop index cancels machine
    drift shared by both, leaving only the dependence on stream length.
    """
    from scipy.stats import linregress

    hop = DEFAULT_FRAME.hop
    samples = np.asarray(samples, dtype=np.float64)
    order = np.random.default_rng(seed).random(len(samples) // hop) < 0.5
    long_st = init_stream(hp, dtype)
    ref_st = init_stream(hp, dtype)
    t_long, t_ref = [], []
    for j in range(len(samples) // hop):
        if j % reset_every == 0:
            ref_st = init_stream(hp, dtype)
        jr = j % reset_every
        a, b = samples[j * hop: (j + 1) * hop], samples[jr * hop: (jr + 1) * hop]
        for which in ((0, 1) if order[j] else (1, 0)):
            t0 = time.perf_counter()
            if which == 0:
                long_st, _ = push_samples(long_st, a, w, hp)
                t_long.append(time.perf_counter() - t0)
            else:
                ref_st, _ = push_samples(ref_st, b, w, hp)
                t_ref.append(time.perf_counter() - t0)
    t_long, t_ref = np.array(t_long), np.array(t_ref)
    diff = t_long - t_ref
    fit = linregress(np.arange(len(diff)), diff)
    return {
        "slope_s_per_hop": float(fit.slope),
        "p_value": float(fit.pvalue),
        "median_s": float(np.median(t_long)),
        "relative_drift": float(fit.slope * len(diff) / np.median(t_long)),
        "hops": len(diff),
    }
