"""Mel + PCEN feature frontend, usable offline or one hop at a time."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.signal import get_window

from .data_io import SAMPLE_RATE, Waveform


@dataclass(frozen=True)
class FrameConfig:
    window_ms: int = 30
    hop_ms: int = 10
    sample_rate: int = SAMPLE_RATE
    n_mels: int = 40
    fft_size: int = 512
    fmin: float = 0.0
    fmax: float = 8000.0

    def __post_init__(self):
        if self.fft_size < self.window:
            raise ValueError("fft_size must cover the analysis window")

    @property
    def window(self) -> int:
        return self.sample_rate * self.window_ms // 1000

    @property
    def hop(self) -> int:
        return self.sample_rate * self.hop_ms // 1000


@dataclass(frozen=True)
class PcenConfig:
    s: float = 0.025
    alpha: float = 0.98
    delta: float = 2.0
    r: float = 0.5
    eps: float = 1e-6

    def __post_init__(self):
        if not (0 < self.s <= 1 and 0 < self.alpha <= 1 and self.delta > 0 and 0 < self.r <= 1 and self.eps > 0):
            raise ValueError(f"invalid PCEN constants: {self}")


@dataclass
class PcenState:
    m: np.ndarray = field(default_factory=lambda: np.zeros(40))
    initialized: bool = False

    def copy(self) -> "PcenState":
        return PcenState(self.m.copy(), self.initialized)


DEFAULT_FRAME = FrameConfig()
DEFAULT_PCEN = PcenConfig()


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: FrameConfig = DEFAULT_FRAME) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``(fft_size//2 + 1, n_mels)``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb.T


@lru_cache(maxsize=8)
def analysis_window(n: int) -> np.ndarray:
    w = get_window("hann", n)
    w.setflags(write=False)
    return w


def frame_signal(w: Waveform, cfg: FrameConfig = DEFAULT_FRAME) -> np.ndarray:
    """Overlapping analysis windows, shape ``(T, window)``; window t starts at ``hop*t``."""
    x = w.unit() if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if len(x) < cfg.window:
        raise ValueError(f"audio has {len(x)} samples, shorter than one {cfg.window}-sample window")
    count = (len(x) - cfg.window) // cfg.hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, cfg.window)[:: cfg.hop][:count]


def mel_energies(window: np.ndarray, cfg: FrameConfig = DEFAULT_FRAME) -> np.ndarray:
    """Mel-band power of one window, or of each row of a ``(T, window)`` stack."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape[-1] != cfg.window:
        raise ValueError(f"window must have {cfg.window} samples, got {window.shape[-1]}")
    spec = np.fft.rfft(window * analysis_window(cfg.window), n=cfg.fft_size)
    power = spec.real**2 + spec.imag**2
    return power @ mel_filterbank(cfg)


def pcen_step(e: np.ndarray, st: PcenState, cfg: PcenConfig = DEFAULT_PCEN) -> tuple[np.ndarray, PcenState]:
    """Advance the PCEN smoother by one frame; returns (output frame, new state)."""
    e = np.asarray(e, dtype=np.float64)
    m = e.copy() if not st.initialized else (1 - cfg.s) * st.m + cfg.s * e
    out = (e / (cfg.eps + m) ** cfg.alpha + cfg.delta) ** cfg.r - cfg.delta**cfg.r
    return out, PcenState(m, True)


def pcen_full(
    w: Waveform, cfg: PcenConfig = DEFAULT_PCEN, frame_cfg: FrameConfig = DEFAULT_FRAME
) -> np.ndarray:
    """Offline PCEN features ``(T, n_mels)`` from a fresh smoother state."""
    energies = mel_energies(frame_signal(w, frame_cfg), frame_cfg)
    out = np.empty_like(energies)
    st = PcenState(np.zeros(frame_cfg.n_mels))
    for t, e in enumerate(energies):
        out[t], st = pcen_step(e, st, cfg)
    return out


def dump_features(feats: np.ndarray) -> str:
    """One line per frame, space-separated decimals."""
    return "".join(" ".join(f"{v:.9g}" for v in row) + "\n" for row in feats)


def parse_features(text: str) -> np.ndarray:
    return np.array([[float(v) for v in line.split()] for line in text.splitlines() if line.strip()])
