"""Training-time waveform augmentation.

All transforms take and return :class:`Waveform` in unit scale and draw
randomness only from the ``rng`` they are handed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import hilbert

from .data_io import FULL_SCALE, SAMPLE_RATE, Waveform

PEAK = 32767 / FULL_SCALE


@dataclass(frozen=True)
class AugmentConfig:
    gauss_sigma: float = 0.003
    sp_prob: float = 1e-4
    band_low_range: tuple[float, float] = (0.0, 1700.0)
    band_high_range: tuple[float, float] = (1800.0, 3300.0)
    suppress_factor: float = 0.5
    pitch_shift_hz: float = 33.0
    # (noise, band, pitch)
    apply_probs: tuple[float, float, float] = field(default=(0.5, 0.5, 0.5))

    def __post_init__(self):
        if not 0 <= self.sp_prob <= 1:
            raise ValueError("sp_prob must lie in [0, 1]")
        if self.gauss_sigma < 0:
            raise ValueError("gauss_sigma must be non-negative")
        if not all(0 <= p <= 1 for p in self.apply_probs):
            raise ValueError("apply_probs must lie in [0, 1]")


def add_noise(w: Waveform, rng: np.random.Generator, sigma: float = 0.003, sp_prob: float = 1e-4) -> Waveform:
    """Gaussian noise, then salt-and-pepper clicks at full scale."""
    x = w.unit()
    if sigma > 0:
        x = np.clip(x + rng.normal(0.0, sigma, size=x.shape), -1.0, PEAK)
    if sp_prob > 0:
        hit = rng.random(x.shape) < sp_prob
        signs = np.where(rng.random(x.shape) < 0.5, -PEAK, PEAK)
        x = np.where(hit, signs, x)
    return Waveform(x)


def band_suppress(w: Waveform, a: float, b: float, factor: float = 0.5) -> Waveform:
    """Scale spectral content outside ``[a, b]`` Hz by ``factor``."""
    if not 0 <= a < b <= SAMPLE_RATE / 2:
        raise ValueError(f"invalid band [{a}, {b}] Hz")
    x = w.unit()
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / SAMPLE_RATE)
    spec[(freqs < a) | (freqs > b)] *= factor
    return Waveform(np.fft.irfft(spec, n=len(x)))


def pitch_shift(w: Waveform, delta_hz: float) -> Waveform:
    """Translate every frequency component by ``delta_hz`` (single-sideband shift)."""
    if abs(delta_hz) > 33.0 + 1e-9:
        raise ValueError("pitch shift is limited to +-33 Hz")
    x = w.unit()
    if delta_hz == 0:
        return Waveform(x.copy())
    t = np.arange(len(x)) / SAMPLE_RATE
    shifted = np.real(hilbert(x) * np.exp(2j * np.pi * delta_hz * t))
    return Waveform(np.clip(shifted, -1.0, PEAK))


def augment(w: Waveform, cfg: AugmentConfig, rng: np.random.Generator) -> Waveform:
    """Apply noise, band suppression and pitch shift, each with its own probability."""
    p_noise, p_band, p_pitch = cfg.apply_probs
    # Draw every random number up front so the stream consumption is fixed per call.
    use = rng.random(3) < np.array([p_noise, p_band, p_pitch])
    a = rng.uniform(*cfg.band_low_range)
    b = rng.uniform(*cfg.band_high_range)
    delta = cfg.pitch_shift_hz * (1 if rng.random() < 0.5 else -1)
    noise_seed = rng.integers(2**63)

    out = Waveform(w.unit())
    if use[1]:
        out = band_suppress(out, a, b, cfg.suppress_factor)
    if use[2]:
        out = pitch_shift(out, delta)
    if use[0]:
        out = add_noise(out, np.random.default_rng(noise_seed), cfg.gauss_sigma, cfg.sp_prob)
    return out
