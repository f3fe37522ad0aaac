"""Synthetic "voice query" corpus for desk-scale experiments.

Each query class is a fixed ordered sequence of three tone segments drawn
from a shared tone set, so several classes reuse the same tones in a
different order and can only be told apart by temporal structure. The
unknown class is coloured, band-limited, amplitude-modulated noise.
"""

from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np

from .data_io import SAMPLE_RATE, DatasetManifest, Waveform, split_indices, write_wav

TONES_HZ = (450.0, 800.0, 1250.0, 1900.0, 2700.0)


def class_patterns(n_classes: int = 12, seed: int = 7) -> list[tuple[float, ...]]:
    """Distinct tone orderings; permutations of the same triple are taken together."""
    rng = np.random.default_rng(seed)
    triples = list(itertools.combinations(TONES_HZ, 3))
    rng.shuffle(triples)
    patterns = []
    for triple in triples:
        perms = list(itertools.permutations(triple))
        rng.shuffle(perms)
        patterns.extend(perms[:2])
        if len(patterns) >= n_classes:
            break
    if len(patterns) < n_classes:
        raise ValueError(f"cannot build {n_classes} distinct patterns from {len(TONES_HZ)} tones")
    return patterns[:n_classes]


def _tone(freq: float, n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    phase = rng.uniform(0, 2 * np.pi)
    x = np.sin(2 * np.pi * freq * t + phase) + 0.3 * np.sin(4 * np.pi * freq * t + phase)
    ramp = min(n // 4, 80)
    env = np.ones(n)
    env[:ramp] = np.linspace(0, 1, ramp)
    env[n - ramp:] = np.linspace(1, 0, ramp)
    return x * env


def query_clip(pattern, rng: np.random.Generator, duration_s: float = 1.0) -> np.ndarray:
    n = int(duration_s * SAMPLE_RATE)
    x = rng.normal(0, rng.uniform(0.002, 0.01), n)
    pos = int(rng.uniform(0.03, 0.2) * SAMPLE_RATE)
    amp = rng.uniform(0.1, 0.4)
    for freq in pattern:
        seg = int(rng.uniform(0.14, 0.2) * SAMPLE_RATE)
        seg = min(seg, n - pos)
        if seg <= 0:
            break
        x[pos: pos + seg] += amp * rng.uniform(0.8, 1.2) * _tone(freq * rng.uniform(0.98, 1.02), seg, rng)
        pos += seg + int(rng.uniform(0.02, 0.05) * SAMPLE_RATE)
    return np.clip(x, -1, 1)


def noise_clip(rng: np.random.Generator, duration_s: float = 1.0) -> np.ndarray:
    n = int(duration_s * SAMPLE_RATE)
    spec = np.fft.rfft(rng.normal(size=n))
    freqs = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
    tilt = rng.uniform(-1.0, 0.5)  # spectral slope, white to brown-ish
    spec *= np.maximum(freqs, 20.0) ** (tilt / 2)
    lo, hi = sorted(rng.uniform(0, 8000, 2))
    spec[(freqs < lo) | (freqs > hi + 500)] *= 0.1
    x = np.fft.irfft(spec, n)
    x /= np.abs(x).max() + 1e-12
    t = np.arange(n) / SAMPLE_RATE
    env = 1 + rng.uniform(0, 0.9) * np.sin(2 * np.pi * rng.uniform(0.5, 6) * t + rng.uniform(0, 2 * np.pi))
    return np.clip(x * env * rng.uniform(0.02, 0.4) / 2, -1, 1)


def make_corpus(n_queries: int = 12, per_class: int = 200, n_unknown: int = 2000, seed: int = 0,
                duration_s: float = 1.0) -> list[tuple[Waveform, int]]:
    """Examples grouped by class (queries 0..n-1, then unknown = n), in generation order."""
    rng = np.random.default_rng(seed)
    out = []
    for label, pattern in enumerate(class_patterns(n_queries)):
        out.extend((Waveform(query_clip(pattern, rng, duration_s)), label) for _ in range(per_class))
    out.extend((Waveform(noise_clip(rng, duration_s)), n_queries) for _ in range(n_unknown))
    return out


def split_examples(examples):
    """Per-class 80/10/10 split in generation order (same rule as the manifest split)."""
    parts = split_indices([label for _, label in examples])
    return tuple([examples[i] for i in p] for p in parts)


def write_corpus(root, examples, n_queries: int) -> Path:
    """Write WAVs plus ``manifest.tsv`` under ``root``; returns the manifest path."""
    root = Path(root)
    (root / "wav").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (w, label) in enumerate(examples):
        rel = f"wav/{label:03d}_{i:05d}.wav"
        write_wav(root / rel, w)
        records.append((rel, label))
    path = root / "manifest.tsv"
    path.write_text(DatasetManifest(records, n_queries).dumps())
    return path
