"""Synthetic wideband test clips: harmonic tones over a noise bed.

Every clip carries energy across the full 24 kHz band (harmonic stacks
reaching ~22 kHz, a gently tilted broadband noise floor, and a few noise
bursts) so that bandwidth-extension experiments have real high-frequency
structure to recover. Fully deterministic per seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import AudioBuffer, write_wav

_F0_RANGE = (150.0, 420.0)
_HARMONIC_TOP_HZ = 22000.0
_NOISE_BED_DB = -26.0
_BURST_DB = -15.0


def make_toy_clip(seed: int, sample_rate: int = 48000, duration: float = 1.0) -> AudioBuffer:
    rng = np.random.default_rng(seed)
    n = int(round(sample_rate * duration))
    t = np.arange(n) / sample_rate

    f0 = rng.uniform(*_F0_RANGE)
    decay = rng.uniform(0.6, 1.1)
    n_harm = int(_HARMONIC_TOP_HZ / f0)
    harm = np.zeros(n)
    for h in range(1, n_harm + 1):
        amp = h ** (-decay)
        harm += amp * np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi))
    harm /= np.sqrt(np.mean(harm**2))

    # attack/decay envelope so frames differ
    att = rng.uniform(0.01, 0.08) * duration
    rel = rng.uniform(0.1, 0.5) * duration
    env = np.minimum(np.minimum(t / att, 1.0), np.exp(-(np.maximum(t - (duration - rel), 0)) / rel * 3))
    harm *= env

    # tilted broadband noise bed (unit rms before leveling)
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec *= (1.0 + freqs / 2000.0) ** -0.35
    bed = np.fft.irfft(spec, n=n)
    bed /= np.sqrt(np.mean(bed**2))
    bed *= 10.0 ** (_NOISE_BED_DB / 20.0)

    bursts = np.zeros(n)
    for _ in range(int(rng.integers(1, 4))):
        width = int(rng.uniform(0.03, 0.12) * sample_rate)
        start = int(rng.integers(0, max(n - width, 1)))
        win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(width) / width)
        bursts[start:start + width] += win * rng.standard_normal(width) * 10.0 ** (_BURST_DB / 20.0)

    x = harm + bed + bursts
    x *= 0.5 / np.max(np.abs(x))
    return AudioBuffer(x, sample_rate)


def write_toy_corpus(out_dir: str | Path, n_clips: int, seed: int = 0,
                     sample_rate: int = 48000, duration: float = 1.0) -> list[Path]:
    """Write n_clips deterministic WAV files; returns the sorted paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_clips):
        clip = make_toy_clip(seed + i, sample_rate, duration)
        path = out / f"clip_{i:04d}.wav"
        write_wav(clip, path, encoding="float32")
        paths.append(path)
    return paths
