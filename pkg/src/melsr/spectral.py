"""STFT analysis/synthesis, log-mel features, and a reference mel inverter.

Conventions fixed here and relied on everywhere else:

* frames are rows: spectrogram arrays are (n_frames, n_bins);
* analysis uses a periodic Hann window with reflect padding of n_fft/2 on
  both ends, giving m = floor(len / hop) + 1 frames;
* mel filters are triangles on the HTK mel scale, averaged over each STFT
  bin interval (so no filter or bin is ever empty) and normalized to unit
  weight per filter;
* log-mel values are log10(max(mel_magnitude, log_floor)).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio import AudioBuffer
from .errors import NonInvertibleConfig, RateMismatch

_BMEL_MAGIC = b"BMEL"
_BMEL_VERSION = 1


@dataclass(frozen=True)
class SpectralConfig:
    """Analysis parameters for STFT and mel features."""

    n_fft: int = 2048
    hop: int = 480
    sample_rate: int = 48000
    n_mels: int = 256
    mel_fmin: float = 0.0
    mel_fmax: float = 24000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if not 0 < self.hop <= self.n_fft:
            raise ValueError("hop must be in (0, n_fft]")
        if not self.n_mels < self.n_fft // 2 + 1:
            raise ValueError("n_mels must be below the bin count")
        if not self.mel_fmax <= self.sample_rate / 2:
            raise ValueError("mel_fmax above Nyquist")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def bin_hz(self) -> float:
        """Width of one STFT bin in Hz."""
        return self.sample_rate / self.n_fft

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.bin_hz

    def frame_count(self, n_samples: int) -> int:
        return n_samples // self.hop + 1


@dataclass
class ComplexSpectrogram:
    """Complex STFT values, frames x bins, plus the config that produced them."""

    values: np.ndarray
    config: SpectralConfig
    n_samples: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2 or self.values.shape[1] != self.config.n_bins:
            raise ValueError("spectrogram must be (frames, n_fft/2+1)")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)


@dataclass
class LogMelSpectrogram:
    """log10 mel magnitudes, frames x n_mels, floored at log10(log_floor)."""

    values: np.ndarray
    config: SpectralConfig

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != self.config.n_mels:
            raise ValueError("log-mel must be (frames, n_mels)")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def linear(self) -> np.ndarray:
        """Mel magnitudes back on a linear scale."""
        return 10.0 ** self.values


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (DFT-even)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _frame(padded: np.ndarray, n_fft: int, hop: int, m: int) -> np.ndarray:
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop]
    return frames[:m]


def stft(buf: AudioBuffer, cfg: SpectralConfig) -> ComplexSpectrogram:
    """Short-time Fourier transform with centered reflect padding."""
    if buf.sample_rate != cfg.sample_rate:
        raise RateMismatch(f"buffer at {buf.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
    x = buf.samples
    pad = cfg.n_fft // 2
    if len(x) <= pad:
        raise ValueError(f"buffer too short for n_fft={cfg.n_fft} analysis (need > {pad} samples)")
    xp = np.pad(x, (pad, pad), mode="reflect")
    m = cfg.frame_count(len(x))
    frames = _frame(xp, cfg.n_fft, cfg.hop, m)
    spec = np.fft.rfft(frames * hann_window(cfg.n_fft), axis=1)
    return ComplexSpectrogram(spec, cfg, len(x))


def istft(spec: ComplexSpectrogram, length: int | None = None) -> AudioBuffer:
    """Weighted overlap-add inverse of `stft`.

    Exact (to rounding) for unmodified spectrograms; the least-squares-style
    synthesis of choice for modified ones (phase reconstruction, splicing).
    """
    cfg = spec.config
    n = length if length is not None else spec.n_samples
    pad = cfg.n_fft // 2
    m = spec.n_frames
    total = (m - 1) * cfg.hop + cfg.n_fft
    w = hann_window(cfg.n_fft)
    frames = np.fft.irfft(spec.values, n=cfg.n_fft, axis=1) * w

    out = np.zeros(total)
    den = np.zeros(total)
    w2 = w * w
    for i in range(m):
        s = i * cfg.hop
        out[s:s + cfg.n_fft] += frames[i]
        den[s:s + cfg.n_fft] += w2

    lo, hi = pad, pad + n
    if hi > total:
        raise NonInvertibleConfig("spectrogram too short for requested length")
    d = den[lo:hi]
    if d.min() < 1e-8:
        raise NonInvertibleConfig("window/hop overlap leaves gaps (COLA violated)")
    return AudioBuffer(out[lo:hi] / d, cfg.sample_rate)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: SpectralConfig) -> np.ndarray:
    """Triangular HTK-mel filterbank, (n_mels, n_bins), unit weight per filter.

    Each triangle is integrated over the frequency interval of every STFT
    bin rather than point-sampled at bin centers. With many mel bands the
    low-frequency triangles are narrower than one bin; integration keeps
    every filter non-empty and every bin covered.
    """
    edges_mel = np.linspace(hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax), cfg.n_mels + 2)
    edges = mel_to_hz(edges_mel)  # (n_mels+2,)
    e0 = edges[:-2][:, None]
    e1 = edges[1:-1][:, None]
    e2 = edges[2:][:, None]

    # antiderivative of the unit-height triangle, evaluated at bin-interval edges
    bin_edges = (np.arange(cfg.n_bins + 1) - 0.5) * cfg.bin_hz  # (n_bins+1,)
    f = bin_edges[None, :]
    w_up = np.maximum(e1 - e0, 1e-12)
    w_dn = np.maximum(e2 - e1, 1e-12)
    rise = np.clip(f - e0, 0.0, w_up)
    fall = np.clip(f - e1, 0.0, w_dn)
    cdf = rise**2 / (2 * w_up) + fall - fall**2 / (2 * w_dn)

    weights = np.diff(cdf, axis=1)
    sums = weights.sum(axis=1, keepdims=True)
    return weights / sums


@lru_cache(maxsize=8)
def mel_band_edges(cfg: SpectralConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(lower, center, upper) edge frequencies in Hz of each mel filter."""
    edges_mel = np.linspace(hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax), cfg.n_mels + 2)
    edges = mel_to_hz(edges_mel)
    return edges[:-2], edges[1:-1], edges[2:]


@lru_cache(maxsize=8)
def _mel_lift(cfg: SpectralConfig) -> np.ndarray:
    """Transpose-normalized pseudo-inverse of the filterbank, (n_mels, n_bins).

    Column b holds convex weights over the filters covering bin b, so the
    lifted magnitude at b is an interpolation of nearby mel magnitudes.
    """
    w = mel_filterbank(cfg)
    return w / w.sum(axis=0, keepdims=True)


def wav_to_logmel(buf: AudioBuffer, cfg: SpectralConfig) -> LogMelSpectrogram:
    """Log-mel magnitudes of a waveform: log10(max(F |STFT|, floor))."""
    spec = stft(buf, cfg)
    mel = spec.magnitude() @ mel_filterbank(cfg).T
    return LogMelSpectrogram(np.log10(np.maximum(mel, cfg.log_floor)), cfg)


def logmel_of_magnitude(mag: np.ndarray, cfg: SpectralConfig) -> LogMelSpectrogram:
    """Log-mel of a precomputed magnitude spectrogram (frames x bins)."""
    mel = mag @ mel_filterbank(cfg).T
    return LogMelSpectrogram(np.log10(np.maximum(mel, cfg.log_floor)), cfg)


def mel_to_wav_reference(mel: LogMelSpectrogram, iters: int = 32,
                         length: int | None = None) -> AudioBuffer:
    """Reference mel-to-waveform inverter (vocoder stand-in).

    Lifts mel magnitudes to STFT magnitudes with the transpose-normalized
    pseudo-inverse, then runs `iters` rounds of alternating projection
    (Griffin-Lim) starting from zero phase. Deterministic.

    Args:
        mel: log-mel spectrogram to invert.
        iters: phase-reconstruction rounds, >= 1.
        length: output sample count; defaults to (frames - 1) * hop.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    cfg = mel.config
    n = length if length is not None else (mel.n_frames - 1) * cfg.hop
    target = mel.linear() @ _mel_lift(cfg)  # (m, n_bins) magnitudes

    spec = ComplexSpectrogram(target.astype(np.complex128), cfg, n)
    for _ in range(iters):
        x = istft(spec, length=n)
        remade = stft(x, cfg)
        mag = np.abs(remade.values)
        phase = np.where(mag > 0, remade.values / np.maximum(mag, 1e-300), 1.0)
        spec = ComplexSpectrogram(target * phase, cfg, n)
    return istft(spec, length=n)


def save_logmel(mel: LogMelSpectrogram, path: str | Path) -> None:
    """Serialize to the BMEL binary format.

    Layout: 32-byte header = magic "BMEL", u32 version, u32 frames, u32
    n_mels, u32 sample_rate, u32 n_fft, u32 hop, u32 reserved (all
    little-endian), followed by frames*n_mels float32 values, row-major.
    """
    m, n = mel.values.shape
    header = _BMEL_MAGIC + struct.pack(
        "<7I", _BMEL_VERSION, m, n, mel.config.sample_rate,
        mel.config.n_fft, mel.config.hop, 0,
    )
    Path(path).write_bytes(header + mel.values.astype("<f4").tobytes())


def load_logmel(path: str | Path) -> LogMelSpectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < 32 or raw[:4] != _BMEL_MAGIC:
        raise ValueError(f"{path}: not a BMEL file")
    version, m, n, rate, n_fft, hop, _ = struct.unpack("<7I", raw[4:32])
    if version != _BMEL_VERSION:
        raise ValueError(f"{path}: unsupported BMEL version {version}")
    values = np.frombuffer(raw[32:32 + 4 * m * n], dtype="<f4").astype(np.float64)
    if values.size != m * n:
        raise ValueError(f"{path}: truncated BMEL payload")
    cfg = SpectralConfig(n_fft=n_fft, hop=hop, sample_rate=rate, n_mels=n,
                         mel_fmax=rate / 2.0)
    return LogMelSpectrogram(values.reshape(m, n), cfg)
