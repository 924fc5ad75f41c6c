"""Lowpass design, degradation simulation, and roll-off estimation.

The degradation space: cutoff uniform in [2, 16] kHz, filter family uniform
over {Chebyshev type I, elliptic, Butterworth, boxcar-windowed sinc}, order
uniform in 2..10. IIR families are designed as analog prototypes with a
prewarped bilinear transform and realized as second-order sections;
"boxcar" is a rectangular-windowed sinc FIR applied center-aligned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .audio import AudioBuffer
from .errors import CutoffOutOfRange, SilentInput, UnstableDesign
from .spectral import (
    ComplexSpectrogram,
    LogMelSpectrogram,
    SpectralConfig,
    mel_band_edges,
    wav_to_logmel,
)

FAMILIES = ("chebyshev1", "elliptic", "butterworth", "boxcar")

CUTOFF_LOW_HZ = 2000.0
CUTOFF_HIGH_HZ = 16000.0
ORDER_RANGE = (2, 10)

_STABILITY_MARGIN = 1e-9
_DESIGN_RETRIES = 8


@dataclass(frozen=True)
class FilterSpec:
    """Lowpass design parameters."""

    family: str
    order: int
    cutoff_hz: float
    ripple_db: float = 0.05       # passband ripple (chebyshev1 / elliptic)
    stop_atten_db: float = 40.0   # stopband attenuation (elliptic)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown filter family {self.family!r}")
        if not ORDER_RANGE[0] <= self.order <= ORDER_RANGE[1]:
            raise ValueError(f"order must be in {ORDER_RANGE}")
        if self.cutoff_hz <= 0:
            raise CutoffOutOfRange(f"cutoff {self.cutoff_hz} Hz must be positive")


@dataclass(frozen=True)
class FilterKernel:
    """A realized lowpass: IIR second-order sections or FIR taps."""

    spec: FilterSpec
    sample_rate: int
    sos: np.ndarray | None = None   # (n_sections, 6)
    taps: np.ndarray | None = None  # odd-length, center-aligned

    @property
    def is_fir(self) -> bool:
        return self.taps is not None

    def pole_magnitudes(self) -> np.ndarray:
        """Magnitudes of all poles (empty for FIR)."""
        if self.is_fir:
            return np.zeros(0)
        mags = []
        for section in self.sos:
            mags.extend(np.abs(np.roots(np.concatenate(([1.0], section[4:6])))))
        return np.asarray(mags)

    def response(self, freqs_hz: np.ndarray) -> np.ndarray:
        """Complex frequency response H(e^{j 2 pi f / fs}) at the given Hz."""
        z = np.exp(-2j * np.pi * np.asarray(freqs_hz, dtype=np.float64) / self.sample_rate)
        if self.is_fir:
            return np.polynomial.polynomial.polyval(z, self.taps)
        h = np.ones_like(z)
        for b0, b1, b2, a0, a1, a2 in self.sos:
            h *= (b0 + b1 * z + b2 * z * z) / (a0 + a1 * z + a2 * z * z)
        return h


def design_lowpass(spec: FilterSpec, sample_rate: int) -> FilterKernel:
    """Design a lowpass kernel for the given family/order/cutoff.

    Raises:
        CutoffOutOfRange: cutoff not strictly inside (0, Nyquist).
        UnstableDesign: any IIR pole magnitude >= 1 - 1e-9.
    """
    nyq = sample_rate / 2.0
    if not 0.0 < spec.cutoff_hz < nyq:
        raise CutoffOutOfRange(f"cutoff {spec.cutoff_hz} Hz outside (0, {nyq})")

    if spec.family == "boxcar":
        fc = spec.cutoff_hz / sample_rate  # cycles per sample
        length = int(round(2.0 * spec.order * sample_rate / spec.cutoff_hz))
        length |= 1  # odd, so 'same' convolution is exactly center-aligned
        n = np.arange(length) - (length - 1) / 2.0
        taps = 2.0 * fc * np.sinc(2.0 * fc * n)
        taps /= taps.sum()  # unit DC gain
        return FilterKernel(spec, sample_rate, taps=taps)

    if spec.family == "chebyshev1":
        sos = sps.cheby1(spec.order, spec.ripple_db, spec.cutoff_hz,
                         btype="lowpass", fs=sample_rate, output="sos")
    elif spec.family == "elliptic":
        sos = sps.ellip(spec.order, spec.ripple_db, spec.stop_atten_db,
                        spec.cutoff_hz, btype="lowpass", fs=sample_rate, output="sos")
    elif spec.family == "butterworth":
        sos = sps.butter(spec.order, spec.cutoff_hz,
                         btype="lowpass", fs=sample_rate, output="sos")
    else:  # pragma: no cover - FilterSpec already validates
        raise ValueError(spec.family)

    kernel = FilterKernel(spec, sample_rate, sos=np.asarray(sos, dtype=np.float64))
    mags = kernel.pole_magnitudes()
    if mags.size and mags.max() >= 1.0 - _STABILITY_MARGIN:
        raise UnstableDesign(
            f"{spec.family} order {spec.order} at {spec.cutoff_hz:.1f} Hz: "
            f"pole magnitude {mags.max():.12f}")
    return kernel


def apply_filter(buf: AudioBuffer, kernel: FilterKernel) -> AudioBuffer:
    """Run the kernel over a buffer; output length equals input length.

    IIR kernels filter causally from zero state; the FIR boxcar is applied
    with 'same' convolution, so its linear-phase delay is compensated.
    """
    if kernel.sample_rate != buf.sample_rate:
        raise ValueError("kernel designed for a different sample rate")
    if kernel.is_fir:
        y = sps.fftconvolve(buf.samples, kernel.taps, mode="same")
    else:
        y = sps.sosfilt(kernel.sos, buf.samples)
    return AudioBuffer(y, buf.sample_rate)


def draw_filter_spec(rng: np.random.Generator) -> FilterSpec:
    """Draw one degradation filter from the training distribution."""
    cutoff = float(rng.uniform(CUTOFF_LOW_HZ, CUTOFF_HIGH_HZ))
    family = FAMILIES[int(rng.integers(0, len(FAMILIES)))]
    order = int(rng.integers(ORDER_RANGE[0], ORDER_RANGE[1] + 1))
    return FilterSpec(family=family, order=order, cutoff_hz=cutoff)


@dataclass
class SimulatedPair:
    """One training pair: degraded/clean log-mels plus the drawn filter."""

    lo_mel: LogMelSpectrogram
    hi_mel: LogMelSpectrogram
    cutoff_hz: float
    filter_spec: FilterSpec


def simulate_pair(hi: AudioBuffer, rng: np.random.Generator,
                  cfg: SpectralConfig | None = None) -> SimulatedPair:
    """Simulate a low/high-resolution log-mel pair from clean 48 kHz audio.

    Draws cutoff ~ U[2 kHz, 16 kHz], family uniform over the four families,
    order uniform in 2..10; lowpasses the clean signal and converts both
    sides to log-mel. Deterministic given the generator state. Unstable
    draws are re-drawn up to 8 times before raising.
    """
    cfg = cfg or SpectralConfig()
    if hi.sample_rate != cfg.sample_rate:
        raise ValueError(f"expected {cfg.sample_rate} Hz input")
    last_err: Exception | None = None
    for _ in range(_DESIGN_RETRIES):
        spec = draw_filter_spec(rng)
        try:
            kernel = design_lowpass(spec, hi.sample_rate)
        except UnstableDesign as exc:
            last_err = exc
            continue
        lo = apply_filter(hi, kernel)
        return SimulatedPair(
            lo_mel=wav_to_logmel(lo, cfg),
            hi_mel=wav_to_logmel(hi, cfg),
            cutoff_hz=spec.cutoff_hz,
            filter_spec=spec,
        )
    raise UnstableDesign(f"no stable design after {_DESIGN_RETRIES} draws") from last_err


def estimate_rolloff(spec_or_mel: ComplexSpectrogram | LogMelSpectrogram,
                     fraction: float = 0.99) -> float:
    """Smallest frequency below which `fraction` of the clip's energy lies.

    Energy is accumulated over the whole clip (all frames); resolution is
    one bin (STFT bin or mel band center). Mel inputs are exponentiated
    back to linear magnitude before squaring.

    Raises:
        SilentInput: total energy is zero.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    if isinstance(spec_or_mel, ComplexSpectrogram):
        energy = (np.abs(spec_or_mel.values) ** 2).sum(axis=0)
        freqs = spec_or_mel.config.bin_frequencies()
    else:
        energy = (spec_or_mel.linear() ** 2).sum(axis=0)
        freqs = mel_band_edges(spec_or_mel.config)[1]
    total = energy.sum()
    if total <= 0.0:
        raise SilentInput("cannot estimate roll-off of a silent clip")
    cum = np.cumsum(energy)
    idx = int(np.searchsorted(cum, fraction * total))
    idx = min(idx, len(freqs) - 1)
    return float(freqs[idx])


# --- degradation manifest (JSON-lines) ---

@dataclass(frozen=True)
class DegradationSample:
    """One reproducible degradation: source file, RNG seed, drawn filter."""

    input_path: str
    seed: int
    family: str
    order: int
    cutoff_hz: float


def write_manifest(records: list[DegradationSample], path: str | Path) -> None:
    """Write JSON-lines records {input_path, seed, family, order, cutoff_hz}."""
    lines = []
    for r in records:
        lines.append(json.dumps({
            "input_path": r.input_path,
            "seed": r.seed,
            "family": r.family,
            "order": r.order,
            "cutoff_hz": r.cutoff_hz,
        }, sort_keys=False))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> list[DegradationSample]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        records.append(DegradationSample(
            input_path=d["input_path"],
            seed=int(d["seed"]),
            family=d["family"],
            order=int(d["order"]),
            cutoff_hz=float(d["cutoff_hz"]),
        ))
    return records
