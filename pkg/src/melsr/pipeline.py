"""End-to-end inference: roll-off detection, lowpass pre-processing, latent
diffusion mel estimation, replacement post-processing, vocoding.

The replacement stages guarantee that everything below the detected
roll-off frequency is carried over verbatim from the observed input, in
the mel domain (bin copy) and in the waveform domain (STFT splice).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .audio import AudioBuffer, resample_cubic
from .bandwidth import FilterSpec, apply_filter, design_lowpass, estimate_rolloff
from .diffusion import LDMBundle, SamplerConfig, ddim_sample
from .errors import InputTooShort, ShapeMismatch, SilentInput
from .spectral import (
    ComplexSpectrogram,
    LogMelSpectrogram,
    SpectralConfig,
    istft,
    mel_band_edges,
    mel_to_wav_reference,
    stft,
    wav_to_logmel,
)

TARGET_RATE = 48000
MIN_DURATION_S = 0.3

# above this fraction of the input Nyquist the pre-processing lowpass is a
# no-op by intent (nothing left to remove) and is skipped: a causal
# order-8 Chebyshev driven that close to Nyquist only adds group-delay
# distortion.
_BYPASS_FRACTION = 0.95

_PREPROCESS_FILTER_ORDER = 8


@dataclass
class SRResult:
    """Output bundle of one super-resolution run."""

    audio: AudioBuffer
    detected_rolloff: float
    mel_estimate: LogMelSpectrogram
    timing: dict[str, float] = field(default_factory=dict)  # stage -> milliseconds


def _rolloff_config(sample_rate: int) -> SpectralConfig:
    return SpectralConfig(n_fft=2048, hop=480, sample_rate=sample_rate,
                          n_mels=128, mel_fmax=sample_rate / 2.0)


def preprocess(input_buf: AudioBuffer) -> tuple[AudioBuffer, float]:
    """Detect the 0.99 roll-off, lowpass at it, and resample to 48 kHz.

    Returns (x_h at 48 kHz, detected roll-off in Hz). The order-8 Chebyshev
    type-I lowpass runs at the input rate; it is skipped when the roll-off
    sits within 5% of the input Nyquist.
    """
    if input_buf.energy() <= 0.0:
        raise SilentInput("cannot upsample silence")
    spec = stft(input_buf, _rolloff_config(input_buf.sample_rate))
    c = estimate_rolloff(spec, 0.99)
    nyq = input_buf.nyquist
    filtered = input_buf
    if c < _BYPASS_FRACTION * nyq:
        kernel = design_lowpass(
            FilterSpec(family="chebyshev1", order=_PREPROCESS_FILTER_ORDER, cutoff_hz=c),
            input_buf.sample_rate)
        filtered = apply_filter(input_buf, kernel)
    return resample_cubic(filtered, TARGET_RATE), c


def replace_low_mel(est: LogMelSpectrogram, obs: LogMelSpectrogram,
                    c: float) -> LogMelSpectrogram:
    """Copy mel bins whose upper band edge is at or below c from obs into est."""
    if est.values.shape != obs.values.shape:
        raise ShapeMismatch("mel spectrograms must share a shape")
    upper = mel_band_edges(est.config)[2]
    keep_obs = upper <= c
    out = est.values.copy()
    out[:, keep_obs] = obs.values[:, keep_obs]
    return LogMelSpectrogram(out, est.config)


def replace_low_wave(est: AudioBuffer, obs: AudioBuffer, c: float,
                     cfg: SpectralConfig | None = None) -> AudioBuffer:
    """Waveform-domain splice: STFT bins below c from obs, the rest from est."""
    if est.sample_rate != obs.sample_rate or len(est) != len(obs):
        raise ShapeMismatch("buffers must share rate and length")
    cfg = cfg or SpectralConfig(sample_rate=est.sample_rate,
                                mel_fmax=est.sample_rate / 2.0)
    s_est = stft(est, cfg)
    s_obs = stft(obs, cfg)
    low = cfg.bin_frequencies() < c
    values = s_est.values.copy()
    values[:, low] = s_obs.values[:, low]
    return istft(ComplexSpectrogram(values, cfg, len(est)))


@dataclass
class SRModels:
    """Model slots for the pipeline: codec, diffusion bundle, vocoder.

    vocoder: callable (LogMelSpectrogram, length_samples) -> AudioBuffer;
    None selects the reference phase-reconstruction inverter.
    """

    codec: object
    ldm: LDMBundle
    vocoder: object | None = None
    vocoder_iters: int = 32


def upsample(input_buf: AudioBuffer, models: SRModels,
             cfg: SamplerConfig | None = None,
             spec_cfg: SpectralConfig | None = None) -> SRResult:
    """Run the full two-stage super-resolution pipeline on one clip.

    Stages: preprocess -> log-mel -> encode conditioning -> DDIM sampling
    -> decode -> mel-domain replacement -> vocoder -> waveform-domain
    replacement. Deterministic given the sampler seed.
    """
    if input_buf.duration < MIN_DURATION_S:
        raise InputTooShort(f"need >= {MIN_DURATION_S} s of audio")
    cfg = cfg or SamplerConfig()
    spec_cfg = spec_cfg or SpectralConfig()
    timing: dict[str, float] = {}

    def clock(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        timing[name] = (time.perf_counter() - t0) * 1e3
        return out

    x_h, c = clock("preprocess", preprocess, input_buf)
    obs_mel = clock("logmel", wav_to_logmel, x_h, spec_cfg)
    cond_latent = clock("encode", models.codec.encode, obs_mel)

    scale = models.ldm.latent_scale
    cond = np.asarray(cond_latent.values, dtype=np.float32) * scale
    rng = np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()
    z_hat = ddim_sample(models.ldm.denoiser_fn(), cond, models.ldm.sched, cfg, rng)
    timing["sample"] = (time.perf_counter() - t0) * 1e3

    from .codec import LatentTensor  # local import avoids a cycle at module load
    z = LatentTensor(np.asarray(z_hat, dtype=np.float64) / scale,
                     n_frames=cond_latent.n_frames)
    est_mel = clock("decode", models.codec.decode, z)
    mel_final = clock("replace_mel", replace_low_mel, est_mel, obs_mel, c)

    t0 = time.perf_counter()
    if models.vocoder is not None:
        est_wav = models.vocoder(mel_final, len(x_h))
    else:
        est_wav = mel_to_wav_reference(mel_final, iters=models.vocoder_iters,
                                       length=len(x_h))
    timing["vocoder"] = (time.perf_counter() - t0) * 1e3

    out = clock("replace_wave", replace_low_wave, est_wav, x_h, c, spec_cfg)
    return SRResult(audio=out, detected_rolloff=c, mel_estimate=mel_final,
                    timing=timing)
