"""melsr: two-stage mel-domain audio super-resolution at desk scale.

Pipeline: detect the input roll-off, lowpass and cubic-resample to 48 kHz,
estimate the missing high-frequency log-mel content with a latent diffusion
model (velocity prediction, zero-terminal-SNR cosine schedule, DDIM), then
splice the observed low band back in before and after vocoding.
"""

from .audio import AudioBuffer, read_wav, resample_cubic, write_wav
from .bandwidth import (
    DegradationSample,
    FilterSpec,
    apply_filter,
    design_lowpass,
    estimate_rolloff,
    simulate_pair,
)
from .codec import LatentTensor, ReferenceCodec, VariationalCodec, train_codec
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    build_schedule,
    cfg_combine,
    ddim_sample,
    forward_diffuse,
    v_target,
)
from .evaluate import LsdReport, lsd, run_benchmark
from .pipeline import SRModels, SRResult, preprocess, replace_low_mel, replace_low_wave, upsample
from .spectral import (
    ComplexSpectrogram,
    LogMelSpectrogram,
    SpectralConfig,
    istft,
    load_logmel,
    mel_to_wav_reference,
    save_logmel,
    stft,
    wav_to_logmel,
)

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer", "read_wav", "write_wav", "resample_cubic",
    "SpectralConfig", "ComplexSpectrogram", "LogMelSpectrogram",
    "stft", "istft", "wav_to_logmel", "mel_to_wav_reference",
    "save_logmel", "load_logmel",
    "FilterSpec", "DegradationSample", "design_lowpass", "apply_filter",
    "simulate_pair", "estimate_rolloff",
    "LatentTensor", "ReferenceCodec", "VariationalCodec", "train_codec",
    "NoiseSchedule", "SamplerConfig", "build_schedule", "forward_diffuse",
    "v_target", "cfg_combine", "ddim_sample",
    "SRModels", "SRResult", "preprocess", "replace_low_mel", "replace_low_wave", "upsample",
    "lsd", "LsdReport", "run_benchmark",
    "__version__",
]
