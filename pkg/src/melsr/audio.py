"""Waveform I/O, cubic resampling, and buffer plumbing.

All audio in the library is mono float64 in nominal range [-1, 1].
Multi-channel files are downmixed by channel averaging at load time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyAudio, IoFailure, MalformedContainer, UnsupportedEncoding

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class AudioBuffer:
    """Mono waveform with its sample rate.

    Attributes:
        samples: 1-D float64 array of amplitudes, nominally in [-1, 1].
        sample_rate: sampling rate in Hz (positive integer).
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioBuffer is mono: samples must be 1-D")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioBuffer samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        """Length in seconds."""
        return len(self) / self.sample_rate

    @property
    def nyquist(self) -> float:
        return self.sample_rate / 2.0

    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))


def read_wav(path: str | Path) -> AudioBuffer:
    """Read a RIFF/WAVE file into a mono AudioBuffer.

    Accepts PCM16 and IEEE float32 encodings. PCM16 samples are scaled by
    1/32768. Multi-channel content is downmixed by averaging the channels
    of each frame.

    Raises:
        MalformedContainer: not a RIFF/WAVE file or truncated chunks.
        UnsupportedEncoding: format code / bit depth outside PCM16, float32.
        EmptyAudio: data chunk holds zero frames.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedContainer(f"{path}: missing RIFF/WAVE header")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedContainer(f"{path}: short fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            if len(body) < size:
                raise MalformedContainer(f"{path}: truncated data chunk")
            data = body
        pos += 8 + size + (size & 1)

    if fmt is None or data is None:
        raise MalformedContainer(f"{path}: missing fmt or data chunk")

    code, n_channels, sample_rate, _, _, bits = fmt
    if code == _WAVE_FORMAT_EXTENSIBLE:
        # sub-format GUID starts with the ordinary format code
        raise UnsupportedEncoding(f"{path}: WAVE_FORMAT_EXTENSIBLE not supported")
    if n_channels < 1:
        raise MalformedContainer(f"{path}: zero channels")

    if code == _WAVE_FORMAT_PCM and bits == 16:
        flat = np.frombuffer(data[: len(data) - len(data) % 2], dtype="<i2")
        flat = flat.astype(np.float64) / 32768.0
    elif code == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        flat = np.frombuffer(data[: len(data) - len(data) % 4], dtype="<f4")
        flat = flat.astype(np.float64)
    else:
        raise UnsupportedEncoding(f"{path}: format code {code} / {bits} bit")

    n_frames = flat.shape[0] // n_channels
    if n_frames == 0:
        raise EmptyAudio(f"{path}: no samples")
    frames = flat[: n_frames * n_channels].reshape(n_frames, n_channels)
    mono = frames.mean(axis=1) if n_channels > 1 else frames[:, 0]
    return AudioBuffer(np.ascontiguousarray(mono), sample_rate)


def write_wav(buf: AudioBuffer, path: str | Path, encoding: str = "pcm16") -> None:
    """Write an AudioBuffer as a mono RIFF/WAVE file.

    encoding "pcm16" clips to [-1, 1] and quantizes with round-half-away
    scaling by 32768 (so -1.0 maps to -32768 and +1.0 clips to 32767).
    encoding "float32" stores IEEE float32 samples verbatim.
    """
    x = buf.samples
    if encoding == "pcm16":
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        payload = q.tobytes()
        code, bits = _WAVE_FORMAT_PCM, 16
    elif encoding == "float32":
        payload = x.astype("<f4").tobytes()
        code, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")

    block = bits // 8
    header = b"".join([
        b"RIFF",
        struct.pack("<I", 36 + len(payload)),
        b"WAVE",
        b"fmt ",
        struct.pack("<IHHIIHH", 16, code, 1, buf.sample_rate,
                    buf.sample_rate * block, block, bits),
        b"data",
        struct.pack("<I", len(payload)),
    ])
    try:
        Path(path).write_bytes(header + payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _catmull_rom(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Evaluate the Catmull-Rom interpolant of x at fractional sample positions.

    Edge samples are replicated, so positions slightly outside [0, len-1]
    degrade gracefully to the boundary value.
    """
    n = x.shape[0]
    i1 = np.floor(positions).astype(np.int64)
    i1 = np.clip(i1, 0, n - 1)
    t = positions - i1
    i0 = np.clip(i1 - 1, 0, n - 1)
    i2 = np.clip(i1 + 1, 0, n - 1)
    i3 = np.clip(i1 + 2, 0, n - 1)
    p0, p1, p2, p3 = x[i0], x[i1], x[i2], x[i3]
    # uniform Catmull-Rom basis (tension 1/2)
    t2 = t * t
    t3 = t2 * t
    return 0.5 * (
        2.0 * p1
        + (p2 - p0) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2
        + (3.0 * (p1 - p2) + p3 - p0) * t3
    )


def resample_cubic(buf: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Resample by piecewise-cubic (Catmull-Rom) interpolation.

    Output sample j is the interpolant evaluated at source position
    j * source_rate / target_rate; output length is
    round(len * target_rate / source_rate). No anti-alias filtering is
    applied; callers downsampling wideband material must lowpass first.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == buf.sample_rate:
        return AudioBuffer(buf.samples.copy(), target_rate)
    n_out = int(round(len(buf) * target_rate / buf.sample_rate))
    if n_out == 0:
        return AudioBuffer(np.zeros(0), target_rate)
    positions = np.arange(n_out, dtype=np.float64) * (buf.sample_rate / target_rate)
    return AudioBuffer(_catmull_rom(buf.samples, positions), target_rate)
