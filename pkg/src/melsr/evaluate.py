"""Log-spectral distance and the batch benchmark runner.

The LSD convention is frozen here: Hann STFT with n_fft 2048 and hop 512,
no centering, magnitudes floored at 1e-8, distances on log10 power:

    LSD = mean over frames of sqrt(mean over bins of
          (log10 |S_ref|^2 - log10 |S_est|^2)^2)
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, read_wav, resample_cubic
from .bandwidth import DegradationSample, FilterSpec, apply_filter, design_lowpass
from .errors import RateMismatch
from .spectral import hann_window

LSD_N_FFT = 2048
LSD_HOP = 512
LSD_MAG_FLOOR = 1e-8


def _log_power_frames(x: np.ndarray, n_fft: int, hop: int, floor: float) -> np.ndarray:
    if len(x) < n_fft:
        raise ValueError(f"need at least {n_fft} samples for LSD")
    m = 1 + (len(x) - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:m]
    mag = np.abs(np.fft.rfft(frames * hann_window(n_fft), axis=1))
    return 2.0 * np.log10(np.maximum(mag, floor))


def lsd(ref: AudioBuffer, est: AudioBuffer, *, n_fft: int = LSD_N_FFT,
        hop: int = LSD_HOP, floor: float = LSD_MAG_FLOOR) -> float:
    """Log-spectral distance between reference and estimate (lower is better).

    Buffers are truncated to the shorter length before analysis.

    Raises:
        RateMismatch: the buffers have different sample rates.
    """
    if ref.sample_rate != est.sample_rate:
        raise RateMismatch(f"{ref.sample_rate} Hz vs {est.sample_rate} Hz")
    n = min(len(ref), len(est))
    lr = _log_power_frames(ref.samples[:n], n_fft, hop, floor)
    le = _log_power_frames(est.samples[:n], n_fft, hop, floor)
    per_frame = np.sqrt(np.mean((lr - le) ** 2, axis=1))
    return float(np.mean(per_frame))


@dataclass
class LsdReport:
    """Per-file LSD rows plus failure records from one benchmark run."""

    rows: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def mean(self, column: str = "lsd_system") -> float:
        return float(np.mean([r[column] for r in self.rows]))

    def std(self, column: str = "lsd_system") -> float:
        return float(np.std([r[column] for r in self.rows]))

    def by_cutoff(self, column: str = "lsd_system") -> dict[float, float]:
        """Mean LSD grouped by cutoff frequency."""
        groups: dict[float, list[float]] = {}
        for r in self.rows:
            groups.setdefault(r["cutoff_hz"], []).append(r[column])
        return {c: float(np.mean(v)) for c, v in sorted(groups.items())}

    @property
    def failure_ratio(self) -> float:
        total = len(self.rows) + len(self.failures)
        return len(self.failures) / total if total else 0.0


_CSV_COLUMNS = ("file", "cutoff_hz", "family", "order", "lsd_unprocessed", "lsd_system")


def degrade_for_eval(ref: AudioBuffer, record: DegradationSample) -> AudioBuffer:
    """Benchmark-side degradation: lowpass per the record, then decimate.

    The degraded clip is carried at 2 * cutoff Hz, mimicking genuinely
    low-resolution input. family "none" passes the reference through
    untouched (clean baseline rows).
    """
    if record.family == "none":
        return ref
    kernel = design_lowpass(
        FilterSpec(family=record.family, order=record.order, cutoff_hz=record.cutoff_hz),
        ref.sample_rate)
    filtered = apply_filter(ref, kernel)
    return resample_cubic(filtered, int(round(2 * record.cutoff_hz)))


def run_benchmark(manifest: list[DegradationSample], system,
                  out_dir: str | Path | None = None,
                  target_rate: int = 48000) -> LsdReport:
    """Degrade each manifest entry, run `system` on it, and score both the
    system output and the cubic-resampled "unprocessed" baseline with LSD
    against the original.

    `system` is a callable AudioBuffer -> AudioBuffer returning 48 kHz
    audio. Per-file errors are recorded and the run continues; callers
    decide what failure ratio is fatal. Writes report.csv and
    report.jsonl under out_dir when given.
    """
    report = LsdReport()
    for record in manifest:
        try:
            ref = read_wav(record.input_path)
            if ref.sample_rate != target_rate:
                raise RateMismatch(
                    f"{record.input_path}: expected {target_rate} Hz reference")
            degraded = degrade_for_eval(ref, record)
            unprocessed = resample_cubic(degraded, target_rate)
            out = system(degraded)
            if out.sample_rate != target_rate:
                raise RateMismatch("system output must be 48 kHz")
            report.rows.append({
                "file": record.input_path,
                "cutoff_hz": record.cutoff_hz,
                "family": record.family,
                "order": record.order,
                "lsd_unprocessed": lsd(ref, unprocessed),
                "lsd_system": lsd(ref, out),
            })
        except Exception as exc:  # per-file isolation is the contract
            report.failures.append({"file": record.input_path, "error": str(exc)})
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: LsdReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(report.rows)
    with open(out / "report.jsonl", "w") as fh:
        for row in report.rows:
            fh.write(json.dumps(row, sort_keys=False) + "\n")
        for fail in report.failures:
            fh.write(json.dumps({"error": fail}, sort_keys=False) + "\n")
