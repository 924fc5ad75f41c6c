"""Batch command-line surface.

Commands:
    simulate  - build a degradation manifest + cached log-mel pairs
    train     - train the codec or the latent diffusion model
    upsample  - super-resolve one WAV to 48 kHz (plus JSON sidecar)
    evaluate  - run the LSD benchmark over a manifest
    rolloff   - print the detected 0.99 roll-off frequency of a file

Exit codes: 0 success, 2 empty input, 3 diverged training, 4 silent input,
5 checkpoint mismatch, 6 benchmark failure ratio above 10%, 64 usage error
(unknown flags included).

Configuration is `key = value` text (# comments allowed); every key has a
default in RunConfig and unknown keys are rejected. Flags override config
values. Mel caches written by `simulate` live in a `mels/` directory next
to the manifest, named `<row>_<stem>.lo.bmel` / `.hi.bmel` in manifest row
order.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import read_wav, write_wav
from .bandwidth import DegradationSample, read_manifest, simulate_pair, write_manifest
from .codec import CodecTrainConfig, CodecTrainer, load_codec
from .diffusion import DiffusionTrainConfig, LDMTrainer, SamplerConfig, load_ldm
from .errors import (
    CheckpointMismatch,
    DivergedTraining,
    MelsrError,
    ShapeMismatch,
    SilentInput,
)
from .evaluate import run_benchmark
from .pipeline import SRModels, preprocess, upsample
from .spectral import LogMelSpectrogram, SpectralConfig, load_logmel, save_logmel, stft
from .bandwidth import estimate_rolloff

EXIT_OK = 0
EXIT_EMPTY_INPUT = 2
EXIT_DIVERGED = 3
EXIT_SILENT = 4
EXIT_CHECKPOINT = 5
EXIT_EVAL_FAILURES = 6
EXIT_USAGE = 64


@dataclass
class RunConfig:
    """Every tunable with its default; unknown keys are rejected."""

    seed: int | None = None          # mandatory for train/simulate
    ddim_steps: int = 50
    guidance: float = 3.5
    vocoder_iters: int = 32
    codec_steps: int = 2000
    codec_lr: float = 1e-3
    codec_kl_weight: float = 1e-3
    codec_batch: int = 8
    codec_crop_frames: int = 64
    codec_channels: int = 8
    codec_hidden: int = 32
    ldm_steps: int = 3000
    ldm_lr: float = 1e-4
    ldm_batch: int = 8
    ldm_cfg_drop: float = 0.1
    ldm_clip_norm: float = 1.0
    ldm_hidden: int = 32
    ldm_blocks: int = 2
    ldm_emb_dim: int = 32
    ldm_ema_decay: float = 0.0
    ldm_K: int = 1000
    log_interval: int = 50
    checkpoint_interval: int = 1000


def load_run_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        target = fields[key].type
        if key == "seed":
            setattr(cfg, key, int(value))
        elif target == "int":
            setattr(cfg, key, int(value))
        elif target == "float":
            setattr(cfg, key, float(value))
        else:
            setattr(cfg, key, value)
    return cfg


class _Parser(argparse.ArgumentParser):
    """argparse that exits 64 on usage errors instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _mel_cache_dir(manifest_path: Path) -> Path:
    return manifest_path.parent / "mels"


def cmd_simulate(args) -> int:
    cfg = load_run_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    if seed is None:
        _log("simulate: a seed is required (flag --seed or config)")
        return EXIT_USAGE
    in_dir = Path(args.in_dir)
    wavs = sorted(in_dir.glob("*.wav"))
    if not wavs:
        _log(f"simulate: no .wav files in {in_dir}")
        return EXIT_EMPTY_INPUT

    manifest_path = Path(args.out_manifest)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    mel_dir = _mel_cache_dir(manifest_path)
    mel_dir.mkdir(parents=True, exist_ok=True)
    spec_cfg = SpectralConfig()

    records = []
    for i in range(args.n):
        path = wavs[i % len(wavs)]
        row_seed = seed + i
        rng = np.random.default_rng(row_seed)
        try:
            hi = read_wav(path)
            pair = simulate_pair(hi, rng, spec_cfg)
        except MelsrError as exc:
            _log(f"simulate: {path}: {exc}")
            continue
        stem = f"{len(records):05d}_{path.stem}"
        save_logmel(pair.lo_mel, mel_dir / f"{stem}.lo.bmel")
        save_logmel(pair.hi_mel, mel_dir / f"{stem}.hi.bmel")
        records.append(DegradationSample(
            input_path=str(path), seed=row_seed,
            family=pair.filter_spec.family, order=pair.filter_spec.order,
            cutoff_hz=pair.cutoff_hz))
    if not records:
        return EXIT_EMPTY_INPUT
    write_manifest(records, manifest_path)
    _log(f"simulate: wrote {len(records)} rows to {manifest_path}")
    return EXIT_OK


def _load_mel_pairs(manifest_path: Path) -> tuple[list[np.ndarray], list[np.ndarray]]:
    records = read_manifest(manifest_path)
    mel_dir = _mel_cache_dir(manifest_path)
    lo, hi = [], []
    for i, rec in enumerate(records):
        stem = f"{i:05d}_{Path(rec.input_path).stem}"
        lo.append(load_logmel(mel_dir / f"{stem}.lo.bmel").values)
        hi.append(load_logmel(mel_dir / f"{stem}.hi.bmel").values)
    return lo, hi


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    if seed is None and args.resume is None:
        _log("train: a seed is required (flag --seed or config)")
        return EXIT_USAGE
    manifest_path = Path(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps_override = args.steps

    lo, hi = _load_mel_pairs(manifest_path)
    if not lo:
        return EXIT_EMPTY_INPUT

    loss_rows: list[tuple[int, float]] = []

    try:
        if args.stage == "codec":
            if args.resume:
                trainer = CodecTrainer.resume(args.resume, hi)
            else:
                tc = CodecTrainConfig(
                    steps=steps_override or cfg.codec_steps, lr=cfg.codec_lr,
                    kl_weight=cfg.codec_kl_weight, seed=seed, batch=cfg.codec_batch,
                    crop_frames=cfg.codec_crop_frames, channels=cfg.codec_channels,
                    hidden=cfg.codec_hidden, log_interval=cfg.log_interval)
                trainer = CodecTrainer(hi, tc)
            ckpt = out_dir / "codec.bvae"
            target = steps_override or trainer.cfg.steps
        else:
            codec = load_codec(args.codec) if args.codec else None
            if codec is None:
                _log("train ldm: --codec checkpoint is required")
                return EXIT_USAGE
            z0, cond = [], []
            for lo_m, hi_m in zip(lo, hi):
                z0.append(codec.encode(LogMelSpectrogram(hi_m, codec.cfg)).values)
                cond.append(codec.encode(LogMelSpectrogram(lo_m, codec.cfg)).values)
            z0a = np.stack(z0).astype(np.float32)
            conda = np.stack(cond).astype(np.float32)
            if args.resume:
                trainer = LDMTrainer.resume(args.resume, z0a, conda)
            else:
                dc = DiffusionTrainConfig(
                    steps=steps_override or cfg.ldm_steps, lr=cfg.ldm_lr,
                    batch=cfg.ldm_batch, cfg_drop=cfg.ldm_cfg_drop,
                    clip_norm=cfg.ldm_clip_norm, seed=seed, K=cfg.ldm_K,
                    hidden=cfg.ldm_hidden, blocks=cfg.ldm_blocks,
                    emb_dim=cfg.ldm_emb_dim, ema_decay=cfg.ldm_ema_decay,
                    log_interval=cfg.log_interval)
                trainer = LDMTrainer(z0a, conda, dc)
            ckpt = out_dir / "ldm.bldm"
            target = steps_override or trainer.cfg.steps

        interval = cfg.checkpoint_interval

        def callback(step, loss):
            if step % cfg.log_interval == 0 or step == target:
                loss_rows.append((step, loss))
            if step % interval == 0 or step == target:
                trainer.save(ckpt)

        trainer.run(n_steps=target - trainer.step, callback=callback)
    except DivergedTraining as exc:
        _log(f"train: diverged: {exc}")
        return EXIT_DIVERGED
    except CheckpointMismatch as exc:
        _log(f"train: {exc}")
        return EXIT_CHECKPOINT

    trainer.save(ckpt)
    with open(out_dir / f"{args.stage}_loss.csv", "w") as fh:
        fh.write("step,loss\n")
        for step, loss in loss_rows:
            fh.write(f"{step},{loss!r}\n")
    _log(f"train: {args.stage} finished at step {trainer.step}, checkpoint {ckpt}")
    return EXIT_OK


def _build_models(codec_path: str, ldm_path: str, vocoder_iters: int) -> SRModels:
    codec = load_codec(codec_path)
    bundle = load_ldm(ldm_path)
    if bundle.model.cond_channels != codec.channels:
        raise CheckpointMismatch(
            f"LDM expects {bundle.model.cond_channels} conditioning channels, "
            f"codec provides {codec.channels}")
    return SRModels(codec=codec, ldm=bundle, vocoder_iters=vocoder_iters)


def cmd_upsample(args) -> int:
    cfg = load_run_config(args.config)
    sampler = SamplerConfig(
        ddim_steps=args.steps if args.steps is not None else cfg.ddim_steps,
        guidance_scale=args.guidance if args.guidance is not None else cfg.guidance,
        seed=args.seed if args.seed is not None else (cfg.seed or 0))
    try:
        models = _build_models(args.codec, args.ldm, cfg.vocoder_iters)
        clip = read_wav(args.infile)
        t0 = time.perf_counter()
        result = upsample(clip, models, sampler)
        total_ms = (time.perf_counter() - t0) * 1e3
    except (CheckpointMismatch, ShapeMismatch) as exc:
        _log(f"upsample: {exc}")
        return EXIT_CHECKPOINT
    except SilentInput as exc:
        _log(f"upsample: {exc}")
        return EXIT_SILENT

    out_path = Path(args.outfile)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_wav(result.audio, out_path, encoding="pcm16")
    sidecar = {
        "detected_rolloff": result.detected_rolloff,
        "timings_ms": {**result.timing, "total": total_ms},
        "settings": {
            "ddim_steps": sampler.ddim_steps,
            "guidance_scale": sampler.guidance_scale,
            "seed": sampler.seed,
            "vocoder_iters": cfg.vocoder_iters,
        },
    }
    out_path.with_suffix(out_path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    _log(f"upsample: wrote {out_path} (roll-off {result.detected_rolloff:.0f} Hz)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config)
    records = read_manifest(args.manifest)
    if not records:
        return EXIT_EMPTY_INPUT
    try:
        if args.codec and args.ldm:
            models = _build_models(args.codec, args.ldm, cfg.vocoder_iters)
            sampler = SamplerConfig(ddim_steps=cfg.ddim_steps, guidance_scale=cfg.guidance,
                                    seed=cfg.seed or 0)

            def system(buf):
                return upsample(buf, models, sampler).audio
        else:
            def system(buf):  # identity system: hand the degraded input back
                return buf if buf.sample_rate == 48000 else preprocess(buf)[0]
    except CheckpointMismatch as exc:
        _log(f"evaluate: {exc}")
        return EXIT_CHECKPOINT

    report = run_benchmark(records, system, out_dir=args.out_dir)
    for fail in report.failures:
        _log(f"evaluate: FAILED {fail['file']}: {fail['error']}")
    if report.rows:
        _log(f"evaluate: mean unprocessed LSD {report.mean('lsd_unprocessed'):.4f}, "
             f"mean system LSD {report.mean('lsd_system'):.4f} over {len(report.rows)} files")
    if report.failure_ratio > 0.10:
        return EXIT_EVAL_FAILURES
    return EXIT_OK


def cmd_rolloff(args) -> int:
    try:
        clip = read_wav(args.infile)
        if clip.energy() <= 0:
            raise SilentInput(f"{args.infile} is silent")
        cfg = SpectralConfig(n_fft=2048, hop=480, sample_rate=clip.sample_rate,
                             n_mels=128, mel_fmax=clip.sample_rate / 2.0)
        c = estimate_rolloff(stft(clip, cfg), 0.99)
    except SilentInput as exc:
        _log(f"rolloff: {exc}")
        return EXIT_SILENT
    print(f"{c:.1f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="melsr", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("simulate", help="build degradation manifest + mel caches",
                       formatter_class=fmt)
    p.add_argument("--in-dir", required=True, help="directory of source WAVs (48 kHz)")
    p.add_argument("--out-manifest", required=True, help="manifest path (JSON-lines)")
    p.add_argument("--n", type=int, default=100, help="number of pairs to simulate")
    p.add_argument("--seed", type=int, default=None, help="base RNG seed (required)")
    p.add_argument("--config", default=None, help="key = value config file")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train", help="train the codec or the diffusion model",
                       formatter_class=fmt)
    p.add_argument("--stage", choices=("codec", "ldm"), required=True, help="training stage")
    p.add_argument("--manifest", required=True, help="manifest from `simulate`")
    p.add_argument("--out-dir", required=True, help="checkpoint/log directory")
    p.add_argument("--codec", default=None, help="codec checkpoint (ldm stage)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--steps", type=int, default=None, help="override step count")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (required unless resuming)")
    p.add_argument("--config", default=None, help="key = value config file")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("upsample", help="super-resolve one WAV to 48 kHz",
                       formatter_class=fmt)
    p.add_argument("--in", dest="infile", required=True, help="input WAV")
    p.add_argument("--out", dest="outfile", required=True, help="output WAV (48 kHz pcm16)")
    p.add_argument("--codec", required=True, help="codec checkpoint (BVAE)")
    p.add_argument("--ldm", required=True, help="diffusion checkpoint (BLDM)")
    p.add_argument("--seed", type=int, default=None, help="sampling seed")
    p.add_argument("--guidance", type=float, default=None, help="guidance scale w")
    p.add_argument("--steps", type=int, default=None, help="DDIM steps")
    p.add_argument("--config", default=None, help="key = value config file")
    p.set_defaults(fn=cmd_upsample)

    p = sub.add_parser("evaluate", help="LSD benchmark over a manifest",
                       formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="degradation manifest")
    p.add_argument("--out-dir", required=True, help="report directory")
    p.add_argument("--codec", default=None, help="codec checkpoint (omit for identity system)")
    p.add_argument("--ldm", default=None, help="diffusion checkpoint")
    p.add_argument("--config", default=None, help="key = value config file")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("rolloff", help="print the 0.99 roll-off frequency",
                       formatter_class=fmt)
    p.add_argument("--in", dest="infile", required=True, help="input WAV")
    p.set_defaults(fn=cmd_rolloff)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except ValueError as exc:
        _log(f"melsr: {exc}")
        return EXIT_USAGE
    except MelsrError as exc:
        _log(f"melsr: {exc}")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
