"""Latent codec: log-mel spectrograms to compact latents and back.

Two interchangeable codecs share the encode/decode contract:

* `ReferenceCodec` — exact orthonormal 4x4 patching (16 channels). No
  training, bit-exact round trip; lets the diffusion stack be tested
  without any learned weights.
* `VariationalCodec` — a small strided convolutional VAE (8 channels by
  default) trained with mean-squared reconstruction plus a KL penalty
  toward the standard normal.

Both map (m, n_mels) log-mels to (channels, ceil(m/4), n_mels/4) latents;
the time axis is padded to a multiple of 4 by edge replication.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .checkpoint import load_blobs, rng_state_from_meta, rng_state_to_meta, save_blobs
from .errors import CheckpointMismatch, DivergedTraining, ShapeMismatch
from .spectral import LogMelSpectrogram, SpectralConfig

DOWNSAMPLE = 4

_BVAE_MAGIC = b"BVAE"
_BVAE_VERSION = 1

# affine squash applied before the VAE so inputs sit in O(1) range
_NORM_OFFSET = -2.0
_NORM_SCALE = 2.0


@dataclass
class LatentTensor:
    """Compressed representation: (channels, time, freq) with frame bookkeeping."""

    values: np.ndarray
    n_frames: int  # mel frames before time padding

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ShapeMismatch("latent must be (channels, time, freq)")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


def _pad_frames(values: np.ndarray) -> np.ndarray:
    """Edge-replicate rows so the frame count is a multiple of 4."""
    m = values.shape[0]
    extra = (-m) % DOWNSAMPLE
    if extra:
        values = np.concatenate([values, np.repeat(values[-1:], extra, axis=0)])
    return values


def gaussian_kl(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Elementwise KL(N(mu, e^logvar) || N(0, 1))."""
    return 0.5 * (mu**2 + np.exp(logvar) - logvar - 1.0)


class ReferenceCodec:
    """Invertible fixed codec: 4x4 mel patches become 16 latent channels."""

    channels = DOWNSAMPLE * DOWNSAMPLE

    def __init__(self, cfg: SpectralConfig | None = None):
        self.cfg = cfg or SpectralConfig()
        if self.cfg.n_mels % DOWNSAMPLE:
            raise ShapeMismatch("n_mels must be divisible by 4")

    def encode(self, mel: LogMelSpectrogram, sample: bool = False,
               rng: np.random.Generator | None = None) -> LatentTensor:
        del sample, rng  # deterministic codec
        v = _pad_frames(mel.values)
        t, f = v.shape[0] // DOWNSAMPLE, v.shape[1] // DOWNSAMPLE
        patches = v.reshape(t, DOWNSAMPLE, f, DOWNSAMPLE)
        z = patches.transpose(1, 3, 0, 2).reshape(self.channels, t, f)
        return LatentTensor(z.copy(), n_frames=mel.n_frames)

    def decode(self, z: LatentTensor) -> LogMelSpectrogram:
        c, t, f = z.shape
        if c != self.channels or f * DOWNSAMPLE != self.cfg.n_mels:
            raise ShapeMismatch(f"latent {z.shape} incompatible with reference codec")
        patches = z.values.reshape(DOWNSAMPLE, DOWNSAMPLE, t, f).transpose(2, 0, 3, 1)
        mel = patches.reshape(t * DOWNSAMPLE, f * DOWNSAMPLE)[: z.n_frames]
        floor = np.log10(self.cfg.log_floor)
        return LogMelSpectrogram(np.maximum(mel, floor), self.cfg)


def _space_to_depth(x: np.ndarray) -> np.ndarray:
    """(B, 1, H, W) -> (B, 16, H/4, W/4), 4x4 patch cells becoming channels."""
    b, _, hh, ww = x.shape
    t, f = hh // DOWNSAMPLE, ww // DOWNSAMPLE
    return np.ascontiguousarray(
        x.reshape(b, t, DOWNSAMPLE, f, DOWNSAMPLE).transpose(0, 2, 4, 1, 3)
    ).reshape(b, DOWNSAMPLE * DOWNSAMPLE, t, f)


def _depth_to_space(x: np.ndarray) -> np.ndarray:
    """(B, 16, t, f) -> (B, 1, 4t, 4f); exact inverse of `_space_to_depth`."""
    b, _, t, f = x.shape
    return np.ascontiguousarray(
        x.reshape(b, DOWNSAMPLE, DOWNSAMPLE, t, f).transpose(0, 3, 1, 4, 2)
    ).reshape(b, 1, t * DOWNSAMPLE, f * DOWNSAMPLE)


class VariationalCodec:
    """Small conv VAE with diagonal-Gaussian posterior heads.

    The 4x downsampling happens in a fixed space-to-depth stem (4x4 mel
    patches become 16 channels); the learned convolutions all run at the
    latent resolution, which keeps CPU training cheap.
    """

    def __init__(self, cfg: SpectralConfig | None = None, channels: int = 8,
                 hidden: int = 32, seed: int = 0, dtype=np.float32):
        self.cfg = cfg or SpectralConfig()
        if self.cfg.n_mels % DOWNSAMPLE:
            raise ShapeMismatch("n_mels must be divisible by 4")
        self.channels = channels
        self.hidden = hidden
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        h = hidden
        patch = DOWNSAMPLE * DOWNSAMPLE
        self.enc1 = nn.Conv2d(patch, h, rng=rng, dtype=dtype, name="enc1")
        self.enc2 = nn.Conv2d(h, h, rng=rng, dtype=dtype, name="enc2")
        self.mu_head = nn.Conv2d(h, channels, rng=rng, dtype=dtype, name="mu")
        self.lv_head = nn.Conv2d(h, channels, rng=rng, dtype=dtype, zero_init=True, name="lv")
        self.dec1 = nn.Conv2d(channels, h, rng=rng, dtype=dtype, name="dec1")
        self.dec2 = nn.Conv2d(h, h, rng=rng, dtype=dtype, name="dec2")
        self.dec3 = nn.Conv2d(h, patch, rng=rng, dtype=dtype, name="dec3")
        self._act = [nn.SiLU() for _ in range(4)]

    def params(self) -> dict[str, nn.Param]:
        out: dict[str, nn.Param] = {}
        for layer in (self.enc1, self.enc2, self.mu_head, self.lv_head,
                      self.dec1, self.dec2, self.dec3):
            out.update(layer.params())
        return out

    # --- batched core in normalized space ---

    def encode_batch(self, xn: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(B, 1, m4, n) normalized mels -> posterior (mu, logvar), (B, c, t, f)."""
        h = self._act[0].forward(self.enc1.forward(_space_to_depth(xn)))
        h = self._act[1].forward(self.enc2.forward(h))
        return self.mu_head.forward(h), self.lv_head.forward(h)

    def decode_batch(self, z: np.ndarray) -> np.ndarray:
        h = self._act[2].forward(self.dec1.forward(z))
        h = self._act[3].forward(self.dec2.forward(h))
        return _depth_to_space(self.dec3.forward(h))

    def _backward_decoder(self, dxn: np.ndarray) -> np.ndarray:
        d = self.dec3.backward(_space_to_depth(dxn))
        d = self.dec2.backward(self._act[3].backward(d))
        return self.dec1.backward(self._act[2].backward(d))

    def _backward_encoder(self, dmu: np.ndarray, dlv: np.ndarray) -> None:
        dh = self.mu_head.backward(dmu) + self.lv_head.backward(dlv)
        dh = self.enc2.backward(self._act[1].backward(dh))
        self.enc1.backward(self._act[0].backward(dh))

    def loss_and_grads(self, mels: np.ndarray, eps: np.ndarray,
                       kl_weight: float, accumulate: bool = True
                       ) -> tuple[float, float, float]:
        """ELBO-style loss on a batch of raw log-mels (B, m4, n).

        eps holds the frozen reparameterization noise, shaped like the
        posterior. Returns (total, reconstruction, kl); gradients are added
        to the parameters unless accumulate is False.
        """
        xn = ((mels - _NORM_OFFSET) / _NORM_SCALE).astype(self.dtype)[:, None]
        mu, lv = self.encode_batch(xn)
        z = mu + np.exp(0.5 * lv) * eps.astype(self.dtype)
        xhat = self.decode_batch(z)
        diff = xhat - xn
        recon = float(np.mean(diff.astype(np.float64) ** 2))
        kl_elems = gaussian_kl(mu.astype(np.float64), lv.astype(np.float64))
        kl = float(np.mean(kl_elems))
        loss = recon + kl_weight * kl
        if accumulate:
            dxhat = (2.0 * diff / diff.size).astype(self.dtype)
            dz = self._backward_decoder(dxhat)
            dmu = dz + (kl_weight * mu / mu.size).astype(self.dtype)
            dlv = (dz * eps.astype(self.dtype) * np.exp(0.5 * lv) * 0.5
                   + (kl_weight * 0.5 * (np.exp(lv) - 1.0) / lv.size)).astype(self.dtype)
            self._backward_encoder(dmu, dlv)
        return loss, recon, kl

    # --- public single-spectrogram contract ---

    def latent_shape(self, n_frames: int) -> tuple[int, int, int]:
        t = -(-n_frames // DOWNSAMPLE)
        return (self.channels, t, self.cfg.n_mels // DOWNSAMPLE)

    def encode(self, mel: LogMelSpectrogram, sample: bool = False,
               rng: np.random.Generator | None = None) -> LatentTensor:
        if mel.values.shape[1] != self.cfg.n_mels:
            raise ShapeMismatch(f"expected {self.cfg.n_mels} mel bins")
        v = _pad_frames(mel.values)
        xn = ((v - _NORM_OFFSET) / _NORM_SCALE).astype(self.dtype)[None, None]
        mu, lv = self.encode_batch(xn)
        if sample:
            if rng is None:
                raise ValueError("sample=True requires an rng")
            z = mu + np.exp(0.5 * lv) * rng.standard_normal(mu.shape).astype(self.dtype)
        else:
            z = mu
        return LatentTensor(z[0], n_frames=mel.n_frames)

    def decode(self, z: LatentTensor) -> LogMelSpectrogram:
        c, t, f = z.shape
        if c != self.channels or f != self.cfg.n_mels // DOWNSAMPLE:
            raise ShapeMismatch(f"latent {z.shape} incompatible with codec")
        xn = self.decode_batch(np.asarray(z.values, dtype=self.dtype)[None])
        mel = xn[0, 0].astype(np.float64) * _NORM_SCALE + _NORM_OFFSET
        floor = np.log10(self.cfg.log_floor)
        return LogMelSpectrogram(np.maximum(mel[: z.n_frames], floor), self.cfg)


@dataclass
class CodecTrainConfig:
    """Hyperparameters for VAE training."""

    steps: int = 2000
    lr: float = 1e-3
    kl_weight: float = 1e-3
    seed: int = 0
    batch: int = 8
    crop_frames: int = 64
    channels: int = 8
    hidden: int = 32
    log_interval: int = 50


def _crop_batch(dataset: list[np.ndarray], idx: np.ndarray, crop: int,
                rng: np.random.Generator) -> np.ndarray:
    out = []
    for i in idx:
        v = dataset[int(i)]
        v = _pad_frames(v)
        if v.shape[0] < crop:
            v = np.concatenate([v, np.repeat(v[-1:], crop - v.shape[0], axis=0)])
        off_max = v.shape[0] - crop
        off = int(rng.integers(0, off_max // DOWNSAMPLE + 1)) * DOWNSAMPLE
        out.append(v[off:off + crop])
    return np.stack(out)


class CodecTrainer:
    """Owns one VariationalCodec plus optimizer/RNG state; supports resume."""

    def __init__(self, dataset: list[np.ndarray] | list[LogMelSpectrogram],
                 cfg: CodecTrainConfig, spec_cfg: SpectralConfig | None = None):
        self.dataset = [d.values if isinstance(d, LogMelSpectrogram) else np.asarray(d)
                        for d in dataset]
        if not self.dataset:
            raise ValueError("dataset must be non-empty")
        self.cfg = cfg
        self.codec = VariationalCodec(spec_cfg, channels=cfg.channels,
                                      hidden=cfg.hidden, seed=cfg.seed)
        self.opt = nn.Adam(self.codec.params(), lr=cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.history: list[tuple[int, float]] = []

    def one_step(self) -> float:
        cfg = self.cfg
        idx = self.rng.integers(0, len(self.dataset), size=cfg.batch)
        mels = _crop_batch(self.dataset, idx, cfg.crop_frames, self.rng)
        c, t, f = self.codec.latent_shape(cfg.crop_frames)
        eps = self.rng.standard_normal((cfg.batch, c, t, f))
        nn.zero_grads(self.codec.params())
        loss, _, _ = self.codec.loss_and_grads(mels, eps, cfg.kl_weight)
        if not np.isfinite(loss):
            raise DivergedTraining(f"codec loss {loss} at step {self.step}")
        self.opt.step()
        self.step += 1
        return loss

    def run(self, n_steps: int | None = None, callback=None) -> list[tuple[int, float]]:
        target = self.step + n_steps if n_steps is not None else self.cfg.steps
        while self.step < target:
            loss = self.one_step()
            if self.step % self.cfg.log_interval == 0 or self.step == target:
                self.history.append((self.step, loss))
            if callback is not None:
                callback(self.step, loss)
        return self.history

    def save(self, path, with_trainer_state: bool = True) -> None:
        save_codec(self.codec, path,
                   trainer=self if with_trainer_state else None)

    @classmethod
    def resume(cls, path, dataset, spec_cfg: SpectralConfig | None = None) -> "CodecTrainer":
        codec, meta, arrays = _load_codec_full(path, spec_cfg)
        if "trainer" not in meta:
            raise CheckpointMismatch(f"{path}: no trainer state stored")
        cfg = CodecTrainConfig(**meta["trainer"]["cfg"])
        trainer = cls.__new__(cls)
        trainer.dataset = [d.values if isinstance(d, LogMelSpectrogram) else np.asarray(d)
                           for d in dataset]
        trainer.cfg = cfg
        trainer.codec = codec
        trainer.opt = nn.Adam(codec.params(), lr=cfg.lr)
        trainer.opt.load_state_arrays(arrays, meta["trainer"]["adam_t"])
        trainer.rng = rng_state_from_meta(meta["trainer"]["rng"])
        trainer.step = int(meta["trainer"]["step"])
        trainer.history = [tuple(x) for x in meta["trainer"].get("history", [])]
        return trainer


def train_codec(dataset, cfg: CodecTrainConfig,
                spec_cfg: SpectralConfig | None = None,
                callback=None) -> tuple[VariationalCodec, list[tuple[int, float]]]:
    """Train a VariationalCodec from scratch; deterministic given cfg.seed."""
    trainer = CodecTrainer(dataset, cfg, spec_cfg)
    history = trainer.run(callback=callback)
    return trainer.codec, history


def save_codec(codec: VariationalCodec, path, trainer: CodecTrainer | None = None) -> None:
    meta = {
        "kind": "variational",
        "n_mels": codec.cfg.n_mels,
        "sample_rate": codec.cfg.sample_rate,
        "n_fft": codec.cfg.n_fft,
        "hop": codec.cfg.hop,
        "channels": codec.channels,
        "hidden": codec.hidden,
        "seed": codec.seed,
    }
    arrays = {k: p.value for k, p in codec.params().items()}
    if trainer is not None:
        meta["trainer"] = {
            "cfg": trainer.cfg.__dict__,
            "step": trainer.step,
            "adam_t": trainer.opt.t,
            "rng": rng_state_to_meta(trainer.rng),
            "history": trainer.history,
        }
        arrays.update(trainer.opt.state_arrays())
    save_blobs(path, _BVAE_MAGIC, _BVAE_VERSION, meta, arrays)


def _load_codec_full(path, spec_cfg: SpectralConfig | None = None):
    _, meta, arrays = load_blobs(path, _BVAE_MAGIC)
    cfg = spec_cfg or SpectralConfig(
        n_fft=meta["n_fft"], hop=meta["hop"], sample_rate=meta["sample_rate"],
        n_mels=meta["n_mels"], mel_fmax=meta["sample_rate"] / 2.0)
    codec = VariationalCodec(cfg, channels=meta["channels"],
                             hidden=meta["hidden"], seed=meta.get("seed", 0))
    for name, p in codec.params().items():
        if name not in arrays:
            raise CheckpointMismatch(f"{path}: missing weight blob {name!r}")
        if arrays[name].shape != p.value.shape:
            raise CheckpointMismatch(
                f"{path}: blob {name} shape {arrays[name].shape} != {p.value.shape}")
        p.value = arrays[name].astype(codec.dtype)
        p.grad = np.zeros_like(p.value)
    return codec, meta, arrays


def load_codec(path, spec_cfg: SpectralConfig | None = None) -> VariationalCodec:
    """Load a trained codec (weights only) from a BVAE checkpoint."""
    codec, _, _ = _load_codec_full(path, spec_cfg)
    return codec
