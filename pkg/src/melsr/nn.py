"""Small neural-network kit: numpy layers with explicit backprop.

Everything here is deterministic given the initialization generator and the
input; no hidden global state. Layers cache their most recent forward pass,
so one layer instance serves exactly one site in a network graph.
"""

from __future__ import annotations

import numpy as np


class Param:
    """A trainable array and its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def dtype(self):
        return self.value.dtype


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


class SiLU:
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return silu(x)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * silu_grad(self._x)


class Conv2d:
    """3x3-style 'same' convolution on (B, C, H, W), optionally strided.

    Weights are flattened (c_out, k*k*c_in) with the kernel offset as the
    major axis, matching an im2col buffer built from k*k whole-plane
    strided copies (no expensive transposes; the GEMM is batched over B).
    """

    def __init__(self, c_in: int, c_out: int, ksize: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None,
                 dtype=np.float32, zero_init: bool = False, name: str = "conv"):
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, ksize, stride
        self.pad = ksize // 2
        self.name = name
        fan_in = c_in * ksize * ksize
        if zero_init:
            w = np.zeros((c_out, fan_in), dtype=dtype)
        else:
            rng = rng or np.random.default_rng(0)
            w = (rng.standard_normal((c_out, fan_in)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.w = Param(w)
        self.b = Param(np.zeros(c_out, dtype=dtype))

    def params(self) -> dict[str, Param]:
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def out_size(self, h: int) -> int:
        return (h + 2 * self.pad - self.k) // self.stride + 1

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        k, s, p = self.k, self.stride, self.pad
        ho, wo = self.out_size(h), self.out_size(w)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((b, k * k * c, ho * wo), dtype=x.dtype)
        view = cols.reshape(b, k * k, c, ho, wo)
        for i in range(k):
            for j in range(k):
                view[:, i * k + j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
        y = np.matmul(self.w.value, cols) + self.b.value[:, None]
        self._cols = cols
        self._shape_in = (b, c, h, w)
        return y.reshape(b, self.c_out, ho, wo)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        b, c, h, w = self._shape_in
        k, s, p = self.k, self.stride, self.pad
        _, _, ho, wo = dy.shape
        dyb = dy.reshape(b, self.c_out, ho * wo)
        self.w.grad += np.matmul(dyb, self._cols.transpose(0, 2, 1)).sum(axis=0)
        self.b.grad += dyb.sum(axis=(0, 2))
        dcols = np.matmul(self.w.value.T, dyb).reshape(b, k * k, c, ho, wo)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i * k + j]
        return dxp[:, :, p:p + h, p:p + w]


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None,
                 dtype=np.float32, zero_init: bool = False, name: str = "linear"):
        self.name = name
        if zero_init:
            w = np.zeros((d_out, d_in), dtype=dtype)
        else:
            rng = rng or np.random.default_rng(0)
            w = (rng.standard_normal((d_out, d_in)) * np.sqrt(2.0 / d_in)).astype(dtype)
        self.w = Param(w)
        self.b = Param(np.zeros(d_out, dtype=dtype))

    def params(self) -> dict[str, Param]:
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.w.value.T + self.b.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.w.grad += dy.T @ self._x
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.value


class Upsample2x:
    """Nearest-neighbor 2x spatial upsampling on (B, C, H, W)."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        b, c, h2, w2 = dy.shape
        return dy.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def sinusoidal_embedding(k: np.ndarray, dim: int, max_period: float = 10000.0,
                         dtype=np.float32) -> np.ndarray:
    """Transformer-style step embedding, (B, dim) for integer steps (B,)."""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(k, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb.astype(dtype)


def zero_grads(params: dict[str, Param]) -> None:
    for p in params.values():
        p.grad[...] = 0.0


def global_grad_norm(params: dict[str, Param]) -> float:
    total = 0.0
    for p in params.values():
        total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(params: dict[str, Param], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            p.grad *= scale
    return norm


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params: dict[str, Param], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            p.value -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment tensors keyed for checkpointing."""
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.params:
            self.m[k] = arrays[f"adam.m.{k}"].copy()
            self.v[k] = arrays[f"adam.v.{k}"].copy()
