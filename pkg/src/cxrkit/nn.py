"""Neural-net building blocks over the autodiff tensor: linear, norm,
attention, transformer blocks, and convolution wrappers.

Every layer registers its parameters in a shared dict under a dotted
prefix, which is also the tensor name used by checkpoints.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng
from .tensor import Tensor, concat, conv2d, embedding, get_default_dtype


class ParamStore:
    """Named trainable parameters for one model."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=get_default_dtype()),
                   requires_grad=trainable)
        self.params[name] = t
        return t

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            p = self.params[name]
            if p.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            p.data = np.asarray(arr, dtype=p.data.dtype).copy()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def set_trainable(self, predicate) -> None:
        for name, p in self.params.items():
            p.requires_grad = bool(predicate(name))


class Linear:
    def __init__(self, store: ParamStore, prefix: str, din: int, dout: int,
                 rng: Rng, bias: bool = True, scale: float | None = None,
                 zero_init: bool = False):
        s = scale if scale is not None else 1.0 / np.sqrt(din)
        w = np.zeros((din, dout)) if zero_init else s * rng.normal((din, dout), np.float64)
        self.w = store.add(f"{prefix}.w", w)
        self.b = store.add(f"{prefix}.b", np.zeros(dout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w
        return out + self.b if self.b is not None else out


class LayerNorm:
    def __init__(self, store: ParamStore, prefix: str, dim: int, eps: float = 1e-5):
        self.g = store.add(f"{prefix}.g", np.ones(dim))
        self.b = store.add(f"{prefix}.b", np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / (var + self.eps).sqrt() * self.g + self.b


class Embedding:
    def __init__(self, store: ParamStore, prefix: str, n: int, dim: int, rng: Rng,
                 scale: float = 0.02):
        self.w = store.add(f"{prefix}.w", scale * rng.normal((n, dim), np.float64))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return embedding(self.w, ids)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, D = x.shape
    return x.reshape(B, L, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, L, Dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * Dh)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
              causal: bool = False, extra_bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over (B, L, D) projections."""
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    dh = qh.shape[-1]
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    if causal:
        Lq, Lk = qh.shape[2], kh.shape[2]
        # query i attends to keys <= i + (Lk - Lq); covers prepended prefixes
        mask = np.triu(np.ones((Lq, Lk), dtype=scores.dtype.type), k=Lk - Lq + 1)
        scores = scores + Tensor(mask * np.asarray(-1e9, dtype=scores.dtype.type))
    if extra_bias is not None:
        scores = scores + Tensor(extra_bias.astype(scores.dtype.type))
    att = scores.softmax(axis=-1)
    return _merge_heads(att @ vh)


class MultiHeadAttention:
    """Self- or cross-attention with explicit q/k/v/o projections.

    `q_delta`/`v_delta` accept callables producing additive low-rank
    projection deltas (used by adapters); base projections stay intact.
    """

    def __init__(self, store: ParamStore, prefix: str, dim: int, heads: int, rng: Rng,
                 kv_dim: int | None = None):
        kv = kv_dim or dim
        self.q = Linear(store, f"{prefix}.q", dim, dim, rng, bias=False)
        self.k = Linear(store, f"{prefix}.k", kv, dim, rng, bias=False)
        self.v = Linear(store, f"{prefix}.v", kv, dim, rng, bias=False)
        self.o = Linear(store, f"{prefix}.o", dim, dim, rng, bias=False)
        self.heads = heads
        self.q_delta = None
        self.v_delta = None

    def __call__(self, x: Tensor, context: Tensor | None = None,
                 causal: bool = False) -> Tensor:
        ctx = context if context is not None else x
        q = self.q(x)
        v = self.v(ctx)
        if self.q_delta is not None:
            q = q + self.q_delta(x)
        if self.v_delta is not None:
            v = v + self.v_delta(ctx)
        k = self.k(ctx)
        return self.o(attention(q, k, v, self.heads, causal=causal))


class TransformerBlock:
    """Pre-norm block: self-attention, optional cross-attention, MLP."""

    def __init__(self, store: ParamStore, prefix: str, dim: int, heads: int, rng: Rng,
                 cross_dim: int | None = None, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(store, f"{prefix}.ln1", dim)
        self.attn = MultiHeadAttention(store, f"{prefix}.attn", dim, heads, rng)
        self.cross = None
        if cross_dim is not None:
            self.lnc = LayerNorm(store, f"{prefix}.lnc", dim)
            self.cross = MultiHeadAttention(store, f"{prefix}.cross", dim, heads, rng,
                                            kv_dim=cross_dim)
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", dim)
        self.fc1 = Linear(store, f"{prefix}.fc1", dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(store, f"{prefix}.fc2", mlp_ratio * dim, dim, rng)

    def __call__(self, x: Tensor, context: Tensor | None = None,
                 causal: bool = False) -> Tensor:
        x = x + self.attn(self.ln1(x), causal=causal)
        if self.cross is not None and context is not None:
            x = x + self.cross(self.lnc(x), context=context)
        return x + self.fc2(self.fc1(self.ln2(x)).gelu())


class Conv2d:
    def __init__(self, store: ParamStore, prefix: str, cin: int, cout: int, k: int,
                 rng: Rng, stride: int = 1, pad: int | None = None,
                 zero_init: bool = False):
        scale = 1.0 / np.sqrt(cin * k * k)
        w = np.zeros((cout, cin, k, k)) if zero_init else \
            scale * rng.normal((cout, cin, k, k), np.float64)
        self.w = store.add(f"{prefix}.w", w)
        self.b = store.add(f"{prefix}.b", np.zeros(cout))
        self.stride = stride
        self.pad = pad if pad is not None else k // 2

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.w, stride=self.stride, pad=self.pad)
        return out + self.b.reshape(1, -1, 1, 1)


class GroupNorm:
    def __init__(self, store: ParamStore, prefix: str, channels: int,
                 groups: int = 8, eps: float = 1e-5):
        self.g = store.add(f"{prefix}.g", np.ones(channels))
        self.b = store.add(f"{prefix}.b", np.zeros(channels))
        self.groups = min(groups, channels)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        G = self.groups
        xg = x.reshape(B, G, C // G * H * W)
        mu = xg.mean(axis=-1, keepdims=True)
        xc = xg - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        xn = (xc / (var + self.eps).sqrt()).reshape(B, C, H, W)
        return xn * self.g.reshape(1, -1, 1, 1) + self.b.reshape(1, -1, 1, 1)


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W) grayscale -> (B, P, patch*patch) patch sequence."""
    B, H, W = pixels.shape
    ph, pw = H // patch, W // patch
    x = pixels.reshape(B, ph, patch, pw, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(B, ph * pw, patch * patch)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Classic fixed positional encoding of integer steps (N,) -> (N, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(get_default_dtype())


def cosine_similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Rows of a vs rows of b; inputs assumed unit-norm."""
    return a @ b.transpose(1, 0)


def mean_pool(x: Tensor) -> Tensor:
    return x.mean(axis=1)


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    norm = ((x * x).sum(axis=-1, keepdims=True) + eps).sqrt()
    return x / norm


def cat_tokens(*parts: Tensor) -> Tensor:
    return concat(parts, axis=1)
