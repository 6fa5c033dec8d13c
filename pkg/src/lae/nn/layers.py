"""Encoder building blocks: linear maps, layer norm, attention, subsampling."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class ConfigError(ValueError):
    """Raised for inconsistent layer or model configuration."""


class Module:
    """Parameter container. Children and parameters are discovered from attributes."""

    training = False

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{key}."))
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{key}{i}."))
        return out

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(T.default_dtype())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(uniform_init(rng, d_in, (d_in, d_out)))
        if bias:
            self.bias = Parameter(np.zeros(d_out, dtype=T.default_dtype()))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Parameter(np.ones(d, dtype=T.default_dtype()))
        self.beta = Parameter(np.zeros(d, dtype=T.default_dtype()))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ConfigError(f"model dim {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor, key_bias: np.ndarray | None = None) -> Tensor:
        b, t, d = x.shape
        h, dh = self.heads, d // self.heads

        def split(y):
            return T.transpose(T.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

        q = split(self.wq(x)) * (1.0 / math.sqrt(dh))
        k = split(self.wk(x))
        v = split(self.wv(x))
        att = T.softmax(q @ T.transpose(k, (0, 1, 3, 2)), key_bias)
        ctx = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (b, t, d))
        return self.wo(ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.w1 = Linear(d_model, d_ff, rng)
        self.w2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(T.silu(self.w1(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention and feed-forward, each wrapped in a residual."""

    def __init__(self, d_model: int, d_ff: int, heads: int, rng: np.random.Generator,
                 dropout: float = 0.1):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)
        self.dropout = dropout
        self.rng: np.random.Generator | None = None

    def _drop(self, x):
        return T.dropout(x, self.dropout, self.rng if self.training else None)

    def __call__(self, x: Tensor, key_bias: np.ndarray | None = None) -> Tensor:
        x = x + self._drop(self.attn(self.norm1(x), key_bias))
        return x + self._drop(self.ff(self.norm2(x)))


class LayerStack(Module):
    def __init__(self, n_layers: int, d_model: int, d_ff: int, heads: int,
                 rng: np.random.Generator, dropout: float = 0.1, final_norm: bool = True):
        self.layer = [EncoderLayer(d_model, d_ff, heads, rng, dropout) for _ in range(n_layers)]
        self.d_model = d_model
        self.norm = LayerNorm(d_model) if final_norm else None

    def __len__(self):
        return len(self.layer)

    def __call__(self, x: Tensor, key_bias: np.ndarray | None = None) -> Tensor:
        if x.shape[-1] != self.d_model:
            raise ConfigError(f"layer stack expects dim {self.d_model}, got {x.shape[-1]}")
        for layer in self.layer:
            x = layer(x, key_bias)
        return self.norm(x) if self.norm is not None else x


def subsampled_length(n_frames):
    """Output length of the two kernel-3 stride-2 stages.

    Each stage maps ``t -> (t - 3)//2 + 1 == (t - 1)//2``, so the composite
    is ``((t - 1)//2 - 1)//2``. The shortest admitted input is 7 frames.
    """
    n = np.asarray(n_frames)
    out = ((n - 1) // 2 - 1) // 2
    return int(out) if out.ndim == 0 else out


MIN_FRAMES = 7


def sinusoid_positions(n: int, d: int, dtype) -> np.ndarray:
    pos = np.arange(n)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)
    return pe.astype(dtype)


class Subsampler(Module):
    """Two strided temporal convolutions (factor 4) and a projection to the model dim."""

    kernel = 3
    stride = 2

    def __init__(self, feat_dim: int, d_model: int, rng: np.random.Generator):
        self.feat_dim = feat_dim
        self.conv1 = Linear(self.kernel * feat_dim, d_model, rng)
        self.conv2 = Linear(self.kernel * d_model, d_model, rng)
        self.proj = Linear(d_model, d_model, rng)

    def stage1(self, feats: Tensor) -> Tensor:
        """Pre-activation output of the first convolution."""
        return self.conv1(T.unfold_time(feats, self.kernel, self.stride))

    def __call__(self, feats: Tensor, lengths=None):
        """``feats`` is (B, T, F); returns (B, T', D) and per-item output lengths."""
        if feats.shape[-1] != self.feat_dim:
            raise ConfigError(f"expected feature dim {self.feat_dim}, got {feats.shape[-1]}")
        b, t, _ = feats.shape
        lengths = np.full(b, t) if lengths is None else np.asarray(lengths)
        if lengths.min() < MIN_FRAMES:
            raise LengthError(f"utterance of {int(lengths.min())} frames is below the "
                              f"minimum of {MIN_FRAMES} admitted by 4x subsampling")
        x = T.silu(self.stage1(feats))
        x = T.silu(self.conv2(T.unfold_time(x, self.kernel, self.stride)))
        x = self.proj(x)
        x = x + sinusoid_positions(x.shape[1], x.shape[2], x.dtype)
        return x, subsampled_length(lengths)


class LengthError(ValueError):
    """Input too short for the subsampler."""


def key_padding_bias(lengths, t_max: int, dtype=np.float32) -> np.ndarray | None:
    """(B, 1, 1, T) additive attention bias hiding padded key positions."""
    lengths = np.asarray(lengths)
    if (lengths == t_max).all():
        return None
    pad = np.arange(t_max)[None, :] >= lengths[:, None]
    return np.where(pad, -1e9, 0.0).astype(dtype)[:, None, None, :]
