"""Vanilla, Bi-Encoder and language-aware encoder (LAE) CTC models.

All three share one class. ``shared`` is the stack every frame passes
through; ``blockA``/``blockB`` are the per-language stacks whose outputs are
summed frame by frame into ``h_bil``. The vanilla model has no branches.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .nn import tensor as T
from .nn.layers import ConfigError, LayerStack, Linear, Module, Subsampler, key_padding_bias
from .nn.tensor import Tensor

ARCHS = ("vanilla", "bi-encoder", "lae")
N_PROBE_CLASSES = 3


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "lae"
    n_total: int = 5  # vanilla
    n_each: int = 2  # bi-encoder, per branch
    n_front: int = 1  # bi-encoder, shared layers before the branches
    n_shared: int = 3  # lae
    n_specific: int = 1  # lae, per branch
    d_model: int = 64
    d_ff: int = 128
    heads: int = 4
    feat_dim: int = 16
    vocab_size: int = 43
    dropout: float = 0.1
    seed: int = 0

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        counts = {"vanilla": (self.n_total,), "bi-encoder": (self.n_each, self.n_front),
                  "lae": (self.n_shared, self.n_specific)}[self.arch]
        if min(counts) < 1:
            raise ConfigError(f"{self.arch}: every layer count must be >= 1, got {counts}")
        if min(self.d_model, self.d_ff, self.heads, self.feat_dim) < 1 or self.vocab_size < 4:
            raise ConfigError("dimensions must be positive and the vocabulary non-trivial")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        return self

    @property
    def branched(self) -> bool:
        return self.arch != "vanilla"

    def to_dict(self):
        return asdict(self)


class Encoded(NamedTuple):
    h_a: Tensor | None
    h_b: Tensor | None
    h_bil: Tensor
    lengths: np.ndarray
    key_bias: np.ndarray | None


def combine(h_a, h_b):
    """Frame-level addition of the two language branches."""
    if h_a.shape != h_b.shape:
        raise ValueError(f"cannot combine shapes {h_a.shape} and {h_b.shape}")
    if isinstance(h_a, Tensor) or isinstance(h_b, Tensor):
        return T.add(h_a, h_b)
    return np.asarray(h_a) + np.asarray(h_b)


def _rng(seed, part):
    return np.random.default_rng([seed, part])


class EncoderModel(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        c = config
        self.subsampler = Subsampler(c.feat_dim, c.d_model, _rng(c.seed, 0))

        def stack(n, rng, final_norm):
            return LayerStack(n, c.d_model, c.d_ff, c.heads, rng, c.dropout, final_norm)

        if c.arch == "vanilla":
            self.shared = stack(c.n_total, _rng(c.seed, 1), True)
            self.blockA = self.blockB = None
            self.aux_decoder = None
        else:
            n_shared, n_branch = (c.n_front, c.n_each) if c.arch == "bi-encoder" else (c.n_shared, c.n_specific)
            self.shared = stack(n_shared, _rng(c.seed, 1), False)
            # identical seeds: the branches start as exact copies
            self.blockA = stack(n_branch, _rng(c.seed, 2), True)
            self.blockB = stack(n_branch, _rng(c.seed, 2), True)
            self.aux_decoder = Linear(c.d_model, c.vocab_size, _rng(c.seed, 4))
        self.global_decoder = Linear(c.d_model, c.vocab_size, _rng(c.seed, 3))
        self.probe = Linear(c.d_model, N_PROBE_CLASSES, _rng(c.seed, 5))

    # parameters ------------------------------------------------------------
    def probe_parameter_names(self) -> set[str]:
        return {k for k in self.named_parameters() if k.startswith("probe.")}

    def parameter_count(self, include_probe: bool = False) -> int:
        return sum(p.data.size for k, p in self.named_parameters().items()
                   if p.trainable and (include_probe or not k.startswith("probe.")))

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state(self, params: dict[str, np.ndarray], strict: bool = True):
        own = self.named_parameters()
        if strict and set(own) != set(params):
            missing = sorted(set(own) - set(params))
            extra = sorted(set(params) - set(own))
            raise ConfigError(f"checkpoint mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, p in own.items():
            if k not in params:
                continue
            if p.data.shape != params[k].shape:
                raise ConfigError(f"shape mismatch for {k}: {params[k].shape} vs {p.data.shape}")
            p.data = np.asarray(params[k], dtype=p.data.dtype).copy()
        return self

    def astype(self, dtype):
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        return self

    def set_dropout_rng(self, rng: np.random.Generator | None):
        for m in self.modules():
            if hasattr(m, "rng"):
                m.rng = rng

    # forward ---------------------------------------------------------------
    def encode(self, feats, lengths=None) -> Encoded:
        """``feats`` is (B, T, F) or (T, F). Returns branch outputs and their sum."""
        x = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=self.dtype))
        if x.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
        h, out_len = self.subsampler(x, lengths)
        bias = key_padding_bias(out_len, h.shape[1], h.dtype)
        h = self.shared(h, bias)
        if self.blockA is None:
            return Encoded(None, None, h, out_len, bias)
        h_a = self.blockA(h, bias)
        h_b = self.blockB(h, bias)
        return Encoded(h_a, h_b, combine(h_a, h_b), out_len, bias)

    def global_logits(self, h_bil: Tensor) -> Tensor:
        return self.global_decoder(h_bil)

    def aux_logits(self, h_lang: Tensor) -> Tensor:
        if self.aux_decoder is None:
            raise ConfigError("the vanilla model has no auxiliary decoder")
        return self.aux_decoder(h_lang)

    def probe_logits(self, h_bil: Tensor, lengths) -> Tensor:
        """Utterance class logits from the time-mean of ``h_bil``; no gradient reaches the encoder."""
        h = T.detach(h_bil)
        mask = (np.arange(h.shape[1])[None, :] < np.asarray(lengths)[:, None])[:, :, None]
        return self.probe(T.mean_axis(h, 1, mask))

    @property
    def dtype(self):
        return self.global_decoder.weight.data.dtype


def build_model(config: ModelConfig) -> EncoderModel:
    return EncoderModel(config)


def log_posteriors(model: EncoderModel, features: np.ndarray) -> dict[str, np.ndarray]:
    """Per-frame log-posteriors (T' x V) of every decoder for one utterance, eval mode."""
    was = model.training
    model.eval()
    try:
        with T.no_grad():
            enc = model.encode(features)
            out = {"global": T.log_softmax(model.global_logits(enc.h_bil)).data[0]}
            if enc.h_a is not None:
                out["auxA"] = T.log_softmax(model.aux_logits(enc.h_a)).data[0]
                out["auxB"] = T.log_softmax(model.aux_logits(enc.h_b)).data[0]
    finally:
        model.train(was)
    return out
