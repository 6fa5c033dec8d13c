"""Line-based ``key=value`` experiment configuration.

Blank lines and ``#`` comments are ignored; unknown keys are rejected. The
digest is SHA-256 over the normalized text: every key (defaults filled in)
as ``key=value`` in sorted order, one per line.

Every random stream derives from ``seed``: corpus rendering, weight init,
batch order, SpecAugment and dropout each use ``numpy.random.default_rng``
on ``[seed, <stream id>, ...]``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .nn.layers import ConfigError
from .sim import CorpusSpec, SimConfig
from .training import TrainConfig


DEFAULTS: dict[str, object] = {
    "seed": 1,
    # synthetic corpus
    "tokens_per_lang": 20,
    "feat_dim": 16,
    "dur_min": 8,
    "dur_max": 16,
    "noise_std": 0.14,
    "proto_scale": 0.4,
    "min_proto_dist": 0.6,
    "silence_max": 4,
    "mono_len_min": 3,
    "mono_len_max": 10,
    "cs_len_min": 6,
    "cs_len_max": 12,
    "cs_switch_min": 1,
    "cs_switch_max": 3,
    "cap_frames": 300,
    "n_train_mono_a": 2000,
    "n_train_mono_b": 2000,
    "n_train_cs": 1000,
    "n_train_simu_cs": 1000,
    "n_eval_mono_a": 200,
    "n_eval_mono_b": 200,
    "n_eval_cs": 200,
    # model
    "arch": "lae",
    "n_total": 5,
    "n_each": 2,
    "n_front": 1,
    "n_shared": 3,
    "n_specific": 1,
    "d_model": 64,
    "d_ff": 128,
    "heads": 4,
    "dropout": 0.1,
    # training
    "epochs": 30,
    "batch_size": 16,
    "accum": 1,
    "peak_lr": 1e-3,
    "warmup": 500,
    "aux_loss": True,
    "probe": False,
    "n_time_masks": 2,
    "n_freq_masks": 2,
    "max_time_width": 5,
    "max_freq_width": 2,
    "average_last": 5,
    "clip_norm": 5.0,
    "train_partitions": "train-mono-A,train-mono-B,train-CS",
    # decoding
    "beam": 10,
    "lm_weight": 0.2,
    "lm_order": 3,
}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        vals = dict(DEFAULTS)
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{source}:{n}: unknown key {key!r}")
            vals[key] = _parse_value(key, raw)
        return cls(vals)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"), str(path))

    def replace(self, **kw) -> "ExperimentConfig":
        vals = dict(self.values)
        for k, v in kw.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown key {k!r}")
            vals[k] = v
        return ExperimentConfig(vals)

    def __getitem__(self, key):
        return self.values[key]

    def normalized(self) -> str:
        return "".join(f"{k}={_fmt(self.values[k])}\n" for k in sorted(self.values))

    def digest(self) -> bytes:
        return hashlib.sha256(self.normalized().encode("utf-8")).digest()

    def hexdigest(self) -> str:
        return self.digest().hex()

    # typed views ------------------------------------------------------------
    def sim(self) -> SimConfig:
        v = self.values
        return SimConfig(**{f.name: v[f.name] for f in fields(SimConfig) if f.name in v})

    def corpus_spec(self) -> CorpusSpec:
        v = self.values
        return CorpusSpec({
            "train-mono-A": v["n_train_mono_a"], "train-mono-B": v["n_train_mono_b"],
            "train-CS": v["n_train_cs"], "train-simu-CS": v["n_train_simu_cs"],
            "eval-mono-A": v["n_eval_mono_a"], "eval-mono-B": v["n_eval_mono_b"],
            "eval-CS": v["n_eval_cs"],
        })

    def model(self, vocab_size: int, arch: str | None = None) -> ModelConfig:
        v = self.values
        return ModelConfig(arch=arch or v["arch"], n_total=v["n_total"], n_each=v["n_each"],
                           n_front=v["n_front"], n_shared=v["n_shared"], n_specific=v["n_specific"],
                           d_model=v["d_model"], d_ff=v["d_ff"], heads=v["heads"],
                           feat_dim=v["feat_dim"], vocab_size=vocab_size, dropout=v["dropout"],
                           seed=v["seed"])

    def train(self, **overrides) -> TrainConfig:
        v = self.values
        kw = {f.name: v[f.name] for f in fields(TrainConfig) if f.name in v}
        kw["seed"] = v["seed"]
        kw.update(overrides)
        return TrainConfig(**kw)

    def train_partitions(self) -> list[str]:
        return [p.strip() for p in self.values["train_partitions"].split(",") if p.strip()]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)
