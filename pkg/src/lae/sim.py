"""Synthetic two-language corpus.

Each token has an acoustic prototype living in its language's half of the
feature dimensions (A: ``[0, F/2)``, B: ``[F/2, F)``). An utterance is
rendered by repeating each prototype for a sampled duration, smoothing the
clean track with a 3-frame moving average (coarticulation), padding with
silence and adding Gaussian noise everywhere. Token sequences follow a
per-language first-order Markov chain so an n-gram model has structure to learn.

Native code-switched utterances are rendered in one pass, so smoothing runs
across language switches. Spliced (simulated) ones concatenate separately
rendered monolingual utterances, silences and all.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PARTITIONS, Utterance, save_corpus
from .vocab import LANG_A, LANG_B, Vocabulary

# rng stream ids; eval partitions use their own ids so they never share draws with train
PARTITION_STREAM = {p: i + 10 for i, p in enumerate(PARTITIONS)}
LANGUAGE_STREAM = 1


@dataclass(frozen=True)
class SimConfig:
    tokens_per_lang: int = 20
    feat_dim: int = 16
    dur_min: int = 8
    dur_max: int = 16
    noise_std: float = 0.14
    proto_scale: float = 0.4
    min_proto_dist: float = 0.6
    silence_max: int = 4
    smooth: bool = True
    mono_len_min: int = 3
    mono_len_max: int = 10
    cs_len_min: int = 6
    cs_len_max: int = 12
    cs_switch_min: int = 1
    cs_switch_max: int = 3
    successors: int = 4
    successor_mass: float = 0.8
    cap_frames: int = 300
    splice_retries: int = 200

    def __post_init__(self):
        if self.feat_dim % 2:
            raise ValueError("feature dim must be even (two language subspaces)")
        if not 1 <= self.dur_min <= self.dur_max:
            raise ValueError("bad duration range")
        if self.min_proto_dist <= 4 * self.noise_std:
            raise ValueError("prototypes must be more than 4 noise std apart")


@dataclass(frozen=True)
class CorpusSpec:
    counts: dict

    @classmethod
    def stock(cls, simu_cs: int = 1000):
        return cls({"train-mono-A": 2000, "train-mono-B": 2000, "train-CS": 1000,
                    "train-simu-CS": simu_cs, "eval-mono-A": 200, "eval-mono-B": 200, "eval-CS": 200})


class SyntheticLanguage:
    def __init__(self, label: str, token_ids, prototypes: np.ndarray, transitions: np.ndarray,
                 cfg: SimConfig):
        self.label = label
        self.token_ids = list(token_ids)
        self.prototypes = prototypes  # (n_tokens, F)
        self.transitions = transitions  # (n_tokens, n_tokens) row-stochastic
        self.cfg = cfg

    @property
    def active_dims(self) -> slice:
        half = self.cfg.feat_dim // 2
        return slice(0, half) if self.label == LANG_A else slice(half, self.cfg.feat_dim)

    def prototype(self, token_id: int) -> np.ndarray:
        return self.prototypes[self.token_ids.index(token_id)]

    def sample_tokens(self, n: int, rng: np.random.Generator, first=None) -> list[int]:
        k = len(self.token_ids)
        idx = [int(rng.integers(k))] if first is None else [first]
        while len(idx) < n:
            idx.append(int(rng.choice(k, p=self.transitions[idx[-1]])))
        return [self.token_ids[i] for i in idx]


def min_pairwise_distance(protos: np.ndarray) -> float:
    d = np.linalg.norm(protos[:, None, :] - protos[None, :, :], axis=-1)
    d[np.diag_indices_from(d)] = np.inf
    return float(d.min())


def make_languages(vocab: Vocabulary, cfg: SimConfig, seed: int) -> dict[str, SyntheticLanguage]:
    rng = np.random.default_rng([seed, LANGUAGE_STREAM])
    half = cfg.feat_dim // 2
    langs = {}
    for label, ids in ((LANG_A, vocab.a_ids), (LANG_B, vocab.b_ids)):
        n = len(ids)
        for _ in range(1000):
            sub = rng.normal(0.0, cfg.proto_scale, size=(n, half))
            if n < 2 or min_pairwise_distance(sub) > cfg.min_proto_dist:
                break
        else:
            raise RuntimeError("could not draw separable prototypes; lower min_proto_dist")
        protos = np.zeros((n, cfg.feat_dim))
        cols = slice(0, half) if label == LANG_A else slice(half, cfg.feat_dim)
        protos[:, cols] = sub
        trans = np.full((n, n), (1.0 - cfg.successor_mass) / n)
        for i in range(n):
            favored = rng.choice(n, size=min(cfg.successors, n), replace=False)
            trans[i, favored] += cfg.successor_mass / len(favored)
        langs[label] = SyntheticLanguage(label, ids, protos, trans, cfg)
    return langs


def _smooth(track: np.ndarray) -> np.ndarray:
    padded = np.concatenate([track[:1], track, track[-1:]], axis=0)
    return (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0


def render(token_ids, tags, langs: dict[str, SyntheticLanguage], rng: np.random.Generator,
           noise_std: float | None = None):
    """Render a token sequence to (features, spans)."""
    cfg = next(iter(langs.values())).cfg
    noise = cfg.noise_std if noise_std is None else noise_std
    lead = int(rng.integers(0, cfg.silence_max + 1))
    trail = int(rng.integers(0, cfg.silence_max + 1))
    rows = [np.zeros((lead, cfg.feat_dim))]
    spans, t = [], lead
    for tok, tag in zip(token_ids, tags):
        d = int(rng.integers(cfg.dur_min, cfg.dur_max + 1))
        rows.append(np.repeat(langs[tag].prototype(tok)[None, :], d, axis=0))
        spans.append((t, t + d))
        t += d
    rows.append(np.zeros((trail, cfg.feat_dim)))
    clean = np.concatenate(rows, axis=0)
    if cfg.smooth and len(clean) > 1:
        clean = _smooth(clean)
    feats = clean + rng.normal(0.0, noise, size=clean.shape)
    return feats.astype(np.float32), spans


def gen_monolingual(lang: SyntheticLanguage, length_range, rng, utt_id="", partition="",
                    noise_std=None) -> Utterance:
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    n = int(rng.integers(length_range[0], length_range[1] + 1))
    toks = lang.sample_tokens(n, rng)
    tags = (lang.label,) * n
    feats, spans = render(toks, tags, {lang.label: lang}, rng, noise_std)
    return Utterance(utt_id, feats, tuple(toks), tags, spans, partition)


def gen_code_switched(langs: dict[str, SyntheticLanguage], cfg: SimConfig, rng, utt_id="",
                      partition="") -> Utterance:
    """Natively code-switched utterance: one continuous render with 1..3 switch points."""
    n = int(rng.integers(cfg.cs_len_min, cfg.cs_len_max + 1))
    n_sw = int(rng.integers(cfg.cs_switch_min, min(cfg.cs_switch_max, n - 1) + 1))
    cuts = sorted(rng.choice(np.arange(1, n), size=n_sw, replace=False).tolist())
    bounds = [0] + cuts + [n]
    label = LANG_A if rng.random() < 0.5 else LANG_B
    toks, tags = [], []
    for s, e in zip(bounds[:-1], bounds[1:]):
        toks += langs[label].sample_tokens(e - s, rng)
        tags += [label] * (e - s)
        label = LANG_B if label == LANG_A else LANG_A
    feats, spans = render(toks, tags, langs, rng)
    return Utterance(utt_id, feats, tuple(toks), tuple(tags), spans, partition)


def splice_code_switch(utts: list[Utterance], utt_id="", partition="",
                       cap_frames: int | None = None) -> Utterance:
    """Concatenate utterances along time, with their targets, tags and re-offset spans."""
    utts = [u for u in utts if u.n_frames > 0 or u.targets]
    if not utts:
        raise ValueError("nothing to splice")
    if len(utts) == 1:
        u = utts[0]
        return Utterance(utt_id or u.utt_id, u.features.copy(), u.targets, u.tags, list(u.spans),
                         partition or u.partition)
    total = sum(u.n_frames for u in utts)
    if cap_frames is not None and total > cap_frames:
        raise ValueError(f"spliced length {total} exceeds cap {cap_frames}")
    feats = np.concatenate([u.features for u in utts], axis=0)
    toks, tags, spans, off = [], [], [], 0
    for u in utts:
        toks += list(u.targets)
        tags += list(u.tags)
        spans += [(s + off, e + off) for s, e in u.spans]
        off += u.n_frames
    return Utterance(utt_id, feats, tuple(toks), tuple(tags), spans, partition)


def gen_simulated_cs(pool_a: list[Utterance], pool_b: list[Utterance], cfg: SimConfig, rng,
                     utt_id="", partition="train-simu-CS") -> Utterance:
    """Splice 2..4 monolingual utterances of alternating language under the frame cap."""
    for attempt in range(cfg.splice_retries):
        n_seg = int(rng.integers(cfg.cs_switch_min, cfg.cs_switch_max + 1)) + 1
        if attempt >= cfg.splice_retries // 2:
            n_seg = 2
        budget = cfg.cap_frames // n_seg if attempt >= cfg.splice_retries // 4 else None
        label = LANG_A if rng.random() < 0.5 else LANG_B
        segs = []
        for _ in range(n_seg):
            pool = pool_a if label == LANG_A else pool_b
            if budget is not None:
                pool = [u for u in pool if u.n_frames <= budget] or pool
            segs.append(pool[int(rng.integers(len(pool)))])
            label = LANG_B if label == LANG_A else LANG_A
        if sum(u.n_frames for u in segs) <= cfg.cap_frames:
            return splice_code_switch(segs, utt_id, partition)
    raise RuntimeError(f"could not splice an utterance under {cfg.cap_frames} frames")


def utt_rng(seed: int, partition: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, PARTITION_STREAM[partition], index])


def gen_partition(partition: str, count: int, langs, cfg: SimConfig, seed: int,
                  pools=None) -> list[Utterance]:
    out = []
    for i in range(count):
        rng = utt_rng(seed, partition, i)
        uid = f"{partition}-{i:05d}"
        if partition.endswith("mono-A"):
            u = gen_monolingual(langs[LANG_A], (cfg.mono_len_min, cfg.mono_len_max), rng, uid, partition)
        elif partition.endswith("mono-B"):
            u = gen_monolingual(langs[LANG_B], (cfg.mono_len_min, cfg.mono_len_max), rng, uid, partition)
        elif partition == "train-simu-CS":
            u = gen_simulated_cs(pools[LANG_A], pools[LANG_B], cfg, rng, uid, partition)
        else:
            u = gen_code_switched(langs, cfg, rng, uid, partition)
        out.append(u)
    return out


def gen_corpus(spec: CorpusSpec, vocab: Vocabulary, cfg: SimConfig, seed: int,
               out_dir=None) -> list[Utterance]:
    """Generate every partition in ``spec``; when ``out_dir`` is given, write features and manifest."""
    unknown = set(spec.counts) - set(PARTITIONS)
    if unknown:
        raise ValueError(f"unknown partitions: {sorted(unknown)}")
    langs = make_languages(vocab, cfg, seed)
    made: dict[str, list[Utterance]] = {}
    for part in PARTITIONS:
        n = spec.counts.get(part, 0)
        if part == "train-simu-CS":
            if n == 0:
                continue
            pools = {LANG_A: made.get("train-mono-A"), LANG_B: made.get("train-mono-B")}
            if not pools[LANG_A] or not pools[LANG_B]:
                # splicing sources are the monolingual training sets, generated on demand
                pools = {LANG_A: gen_partition("train-mono-A", max(n, 1), langs, cfg, seed),
                         LANG_B: gen_partition("train-mono-B", max(n, 1), langs, cfg, seed)}
            made[part] = gen_partition(part, n, langs, cfg, seed, pools)
        elif n:
            made[part] = gen_partition(part, n, langs, cfg, seed)
    utts = [u for part in PARTITIONS for u in made.get(part, [])]
    if out_dir is not None:
        save_corpus(utts, out_dir)
        vocab.save(f"{out_dir}/vocab.tsv")
    return utts
