"""Scoring and language-discrimination analyses.

Error attribution: substitutions and deletions belong to the language of the
reference token; insertions to the language of the inserted hypothesis token
(a mask token counts for the language it stands for).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .ctc import BLANK, Hypothesis, prefix_beam_search
from .data import Utterance
from .model import EncoderModel
from .nn import tensor as T
from .training import PROBE_CLASS, pad_batch
from .vocab import LANG_A, LANG_B, Vocabulary

PROBE_LABELS = {v: k for k, v in PROBE_CLASS.items()}


# -- alignment ----------------------------------------------------------------

@dataclass
class AlignmentCounts:
    sub: int = 0
    dele: int = 0
    ins: int = 0
    n_ref: int = 0
    per_lang: dict = field(default_factory=dict)  # lang -> [S, D, I, N]

    @property
    def errors(self) -> int:
        return self.sub + self.dele + self.ins

    def rate(self) -> float:
        return self.errors / self.n_ref if self.n_ref else math.nan

    def lang_rate(self, lang: str) -> float:
        s, d, i, n = self.per_lang.get(lang, [0, 0, 0, 0])
        return (s + d + i) / n if n else math.nan

    def __iadd__(self, other: "AlignmentCounts"):
        self.sub += other.sub
        self.dele += other.dele
        self.ins += other.ins
        self.n_ref += other.n_ref
        for lang, vals in other.per_lang.items():
            acc = self.per_lang.setdefault(lang, [0, 0, 0, 0])
            for i in range(4):
                acc[i] += vals[i]
        return self


def edit_distance(ref: Sequence, hyp: Sequence):
    """Unit-cost Levenshtein alignment.

    Returns ``(AlignmentCounts, trace)`` where ``trace`` lists
    ``(op, ref_index, hyp_index)`` with op in ``C S D I``. On equal cost the
    backtrace prefers a diagonal step, then an insertion, then a deletion.
    """
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(diag, dist[i, j - 1] + 1, dist[i - 1, j] + 1)
    trace = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            trace.append(("C" if ref[i - 1] == hyp[j - 1] else "S", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif j > 0 and dist[i, j] == dist[i, j - 1] + 1:
            trace.append(("I", None, j - 1))
            j -= 1
        else:
            trace.append(("D", i - 1, None))
            i -= 1
    trace.reverse()
    counts = AlignmentCounts(
        sub=sum(op == "S" for op, _, _ in trace),
        dele=sum(op == "D" for op, _, _ in trace),
        ins=sum(op == "I" for op, _, _ in trace),
        n_ref=n,
    )
    return counts, trace


def token_language(k: int, vocab: Vocabulary) -> str:
    if k == vocab.mask_a:
        return LANG_A
    if k == vocab.mask_b:
        return LANG_B
    return vocab.tag(k)


def attributed_counts(ref: Sequence[int], hyp: Sequence[int], vocab: Vocabulary) -> AlignmentCounts:
    counts, trace = edit_distance(ref, hyp)
    per = {LANG_A: [0, 0, 0, 0], LANG_B: [0, 0, 0, 0]}
    for k in ref:
        per.setdefault(token_language(k, vocab), [0, 0, 0, 0])[3] += 1
    for op, i, j in trace:
        if op == "S":
            per[token_language(ref[i], vocab)][0] += 1
        elif op == "D":
            per[token_language(ref[i], vocab)][1] += 1
        elif op == "I":
            per.setdefault(token_language(hyp[j], vocab), [0, 0, 0, 0])[2] += 1
    counts.per_lang = per
    return counts


@dataclass
class ErrorRates:
    MER: float
    ER_A: float
    ER_B: float
    counts: AlignmentCounts
    per_utt: list  # errors per utterance, aligned with the inputs


def mixed_error_rate(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]],
                     vocab: Vocabulary) -> ErrorRates:
    if len(refs) != len(hyps):
        raise ValueError("reference and hypothesis counts differ")
    total = AlignmentCounts(per_lang={LANG_A: [0, 0, 0, 0], LANG_B: [0, 0, 0, 0]})
    per_utt = []
    for r, h in zip(refs, hyps):
        c = attributed_counts(list(r), list(h), vocab)
        per_utt.append(c.errors)
        total += c
    return ErrorRates(total.rate(), total.lang_rate(LANG_A), total.lang_rate(LANG_B), total, per_utt)


SCORE_FIELDS = ("partition", "system", "MER", "ER_A", "ER_B", "N", "S", "D", "I")


def _pct(x: float) -> str:
    return "nan" if math.isnan(x) else f"{100.0 * x:.4f}"


def score_row(partition: str, system: str, er: ErrorRates) -> list:
    c = er.counts
    return [partition, system, _pct(er.MER), _pct(er.ER_A), _pct(er.ER_B), c.n_ref, c.sub, c.dele, c.ins]


def write_score_report(fh, rows: list[list]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SCORE_FIELDS)
    w.writerows(rows)


# -- batched inference ----------------------------------------------------------

def grids(model: EncoderModel, utts: Sequence[Utterance], batch_size: int = 32,
          want=("global", "auxA", "auxB")):
    """Per-utterance log-posterior grids (T' x V) from each requested decoder, eval mode."""
    model.eval()
    order = sorted(range(len(utts)), key=lambda i: utts[i].n_frames)
    slots: dict[str, list] = {k: [None] * len(utts) for k in list(want) + ["h_bil"]}
    with T.no_grad():
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            feats, lengths = pad_batch([utts[i].features for i in idx], model.dtype)
            enc = model.encode(T.Tensor(feats), lengths)
            lp = {}
            if "global" in want:
                lp["global"] = T.log_softmax(model.global_logits(enc.h_bil)).data
            if enc.h_a is not None:
                if "auxA" in want:
                    lp["auxA"] = T.log_softmax(model.aux_logits(enc.h_a)).data
                if "auxB" in want:
                    lp["auxB"] = T.log_softmax(model.aux_logits(enc.h_b)).data
            for row, i in enumerate(idx):
                n = int(enc.lengths[row])
                for k, arr in lp.items():
                    slots[k][i] = arr[row, :n].astype(np.float64)
                slots["h_bil"][i] = enc.h_bil.data[row, :n].astype(np.float64)
    return slots


def decode(model: EncoderModel, utts: Sequence[Utterance], decoder: str = "global", beam: int = 10,
           lm=None, lm_weight: float = 0.0) -> list[list[Hypothesis]]:
    g = grids(model, utts, want=(decoder,))[decoder]
    if any(x is None for x in g):
        raise ValueError(f"model has no {decoder} decoder")
    return [prefix_beam_search(x, beam, lm, lm_weight) for x in g]


# -- utterance-level language probe ---------------------------------------------

@dataclass
class LanguageProbe:
    weight: np.ndarray | None = None  # (D, 3)
    bias: np.ndarray | None = None

    @property
    def trained(self) -> bool:
        return self.weight is not None

    def logits(self, x: np.ndarray) -> np.ndarray:
        if not self.trained:
            raise RuntimeError("language probe has not been trained")
        return np.asarray(x) @ self.weight + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)


def fit_probe(x: np.ndarray, y: np.ndarray, steps: int = 3000, lr: float = 0.05,
              seed: int = 0) -> LanguageProbe:
    """Multinomial logistic regression by full-batch Adam on fixed inputs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n, d = x.shape
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, size=(d, 3))
    b = np.zeros(3)
    onehot = np.eye(3)[y]
    mw, vw, mb, vb = (np.zeros_like(w), np.zeros_like(w), np.zeros_like(b), np.zeros_like(b))
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, steps + 1):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        gw, gb = x.T @ g, g.sum(axis=0)
        mw = b1 * mw + (1 - b1) * gw
        vw = b2 * vw + (1 - b2) * gw * gw
        mb = b1 * mb + (1 - b1) * gb
        vb = b2 * vb + (1 - b2) * gb * gb
        w -= lr * (mw / (1 - b1 ** t)) / (np.sqrt(vw / (1 - b2 ** t)) + eps)
        b -= lr * (mb / (1 - b1 ** t)) / (np.sqrt(vb / (1 - b2 ** t)) + eps)
    return LanguageProbe(w, b)


def utterance_embeddings(model: EncoderModel, utts: Sequence[Utterance]) -> np.ndarray:
    """Time-mean of ``h_bil`` per utterance."""
    h = grids(model, utts, want=())["h_bil"]
    return np.stack([x.mean(axis=0) for x in h])


def train_probe(model: EncoderModel, corpus: Sequence[Utterance], steps: int = 3000,
                seed: int = 0) -> LanguageProbe:
    """Fit the 3-way probe on frozen encoder outputs; also stores it in ``model.probe``."""
    x = utterance_embeddings(model, corpus)
    y = np.array([PROBE_CLASS[u.kind] for u in corpus])
    probe = fit_probe(x, y, steps=steps, seed=seed)
    model.probe.weight.data = probe.weight.astype(model.dtype)
    model.probe.bias.data = probe.bias.astype(model.dtype)
    return probe


def classify(probe: LanguageProbe, model: EncoderModel, utt: Utterance) -> str:
    return PROBE_LABELS[int(probe.predict(utterance_embeddings(model, [utt]))[0])]


@dataclass
class ProbeResult:
    predictions: dict  # utt_id -> class name
    accuracy: dict  # partition -> accuracy
    distribution: dict  # partition -> {class: count}


def probe_accuracy(probe: LanguageProbe, model: EncoderModel, utts: Sequence[Utterance]) -> ProbeResult:
    pred = probe.predict(utterance_embeddings(model, utts))
    preds, acc, dist = {}, {}, {}
    hits: dict[str, list] = {}
    for u, k in zip(utts, pred):
        name = PROBE_LABELS[int(k)]
        preds[u.utt_id] = name
        hits.setdefault(u.partition, []).append(name == u.kind)
        dist.setdefault(u.partition, {c: 0 for c in PROBE_CLASS})[name] += 1
    for part, h in hits.items():
        acc[part] = float(np.mean(h))
    return ProbeResult(preds, acc, dist)


# -- language-specific decoding ---------------------------------------------------

def project(tokens: Sequence[int], lang: str, vocab: Vocabulary) -> list[int]:
    """Keep only ordinary tokens of ``lang`` (drops masks and the other language)."""
    return [k for k in tokens if k > 2 and vocab.tag(k) == lang]


@dataclass
class AuxDecodeResult:
    which: str
    projected: ErrorRates  # target-language projections of both sides
    full: ErrorRates  # raw hypothesis against the full reference
    other_language_tokens: int  # ordinary tokens of the non-target language emitted
    hyps: list


def aux_decode_eval(model: EncoderModel, utts: Sequence[Utterance], which: str, vocab: Vocabulary,
                    beam: int = 10) -> AuxDecodeResult:
    lang = LANG_A if which in ("A", "auxA") else LANG_B
    other = LANG_B if lang == LANG_A else LANG_A
    hyps = [h[0].tokens for h in decode(model, utts, "aux" + lang, beam)]
    refs = [u.targets for u in utts]
    projected = mixed_error_rate([project(r, lang, vocab) for r in refs],
                                 [project(h, lang, vocab) for h in hyps], vocab)
    full = mixed_error_rate(refs, hyps, vocab)
    leaked = sum(1 for h in hyps for k in h if k > 2 and vocab.tag(k) == other)
    return AuxDecodeResult(which, projected, full, leaked, hyps)


# -- frame-level spikes -------------------------------------------------------------

SPIKE_FIELDS = ("frame", "ref_lang",
                "global_top", "global_prob", "global_blank",
                "auxA_top", "auxA_prob", "auxA_blank",
                "auxB_top", "auxB_prob", "auxB_blank")

SUBSAMPLE = 4


def frame_languages(utt: Utterance, n_out: int, vocab: Vocabulary | None = None) -> list[str]:
    """Reference language under each subsampled frame (its receptive-field centre), ``-`` for silence."""
    langs = []
    for i in range(n_out):
        centre = SUBSAMPLE * i + 3
        lang = "-"
        for (s, e), tag in zip(utt.spans, utt.tags):
            if s <= centre < e:
                lang = tag
                break
        langs.append(lang)
    return langs


def spike_table(model: EncoderModel, utt: Utterance) -> list[list]:
    g = grids(model, [utt])
    n = g["global"][0].shape[0]
    langs = frame_languages(utt, n)
    rows = []
    for t in range(n):
        row = [t, langs[t]]
        for k in ("global", "auxA", "auxB"):
            p = np.exp(g[k][0][t])
            top = int(np.argmax(p))
            row += [top, f"{p[top]:.6f}", f"{p[BLANK]:.6f}"]
        rows.append(row)
    return rows


def export_spikes(model: EncoderModel, utt: Utterance, fh=None) -> str:
    """Per-frame top-1 id/probability and blank probability of all three decoders as CSV."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SPIKE_FIELDS)
    w.writerows(spike_table(model, utt))
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


@dataclass
class SpikeStats:
    # non-blank spikes of each branch inside spans of the *other* language
    a_spikes: int = 0
    a_mask: int = 0
    b_spikes: int = 0
    b_mask: int = 0

    @property
    def mask_fraction(self) -> float:
        n = self.a_spikes + self.b_spikes
        return (self.a_mask + self.b_mask) / n if n else math.nan


def spike_stats(model: EncoderModel, utts: Sequence[Utterance], vocab: Vocabulary) -> SpikeStats:
    g = grids(model, utts, want=("auxA", "auxB"))
    st = SpikeStats()
    for u, ga, gb in zip(utts, g["auxA"], g["auxB"]):
        langs = frame_languages(u, ga.shape[0])
        top_a, top_b = ga.argmax(axis=1), gb.argmax(axis=1)
        for t, lang in enumerate(langs):
            if lang == LANG_B and top_a[t] != BLANK:
                st.a_spikes += 1
                st.a_mask += int(top_a[t] == vocab.mask_b)
            if lang == LANG_A and top_b[t] != BLANK:
                st.b_spikes += 1
                st.b_mask += int(top_b[t] == vocab.mask_a)
    return st


def idle_branch_fraction(model: EncoderModel, utts: Sequence[Utterance], vocab: Vocabulary,
                         branch: str) -> float:
    """Share of non-blank argmax frames of ``branch`` that are the other-language mask."""
    mask = vocab.mask_a if branch == "auxB" else vocab.mask_b
    g = grids(model, utts, want=(branch,))[branch]
    spikes = hits = 0
    for x in g:
        top = x.argmax(axis=1)
        nb = top != BLANK
        spikes += int(nb.sum())
        hits += int((top[nb] == mask).sum())
    return hits / spikes if spikes else math.nan


# -- significance -----------------------------------------------------------------

@dataclass
class SigTest:
    z: float
    p_value: float
    p_permutation: float
    n: int
    mean_diff: float


def mapsswe_test(errors_1: Sequence[float], errors_2: Sequence[float], resamples: int = 10000,
                 seed: int = 0) -> SigTest:
    """Matched-pairs test on per-utterance error counts.

    ``z = mean(d) / (std(d) / sqrt(n))`` with ``d = errors_1 - errors_2``, two-sided
    normal p-value, plus a seeded random sign-flip permutation p-value.
    """
    e1 = np.asarray(errors_1, dtype=np.float64)
    e2 = np.asarray(errors_2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise ValueError("per-utterance error lists differ in length")
    n = e1.size
    if n < 2:
        raise ValueError("need at least two utterances")
    d = e1 - e2
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        z = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
        p = 1.0 if mean == 0.0 else 0.0
    else:
        z = mean / (sd / math.sqrt(n))
        p = float(2.0 * stats.norm.sf(abs(z)))
    rng = np.random.default_rng(seed)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(resamples, n))
    perm = np.abs((signs * d).mean(axis=1))
    p_perm = float((np.sum(perm >= abs(mean) - 1e-12) + 1) / (resamples + 1))
    return SigTest(float(z), p, min(p_perm, 1.0), n, float(mean))
