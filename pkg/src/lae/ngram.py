"""Token n-gram language model with Witten-Bell smoothing.

The interpolated Witten-Bell estimate

    P(w | h) = (c(h, w) + T(h) * P(w | h')) / (c(h) + T(h))

(``T(h)`` = distinct successors of ``h``, ``h'`` = ``h`` minus its oldest
token) is stored in backoff form: explicit probabilities for seen ``(h, w)``
and a backoff weight ``T(h) / (c(h) + T(h))`` per seen history. The unigram
level interpolates with a uniform distribution over the vocabulary, so every
in-vocabulary token (and ``<unk>``) has a finite log-probability.

Text format (ARPA-like, log10, tab-separated, entries sorted)::

    \\data\\
    ngram 1=<count>
    ...
    \\1-grams:
    <log10 p>\\t<tokens>[\\t<log10 backoff>]
    ...
    \\end\\
"""
from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

BOS, EOS, UNK = "<s>", "</s>", "<unk>"
LOG10 = math.log(10.0)
NO_PROB = -99.0


class NgramModel:
    def __init__(self, order: int, probs: dict, backoffs: dict, vocab: Iterable[str]):
        self.order = order
        self.probs = probs  # context tuple -> {token: ln p}
        self.backoffs = backoffs  # context tuple -> ln weight
        self.vocab = frozenset(vocab)

    def log_prob(self, token: str, context: Sequence[str] = ()) -> float:
        """Natural-log P(token | context); unknown tokens score as ``<unk>``."""
        if token not in self.vocab:
            token = UNK
        ctx = tuple(context)[-(self.order - 1):] if self.order > 1 else ()
        acc = 0.0
        while True:
            dist = self.probs.get(ctx)
            if dist is not None and token in dist:
                return acc + dist[token]
            if not ctx:
                return acc + self.probs[()][UNK]
            acc += self.backoffs.get(ctx, 0.0)
            ctx = ctx[1:]

    def distribution(self, context: Sequence[str]) -> dict[str, float]:
        """Full conditional distribution over predictable tokens (excludes ``<s>``)."""
        return {w: math.exp(self.log_prob(w, context)) for w in self.vocab if w != BOS}

    def contexts(self):
        return list(self.probs)

    # serialization ---------------------------------------------------------
    def to_arpa(self) -> str:
        by_order: dict[int, list[tuple]] = defaultdict(list)
        for ctx, dist in self.probs.items():
            for w, lp in dist.items():
                by_order[len(ctx) + 1].append(ctx + (w,))
        # <s> is a history only; it gets a placeholder probability
        if (BOS,) in self.backoffs:
            by_order[1].append((BOS,))
        lines = ["\\data\\"]
        for k in range(1, self.order + 1):
            lines.append(f"ngram {k}={len(by_order[k])}")
        for k in range(1, self.order + 1):
            lines.append("")
            lines.append(f"\\{k}-grams:")
            for gram in sorted(set(by_order[k])):
                ctx, w = gram[:-1], gram[-1]
                lp = NO_PROB if gram == (BOS,) else self.probs[ctx][w] / LOG10
                line = f"{lp:.10f}\t{' '.join(gram)}"
                if gram in self.backoffs:
                    line += f"\t{self.backoffs[gram] / LOG10:.10f}"
                lines.append(line)
        lines += ["", "\\end\\", ""]
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.to_arpa(), encoding="utf-8")

    @classmethod
    def from_arpa(cls, text: str) -> "NgramModel":
        probs: dict[tuple, dict] = defaultdict(dict)
        backoffs: dict[tuple, float] = {}
        vocab = set()
        order = 0
        section = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line == "\\data\\" or line == "\\end\\":
                continue
            if line.startswith("ngram "):
                order = max(order, int(line.split()[1].split("=")[0]))
                continue
            if line.startswith("\\") and line.endswith("-grams:"):
                section = int(line[1:line.index("-")])
                continue
            parts = line.split("\t")
            gram = tuple(parts[1].split(" "))
            if len(gram) != section:
                raise ValueError(f"n-gram {gram} listed under order {section}")
            lp = float(parts[0])
            if gram != (BOS,):
                probs[gram[:-1]][gram[-1]] = lp * LOG10
            if section == 1:
                vocab.add(gram[0])
            if len(parts) > 2:
                backoffs[gram] = float(parts[2]) * LOG10
        return cls(order, dict(probs), backoffs, vocab)

    @classmethod
    def load(cls, path) -> "NgramModel":
        return cls.from_arpa(Path(path).read_text(encoding="utf-8"))


def train_ngram(transcripts: Iterable[Sequence[str]], order: int = 3,
                vocab: Iterable[str] | None = None) -> NgramModel:
    """Witten-Bell backoff model over ``transcripts`` (token lists)."""
    if order < 1:
        raise ValueError("order must be >= 1")
    sents = [list(s) for s in transcripts]
    if not sents:
        raise ValueError("no transcripts")
    words = set(vocab or ()) | {w for s in sents for w in s} | {EOS, UNK}
    words.discard(BOS)
    counts: list[dict] = [defaultdict(lambda: defaultdict(int)) for _ in range(order)]
    for s in sents:
        toks = [BOS] + s + [EOS]
        for i in range(1, len(toks)):
            for k in range(order):
                if i - k < 0:
                    break
                counts[k][tuple(toks[i - k:i])][toks[i]] += 1

    probs: dict[tuple, dict] = {}
    backoffs: dict[tuple, float] = {}
    uni = counts[0][()]
    n_tok = sum(uni.values())
    n_types = len(uni)
    uniform = 1.0 / len(words)
    probs[()] = {w: math.log((uni.get(w, 0) + n_types * uniform) / (n_tok + n_types)) for w in words}

    def lower(w, ctx):
        # interpolated estimate for ctx (already built for shorter contexts)
        acc = 0.0
        while True:
            dist = probs.get(ctx)
            if dist is not None and w in dist:
                return acc + dist[w]
            acc += backoffs.get(ctx, 0.0)
            ctx = ctx[1:]

    for k in range(1, order):
        for ctx in sorted(counts[k]):
            succ = counts[k][ctx]
            total = sum(succ.values())
            types = len(succ)
            denom = total + types
            backoffs[ctx] = math.log(types / denom)
            probs[ctx] = {w: math.log((c + types * math.exp(lower(w, ctx[1:]))) / denom)
                          for w, c in succ.items()}
    return NgramModel(order, probs, backoffs, words | {BOS})


def score(model: NgramModel, sequence: Sequence[str]) -> float:
    """Natural-log probability of ``sequence`` followed by ``</s>``, starting from ``<s>``."""
    hist = [BOS]
    total = 0.0
    for w in list(sequence) + [EOS]:
        total += model.log_prob(w, hist)
        hist.append(w)
    return total


def perplexity(model: NgramModel, corpus: Iterable[Sequence[str]]) -> float:
    total, n = 0.0, 0
    for s in corpus:
        total += score(model, s)
        n += len(s) + 1
    return math.exp(-total / n)


class TokenLM:
    """Adapter scoring token-id prefixes for CTC prefix search.

    Ids outside ``surfaces`` or mapped to ``None`` (blank, masks) score as ``<unk>``.
    """

    def __init__(self, model: NgramModel, surfaces: Sequence[str | None]):
        self.model = model
        self.surfaces = list(surfaces)
        self._cache: dict[tuple, float] = {}

    def _ctx(self, prefix):
        keep = self.model.order - 1
        hist = [BOS] + [self._surf(k) for k in prefix]
        return tuple(hist[-keep:]) if keep else ()

    def _surf(self, k):
        s = self.surfaces[k] if 0 <= k < len(self.surfaces) else None
        return s if s is not None else UNK

    def token_score(self, prefix: tuple, token: int) -> float:
        ctx = self._ctx(prefix)
        key = (ctx, token)
        val = self._cache.get(key)
        if val is None:
            val = self.model.log_prob(self._surf(token), ctx)
            self._cache[key] = val
        return val

    def end_score(self, prefix: tuple) -> float:
        return self.model.log_prob(EOS, self._ctx(prefix))
