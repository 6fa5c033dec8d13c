"""CTC criterion, greedy decoding and prefix beam search.

All dynamic programming runs in float64 log space. ``-inf`` is the zero
probability sentinel; ``np.logaddexp`` absorbs it exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

NEG_INF = -np.inf
BLANK = 0


@dataclass
class CTCResult:
    losses: np.ndarray  # (B,), +inf where infeasible
    grads: np.ndarray  # (B, T, V) d loss / d log_probs
    feasible: np.ndarray  # (B,) bool


def _lae3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def _shift_right(x, k):
    """``out[:, s] = x[:, s - k]`` with ``-inf`` filling the first ``k`` states."""
    out = np.full_like(x, NEG_INF)
    if k < x.shape[1]:
        out[:, k:] = x[:, :-k]
    return out


def _shift_left(x, k):
    out = np.full_like(x, NEG_INF)
    if k < x.shape[1]:
        out[:, :-k] = x[:, k:]
    return out


def ctc_loss_batch(log_probs, lengths, targets: Sequence[Sequence[int]],
                   blank: int = BLANK) -> CTCResult:
    """Negative log-likelihood of each target under a padded batch of posterior grids.

    ``log_probs`` is (B, T, V); frames at or beyond ``lengths[b]`` are ignored.
    The gradient is with respect to the log-posterior entries themselves,
    i.e. minus the per-frame label occupancy.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    out_dtype = np.asarray(log_probs).dtype
    if not np.issubdtype(out_dtype, np.floating):
        out_dtype = np.float64
    bsz, t_max, vocab = lp.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    if len(targets) != bsz or lengths.shape != (bsz,):
        raise ValueError("batch size mismatch between grids, lengths and targets")
    for tgt in targets:
        if any(int(k) == blank for k in tgt):
            raise ValueError("CTC target contains the blank id")
        if any(not 0 <= int(k) < vocab for k in tgt):
            raise ValueError("CTC target id outside the vocabulary")

    n_lab = np.array([len(tg) for tg in targets], dtype=np.int64)
    s_len = 2 * n_lab + 1
    s_max = int(s_len.max())
    ext = np.full((bsz, s_max), blank, dtype=np.int64)
    for b, tgt in enumerate(targets):
        if len(tgt):
            ext[b, 1:2 * len(tgt):2] = tgt
    valid_s = np.arange(s_max)[None, :] < s_len[:, None]
    skip = np.zeros((bsz, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (bsz, t_max, s_max)), axis=2)
    emit = np.where(valid_s[:, None, :], emit, NEG_INF)

    alpha = np.full((bsz, t_max, s_max), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if s_max > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, t_max):
        prev = alpha[:, t - 1]
        a1 = _shift_right(prev, 1)
        a2 = np.where(skip, _shift_right(prev, 2), NEG_INF)
        alpha[:, t] = _lae3(prev, a1, a2) + emit[:, t]

    last = lengths - 1
    rows = np.arange(bsz)
    end = alpha[rows, last]  # (B, S)
    log_p = end[rows, s_len - 1]
    two = s_len >= 2
    log_p = np.where(two, np.logaddexp(log_p, end[rows, np.maximum(s_len - 2, 0)]), log_p)

    beta = np.full((bsz, t_max, s_max), NEG_INF)
    init = np.full((bsz, s_max), NEG_INF)
    for t in range(t_max - 1, -1, -1):
        at_end = last == t
        if at_end.any():
            init.fill(NEG_INF)
            init[rows, s_len - 1] = emit[rows, t, s_len - 1]
            init[rows[two], s_len[two] - 2] = emit[rows[two], t, s_len[two] - 2]
        if t + 1 < t_max:
            nxt = beta[:, t + 1]
            b1 = _shift_left(nxt, 1)
            # a jump from s to s+2 is legal exactly when state s+2 may be skipped into
            skip_from = np.zeros_like(skip)
            skip_from[:, :-2] = skip[:, 2:]
            b2 = np.where(skip_from, _shift_left(nxt, 2), NEG_INF)
            rec = _lae3(nxt, b1, b2) + emit[:, t]
        else:
            rec = np.full((bsz, s_max), NEG_INF)
        beta[:, t] = np.where(at_end[:, None], init, np.where((t < last)[:, None], rec, NEG_INF))

    feasible = np.isfinite(log_p)
    finite_emit = np.isfinite(emit)
    with np.errstate(invalid="ignore"):
        log_gamma = np.where(finite_emit, alpha + beta - np.where(finite_emit, emit, 0.0), NEG_INF)
        occ = np.where(feasible[:, None, None],
                       np.exp(log_gamma - np.where(feasible, log_p, 0.0)[:, None, None]), 0.0)
    onehot = np.zeros((bsz, s_max, vocab))
    onehot[rows[:, None], np.arange(s_max)[None, :], ext] = valid_s
    grads = -(occ @ onehot)
    losses = np.where(feasible, -log_p, np.inf)
    return CTCResult(losses, grads.astype(out_dtype), feasible)


def ctc_loss(log_posteriors, target: Sequence[int], blank: int = BLANK):
    """Single-utterance CTC loss. Returns ``(loss, grad)``; infeasible targets give ``(inf, 0)``."""
    lp = np.asarray(log_posteriors)
    res = ctc_loss_batch(lp[None], [lp.shape[0]], [list(target)], blank)
    return float(res.losses[0]), res.grads[0]


def min_frames_for(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def greedy_decode(log_posteriors, blank: int = BLANK) -> list[int]:
    best = np.argmax(np.asarray(log_posteriors), axis=-1)
    out, prev = [], None
    for k in best.tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


class PrefixScorer(Protocol):
    def token_score(self, prefix: tuple, token: int) -> float: ...

    def end_score(self, prefix: tuple) -> float: ...


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple
    acoustic: float
    lm: float
    score: float


def prefix_beam_search(log_posteriors, beam: int = 10, lm: PrefixScorer | None = None,
                       lm_weight: float = 0.0, blank: int = BLANK) -> list[Hypothesis]:
    """CTC prefix search with optional token-level shallow fusion.

    Each prefix keeps separate blank-ending and label-ending log-probabilities.
    When a label extends a prefix, ``lm_weight * lm.token_score`` joins its
    combined score; the sentence-end score is added before the final ranking.
    With ``lm_weight == 0`` the LM is not consulted. Ties rank by token ids.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if lm_weight < 0:
        raise ValueError("lm_weight must be >= 0")
    if lm_weight > 0 and lm is None:
        raise ValueError("lm_weight > 0 needs a language model")
    use_lm = lm is not None and lm_weight > 0
    lp = np.asarray(log_posteriors, dtype=np.float64)
    if lp.shape[0] == 0:
        return [Hypothesis((), 0.0, 0.0, 0.0)]
    vocab = lp.shape[1]
    labels = [c for c in range(vocab) if c != blank]
    lae = np.logaddexp

    beams: dict[tuple, list[float]] = {(): [0.0, NEG_INF]}
    lm_cache: dict[tuple, float] = {(): 0.0}

    def lm_of(prefix):
        s = lm_cache.get(prefix)
        if s is None:
            s = lm_of(prefix[:-1]) + lm.token_score(prefix[:-1], prefix[-1])
            lm_cache[prefix] = s
        return s

    for t in range(lp.shape[0]):
        row = lp[t].tolist()
        p_blank = row[blank]
        nxt: dict[tuple, list[float]] = {}
        for prefix, (pb, pnb) in beams.items():
            ptot = lae(pb, pnb)
            cur = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
            cur[0] = lae(cur[0], ptot + p_blank)
            last = prefix[-1] if prefix else None
            for c in labels:
                p = row[c]
                ext = nxt.setdefault(prefix + (c,), [NEG_INF, NEG_INF])
                if c == last:
                    cur[1] = lae(cur[1], pnb + p)
                    ext[1] = lae(ext[1], pb + p)
                else:
                    ext[1] = lae(ext[1], ptot + p)

        def rank_key(item):
            prefix, (pb, pnb) = item
            s = lae(pb, pnb)
            if use_lm:
                s += lm_weight * lm_of(prefix)
            return (-s, prefix)

        beams = dict(sorted(nxt.items(), key=rank_key)[:beam])

    hyps = []
    for prefix, (pb, pnb) in beams.items():
        ac = float(lae(pb, pnb))
        lm_score = lm_of(prefix) + lm.end_score(prefix) if use_lm else 0.0
        hyps.append(Hypothesis(prefix, ac, lm_score, ac + lm_weight * lm_score))
    hyps.sort(key=lambda h: (-h.score, h.tokens))
    return hyps


def write_nbest(fh, utt_id: str, hyps: Sequence[Hypothesis], surfaces: Sequence[str]) -> None:
    """One tab-separated line per hypothesis: utt_id, rank, combined, acoustic, lm, tokens."""
    for rank, h in enumerate(hyps, 1):
        toks = " ".join(surfaces[k] for k in h.tokens)
        fh.write(f"{utt_id}\t{rank}\t{h.score:.6f}\t{h.acoustic:.6f}\t{h.lm:.6f}\t{toks}\n")


def read_nbest(fh) -> dict[str, list[tuple[int, float, float, float, list[str]]]]:
    out: dict[str, list] = {}
    for line in fh:
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise ValueError(f"malformed n-best line: {line!r}")
        utt, rank, score, ac, lm_s, toks = parts
        out.setdefault(utt, []).append((int(rank), float(score), float(ac), float(lm_s), toks.split()))
    return out
