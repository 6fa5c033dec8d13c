import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lae.ngram import BOS, EOS, UNK, NgramModel, TokenLM, perplexity, score, train_ngram


def test_witten_bell_by_hand():
    # corpus "<s> a b </s>", vocabulary {a, b, </s>, <unk>} so the uniform floor is 1/4.
    # unigram: P(b) = (c(b) + T * 1/4) / (N + T) = (1 + 3/4) / (3 + 3) = 7/24
    # bigram:  P(b | a) = (c(a b) + T(a) * P(b)) / (c(a) + T(a)) = (1 + 7/24) / 2 = 31/48
    m = train_ngram([["a", "b"]], order=2)
    assert math.exp(m.log_prob("b")) == pytest.approx(7 / 24, abs=1e-12)
    assert math.exp(m.log_prob("b", ["a"])) == pytest.approx(31 / 48, abs=1e-12)
    # unseen bigram backs off with weight T(a) / (c(a) + T(a)) = 1/2
    assert math.exp(m.log_prob("a", ["a"])) == pytest.approx(0.5 * (1 + 0.75) / 6, abs=1e-12)


corpora = st.lists(st.lists(st.sampled_from("abcd"), min_size=0, max_size=6), min_size=1, max_size=8)


@settings(max_examples=40, deadline=None)
@given(corpora, st.integers(1, 3))
def test_every_context_normalises(corpus, order):
    m = train_ngram(corpus, order)
    for ctx in m.contexts():
        total = sum(m.distribution(ctx).values())
        assert total == pytest.approx(1.0, abs=1e-6)
    for w in m.vocab - {BOS}:
        assert math.isfinite(m.log_prob(w, [BOS]))


def test_unigram_proportional_to_smoothed_counts():
    m = train_ngram([["a", "a", "b"]], order=1)
    probs = m.distribution(())
    assert sum(probs.values()) == pytest.approx(1.0)
    assert probs["a"] > probs["b"] > probs[UNK]


def test_empty_sequence_scores_end_only():
    m = train_ngram([["a"], ["b", "a"]], order=3)
    assert score(m, []) == pytest.approx(m.log_prob(EOS, [BOS]))


def test_chain_rule_decomposition():
    m = train_ngram([["a", "b", "c"], ["b", "c", "a"]], order=3)
    x, y = "a", "c"
    lhs = score(m, [x, y]) - score(m, [x])
    rhs = m.log_prob(y, [BOS, x]) + m.log_prob(EOS, [x, y]) - m.log_prob(EOS, [BOS, x])
    assert lhs == pytest.approx(rhs)


def test_uniform_source_gives_log_v():
    rng = np.random.default_rng(0)
    v = 10
    toks = [f"t{i}" for i in range(v)]
    corpus = [[toks[k] for k in rng.integers(v, size=20)] for _ in range(500)]
    m = train_ngram(corpus, order=1)
    for t in toks:
        assert -m.log_prob(t) == pytest.approx(math.log(v + 1), rel=0.05)  # +1 for </s>
    held = [[toks[k] for k in rng.integers(v, size=20)] for _ in range(100)]
    # per-token perplexity includes the end symbol, which is rarer than the tokens
    assert perplexity(m, held) == pytest.approx(v, rel=0.1)


def test_degenerate_corpus_perplexity_near_one():
    m = train_ngram([["x", "y", "z"]] * 200, order=3)
    assert 1.0 <= perplexity(m, [["x", "y", "z"]]) < 1.05


def test_train_perplexity_below_heldout():
    rng = np.random.default_rng(1)
    trans = rng.dirichlet(np.full(6, 0.3), size=6)

    def sample(n):
        out = []
        for _ in range(n):
            s, k = [], int(rng.integers(6))
            for _ in range(8):
                s.append(f"w{k}")
                k = int(rng.choice(6, p=trans[k]))
            out.append(s)
        return out

    train, held = sample(300), sample(100)
    m = train_ngram(train, order=3)
    assert perplexity(m, train) <= perplexity(m, held)


def test_adding_a_sentence_never_lowers_its_probability():
    base = [["a", "b"], ["b", "c", "a"], ["c"]]
    s = ["a", "c", "b"]
    before = score(train_ngram(base, 3), s)
    after = score(train_ngram(base + [s], 3), s)
    assert after >= before


def test_arpa_round_trip_and_determinism(tmp_path):
    corpus = [["a", "b", "c"], ["b", "b"], ["c", "a"]]
    m = train_ngram(corpus, 3)
    assert m.to_arpa() == train_ngram(corpus, 3).to_arpa()
    m.save(tmp_path / "lm.arpa")
    back = NgramModel.load(tmp_path / "lm.arpa")
    for ctx in [(), ("a",), (BOS, "b"), ("c", "c")]:
        for w in ["a", "b", "c", EOS, "zzz"]:
            assert back.log_prob(w, ctx) == pytest.approx(m.log_prob(w, ctx), abs=1e-8)
    text = (tmp_path / "lm.arpa").read_text()
    assert text.startswith("\\data\\\nngram 1=")
    assert "\\3-grams:" in text and text.rstrip().endswith("\\end\\")


def test_token_lm_adapter_maps_ids():
    m = train_ngram([["a", "b"]], 2)
    lm = TokenLM(m, [None, None, None, "a", "b"])
    assert lm.token_score((3,), 4) == pytest.approx(m.log_prob("b", ["a"]))
    assert lm.token_score((), 1) == pytest.approx(m.log_prob(UNK, [BOS]))
    assert lm.end_score((3, 4)) == pytest.approx(m.log_prob(EOS, ["b"]))
