import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lae import evaluation as ev
from lae.data import Utterance
from lae.model import ModelConfig, build_model
from lae.vocab import Vocabulary

from oracles import exact_sign_flip_p, levenshtein

VOCAB = Vocabulary.build(3, 3)
A = VOCAB.a_ids
B = VOCAB.b_ids

seqs = st.lists(st.sampled_from(A + B), max_size=6)


def test_identical_sequences_align_cleanly():
    c, trace = ev.edit_distance([3, 4, 5], [3, 4, 5])
    assert (c.sub, c.dele, c.ins) == (0, 0, 0)
    assert [op for op, _, _ in trace] == ["C", "C", "C"]


def test_single_deletion():
    c, _ = ev.edit_distance(["a", "b", "c"], ["a", "c"])
    assert (c.sub, c.dele, c.ins) == (0, 1, 0)


def test_tie_break_prefers_substitution_then_insertion():
    # [x] vs [y, x]: cost 1 either as insert y; substitution path would cost 2
    _, trace = ev.edit_distance(["x"], ["y", "x"])
    assert [op for op, _, _ in trace] == ["I", "C"]
    # [x, y] vs [z]: S+D or D+S both cost 2; the backtrace takes the diagonal last step
    _, trace = ev.edit_distance(["x", "y"], ["z"])
    assert [op for op, _, _ in trace] == ["D", "S"]


@settings(max_examples=150, deadline=None)
@given(seqs, seqs)
def test_distance_matches_independent_dp(r, h):
    c, _ = ev.edit_distance(r, h)
    assert c.errors == levenshtein(r, h)


def _brute_edit_cost(ref, hyp):
    """Cheapest script found by exhaustively enumerating every monotone alignment."""
    best = math.inf

    def go(i, j, cost):
        nonlocal best
        if cost >= best:
            return
        if i == len(ref) and j == len(hyp):
            best = cost
            return
        if i < len(ref) and j < len(hyp):
            go(i + 1, j + 1, cost + (ref[i] != hyp[j]))
        if i < len(ref):
            go(i + 1, j, cost + 1)
        if j < len(hyp):
            go(i, j + 1, cost + 1)

    go(0, 0, 0)
    return best


def test_distance_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    for _ in range(200):
        r = rng.integers(3, 6, size=rng.integers(0, 7)).tolist()
        h = rng.integers(3, 6, size=rng.integers(0, 7)).tolist()
        assert ev.edit_distance(r, h)[0].errors == _brute_edit_cost(r, h)


@settings(max_examples=60, deadline=None)
@given(seqs, seqs, seqs)
def test_triangle_inequality(x, y, z):
    d = lambda a, b: ev.edit_distance(a, b)[0].errors  # noqa: E731
    assert d(x, x) == 0
    assert d(x, z) <= d(x, y) + d(y, z)


def test_substitution_attribution_example():
    er = ev.mixed_error_rate([[A[0], B[0]]], [[A[0], B[1]]], VOCAB)
    assert er.MER == 0.5 and er.ER_A == 0.0 and er.ER_B == 1.0


def test_insertion_attributed_to_hypothesis_language():
    c = ev.attributed_counts([A[0]], [A[0], B[2]], VOCAB)
    assert c.per_lang["B"][2] == 1 and c.per_lang["A"][2] == 0
    c = ev.attributed_counts([A[0]], [A[0], VOCAB.mask_a], VOCAB)
    assert c.per_lang["A"][2] == 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(seqs, seqs), min_size=1, max_size=5))
def test_attribution_partitions_errors(pairs):
    er = ev.mixed_error_rate([p[0] for p in pairs], [p[1] for p in pairs], VOCAB)
    c = er.counts
    per = c.per_lang
    assert sum(v[0] + v[1] + v[2] for v in per.values()) == c.errors
    assert sum(v[3] for v in per.values()) == c.n_ref
    assert sum(er.per_utt) == c.errors


def test_perfect_and_empty_references():
    er = ev.mixed_error_rate([[A[0], B[1]]], [[A[0], B[1]]], VOCAB)
    assert (er.MER, er.ER_A, er.ER_B) == (0.0, 0.0, 0.0)
    er = ev.mixed_error_rate([[]], [[A[1]]], VOCAB)
    assert math.isnan(er.MER)


def test_score_report_format():
    er = ev.mixed_error_rate([[A[0], B[0]]], [[A[0]]], VOCAB)
    buf = io.StringIO()
    ev.write_score_report(buf, [ev.score_row("eval-CS", "sys", er)])
    lines = buf.getvalue().splitlines()
    assert lines[0] == "partition,system,MER,ER_A,ER_B,N,S,D,I"
    assert lines[1] == "eval-CS,sys,50.0000,0.0000,100.0000,2,0,1,0"


def test_mapsswe_identical_systems():
    st_ = ev.mapsswe_test([1, 2, 0, 3], [1, 2, 0, 3])
    assert st_.p_value == 1.0 and st_.z == 0.0


def test_mapsswe_one_extra_error_everywhere():
    rng = np.random.default_rng(0)
    e1 = rng.integers(0, 5, size=100)
    e2 = e1 + 1 + (rng.random(100) < 0.3)
    st_ = ev.mapsswe_test(e1, e2)
    assert st_.z < 0 and st_.p_value < 1e-6


def test_mapsswe_agrees_with_permutation_on_gaussian_differences():
    rng = np.random.default_rng(4)
    diffs = []
    for shift in (0.0, 0.1, 0.2):
        d = rng.normal(shift, 1.0, size=200)
        st_ = ev.mapsswe_test(d, np.zeros(200), seed=1)
        diffs.append(abs(st_.p_value - st_.p_permutation))
    assert max(diffs) <= 0.02


def test_mapsswe_permutation_matches_exact_enumeration():
    d = np.array([1.0, 2.0, -1.0, 3.0, 0.0, 2.0, 1.0, -2.0, 4.0, 1.0, 2.0, 0.0])
    st_ = ev.mapsswe_test(d, np.zeros_like(d), resamples=20000, seed=3)
    assert st_.p_permutation == pytest.approx(exact_sign_flip_p(d), abs=0.01)


def test_mapsswe_rejects_tiny_samples():
    with pytest.raises(ValueError):
        ev.mapsswe_test([1], [2])
    with pytest.raises(ValueError):
        ev.mapsswe_test([1, 2], [2])


def test_probe_on_separable_oracle_features():
    rng = np.random.default_rng(0)
    centers = np.eye(3) * 4
    y = rng.integers(0, 3, size=300)
    x = centers[y] + rng.normal(0, 0.3, size=(300, 3))
    probe = ev.fit_probe(x, y)
    assert (probe.predict(x) == y).mean() == 1.0
    with pytest.raises(RuntimeError):
        ev.LanguageProbe().predict(x)


def _utt(uid, ids, frames, rng, spans=None):
    tags = tuple(VOCAB.tag(k) for k in ids)
    return Utterance(uid, rng.normal(size=(frames, 16)).astype(np.float32), tuple(ids), tags,
                     spans or [], "eval-CS")


def test_spike_table_shape_and_probabilities():
    rng = np.random.default_rng(1)
    model = build_model(ModelConfig(n_shared=1, n_specific=1, d_model=16, d_ff=32, heads=2,
                                    vocab_size=VOCAB.size))
    u = _utt("u", [A[0], B[0]], 40, rng, spans=[(5, 18), (18, 36)])
    text = ev.export_spikes(model, u)
    rows = text.splitlines()
    assert rows[0].split(",") == list(ev.SPIKE_FIELDS)
    assert len(rows) - 1 == 9  # subsampled length of 40 frames
    for r in rows[1:]:
        vals = r.split(",")
        for k in (3, 4, 6, 7, 9, 10):
            assert 0.0 <= float(vals[k]) <= 1.0
    langs = ev.frame_languages(u, 9)
    assert langs[0] == "-" and langs[3] == "A" and langs[4] == "B"  # receptive-field centres 3, 15, 19


def test_projection_keeps_target_language_only():
    toks = [A[0], VOCAB.mask_b, B[1], A[2]]
    assert ev.project(toks, "A", VOCAB) == [A[0], A[2]]
    assert ev.project(toks, "B", VOCAB) == [B[1]]


def test_grids_batching_matches_single():
    rng = np.random.default_rng(2)
    model = build_model(ModelConfig(n_shared=1, n_specific=1, d_model=16, d_ff=32, heads=2,
                                    vocab_size=VOCAB.size, seed=5))
    utts = [_utt(f"u{i}", [A[0]], int(n), rng) for i, n in enumerate([30, 47, 12])]
    together = ev.grids(model, utts, batch_size=3)
    for i, u in enumerate(utts):
        alone = ev.grids(model, [u])
        for k in ("global", "auxA", "auxB"):
            np.testing.assert_allclose(together[k][i], alone[k][0], atol=1e-4)


def test_beam_widening_rarely_hurts():
    """Wider beams should not raise total errors on random peaked grids (empirical monotonicity)."""
    from lae.ctc import prefix_beam_search
    from oracles import random_log_posteriors
    rng = np.random.default_rng(3)
    refs, grids = [], []
    for _ in range(40):
        ref = rng.integers(1, 5, size=3).tolist()
        g = random_log_posteriors(rng, 8, 5, sharpness=1.0)
        for t, k in zip(range(1, 8, 3), ref):
            g[t, k] += 3.0
        g -= np.log(np.exp(g).sum(axis=1, keepdims=True))
        refs.append(ref)
        grids.append(g)
    errs = []
    for beam in (1, 4, 16):
        hyps = [prefix_beam_search(g, beam)[0].tokens for g in grids]
        errs.append(sum(ev.edit_distance(r, h)[0].errors for r, h in zip(refs, hyps)))
    assert errs[2] <= errs[0]
