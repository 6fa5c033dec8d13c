import hashlib
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lae.data import load_corpus, read_features, read_manifest
from lae.sim import (CorpusSpec, SimConfig, gen_code_switched, gen_corpus, gen_monolingual, make_languages,
                     min_pairwise_distance, render, splice_code_switch, utt_rng)
from lae.vocab import Vocabulary

VOCAB = Vocabulary.build(20, 20)
CFG = SimConfig()
LANGS = make_languages(VOCAB, CFG, seed=1)


def nearest_prototype_tokens(feats, spans, langs):
    """Frame-level nearest prototype over both inventories, majority vote per token span."""
    ids = [k for lang in langs.values() for k in lang.token_ids]
    protos = np.concatenate([lang.prototypes for lang in langs.values()])
    d = ((feats[:, None, :] - protos[None]) ** 2).sum(-1)
    frame_ids = np.array(ids)[d.argmin(axis=1)]
    return frame_ids, [Counter(frame_ids[s:e].tolist()).most_common(1)[0][0] for s, e in spans]


def test_prototypes_are_separable_and_disjoint():
    for label, lang in LANGS.items():
        assert min_pairwise_distance(lang.prototypes) > 4 * CFG.noise_std
        inactive = slice(8, 16) if label == "A" else slice(0, 8)
        assert not lang.prototypes[:, inactive].any()


def test_noiseless_render_recovers_tokens():
    rng = np.random.default_rng(0)
    u = gen_monolingual(LANGS["A"], (5, 8), rng, noise_std=0.0)
    _, decoded = nearest_prototype_tokens(u.features, u.spans, LANGS)
    assert decoded == list(u.targets)


def test_separability_at_quarter_distance_noise():
    """Frames in the stable interior of each token classify at >= 99% with noise 0.25 * min distance."""
    dmin = min(min_pairwise_distance(lang.prototypes) for lang in LANGS.values())
    hits = total = 0
    for i in range(40):
        rng = utt_rng(5, "eval-mono-A", i)
        lang = LANGS["A" if i % 2 else "B"]
        u = gen_monolingual(lang, (3, 10), rng, noise_std=0.25 * dmin)
        frames, _ = nearest_prototype_tokens(u.features, u.spans, LANGS)
        for (s, e), tok in zip(u.spans, u.targets):
            # the first and last frame of a token are blended with its neighbours
            inner = frames[s + 1:e - 1]
            hits += int((inner == tok).sum())
            total += inner.size
    assert hits / total >= 0.99


def test_monolingual_energy_stays_in_own_subspace():
    for i in range(30):
        u = gen_monolingual(LANGS["A"], (3, 10), utt_rng(1, "train-mono-A", i))
        t = u.n_frames
        # B dims carry only zero-mean noise, so their average sits within the noise floor
        assert abs(u.features[:, 8:].mean()) <= 3 * CFG.noise_std / np.sqrt(t)


def test_utterance_invariants():
    for i in range(50):
        u = gen_code_switched(LANGS, CFG, utt_rng(1, "train-CS", i))
        assert set(u.tags) == {"A", "B"}
        assert all(VOCAB.tag(k) == t for k, t in zip(u.targets, u.tags))
        starts = [s for s, _ in u.spans]
        assert starts == sorted(set(starts))
        assert all(s < e for s, e in u.spans) and u.spans[-1][1] <= u.n_frames
        switches = sum(a != b for a, b in zip(u.tags, u.tags[1:]))
        assert 1 <= switches <= 3 and 6 <= len(u.targets) <= 12


def test_same_seed_same_utterance():
    a = gen_monolingual(LANGS["B"], (3, 10), utt_rng(2, "train-mono-B", 7))
    b = gen_monolingual(LANGS["B"], (3, 10), utt_rng(2, "train-mono-B", 7))
    assert a.targets == b.targets and np.array_equal(a.features, b.features)


def test_splice_concatenates_and_reoffsets():
    a = gen_monolingual(LANGS["A"], (3, 5), utt_rng(1, "train-mono-A", 0))
    b = gen_monolingual(LANGS["B"], (3, 5), utt_rng(1, "train-mono-B", 0))
    s = splice_code_switch([a, b], "s0", "train-simu-CS")
    assert s.n_frames == a.n_frames + b.n_frames
    assert s.targets == a.targets + b.targets
    assert s.tags == ("A",) * len(a.targets) + ("B",) * len(b.targets)
    assert s.spans[len(a.spans)][0] == b.spans[0][0] + a.n_frames
    assert np.array_equal(s.features[a.n_frames:], b.features)
    with pytest.raises(ValueError):
        splice_code_switch([a, b], cap_frames=a.n_frames)


def test_splice_with_empty_is_identity():
    a = gen_monolingual(LANGS["A"], (3, 5), utt_rng(1, "train-mono-A", 1))
    empty = type(a)("e", np.zeros((0, 16), np.float32), (), (), [], "")
    s = splice_code_switch([a, empty])
    assert s.targets == a.targets and np.array_equal(s.features, a.features)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(VOCAB.a_ids), min_size=1, max_size=6), st.integers(0, 1000))
def test_render_durations_in_range(tokens, seed):
    feats, spans = render(tokens, ["A"] * len(tokens), LANGS, np.random.default_rng(seed))
    assert all(CFG.dur_min <= e - s <= CFG.dur_max for s, e in spans)
    assert feats.shape[1] == CFG.feat_dim and feats.dtype == np.float32


def _digest_dir(path):
    h = hashlib.sha256()
    for f in sorted(path.rglob("*")):
        if f.is_file():
            h.update(f.relative_to(path).as_posix().encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def test_corpus_is_reproducible_and_partitioned(tmp_path):
    spec = CorpusSpec({"train-mono-A": 30, "train-mono-B": 30, "train-CS": 15, "train-simu-CS": 10,
                       "eval-mono-A": 5, "eval-mono-B": 5, "eval-CS": 5})
    utts = gen_corpus(spec, VOCAB, CFG, 4, tmp_path / "a")
    gen_corpus(spec, VOCAB, CFG, 4, tmp_path / "b")
    assert _digest_dir(tmp_path / "a") == _digest_dir(tmp_path / "b")
    recs = read_manifest(tmp_path / "a" / "manifest.tsv")
    assert len(recs) == 100
    ids = [r["utt_id"] for r in recs]
    assert len(set(ids)) == len(ids)
    assert all(r["utt_id"].startswith(r["partition"] + "-") for r in recs)
    simu = [u for u in utts if u.partition == "train-simu-CS"]
    assert all(u.n_frames <= CFG.cap_frames and u.kind == "code-switched" for u in simu)
    back = load_corpus(tmp_path / "a", ["eval-CS"])
    assert [u.utt_id for u in back] == [u.utt_id for u in utts if u.partition == "eval-CS"]
    assert np.array_equal(back[0].features, read_features(tmp_path / "a" / recs[-5]["path"]))
    assert back[0].spans == [u for u in utts if u.partition == "eval-CS"][0].spans
    # unigram counts are a pure function of the seed
    c1 = Counter(k for u in utts for k in u.targets)
    c2 = Counter(k for u in gen_corpus(spec, VOCAB, CFG, 4) for k in u.targets)
    assert c1 == c2


def test_stock_manifest_has_5600_lines(tmp_path):
    gen_corpus(CorpusSpec.stock(simu_cs=0), VOCAB, CFG, 1, tmp_path)
    lines = (tmp_path / "manifest.tsv").read_text().splitlines()
    assert len(lines) == 5600
    assert len({ln.split("\t")[0] for ln in lines}) == 5600
