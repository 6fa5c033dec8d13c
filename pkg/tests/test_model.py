import numpy as np
import pytest

from lae.model import ModelConfig, build_model, combine, log_posteriors
from lae.nn import checkpoint as ckpt_io
from lae.nn import tensor as T
from lae.nn.layers import ConfigError, LengthError
from lae.training import TrainConfig, batch_loss, mask_targets, pad_batch, train
from lae.vocab import Vocabulary, VocabError

from test_training import VOCAB, tiny_corpus


def stock(arch):
    return build_model(ModelConfig(arch=arch))


def test_stock_parameter_budgets_within_ten_percent():
    counts = {a: stock(a).parameter_count() for a in ("vanilla", "bi-encoder", "lae")}
    assert counts == {"vanilla": 189931, "bi-encoder": 192854, "lae": 192854}
    assert max(counts.values()) <= 1.1 * min(counts.values())


def test_branches_mirror_each_other():
    model = stock("lae")
    names = model.named_parameters()
    a = {k[len("blockA."):] for k in names if k.startswith("blockA.")}
    b = {k[len("blockB."):] for k in names if k.startswith("blockB.")}
    assert a == b and a
    for k in a:
        assert np.array_equal(names["blockA." + k].data, names["blockB." + k].data)
    assert sum(k.startswith("aux_decoder.") for k in names) == 2
    assert not any("aux" in k and not k.startswith("aux_decoder.") for k in names)


def test_same_seed_same_init_and_bad_configs():
    s1, s2 = stock("lae").state(), stock("lae").state()
    assert all(np.array_equal(s1[k], s2[k]) for k in s1)
    with pytest.raises(ConfigError):
        build_model(ModelConfig(arch="lae", n_specific=0))
    with pytest.raises(ConfigError):
        build_model(ModelConfig(arch="conformer"))


def test_encode_shapes_and_determinism():
    model = stock("lae").eval()
    x = np.random.default_rng(0).normal(size=(32, 16)).astype(np.float32)
    with T.no_grad():
        e1 = model.encode(x)
        e2 = model.encode(x)
    for h in (e1.h_a, e1.h_b, e1.h_bil):
        assert h.shape == (1, 7, 64)
    assert np.array_equal(e1.h_bil.data, e2.h_bil.data)
    np.testing.assert_allclose(e1.h_bil.data, e1.h_a.data + e1.h_b.data)
    with pytest.raises(LengthError):
        model.encode(x[:6])


def test_zeroed_branch_b_gives_h_a():
    model = stock("lae").eval()
    model.blockB.norm.gamma.data[:] = 0.0
    model.blockB.norm.beta.data[:] = 0.0
    x = np.random.default_rng(1).normal(size=(40, 16)).astype(np.float32)
    with T.no_grad():
        e = model.encode(x)
    assert not e.h_b.data.any()
    assert np.array_equal(e.h_bil.data, e.h_a.data)


def test_combine_examples():
    assert combine(np.array([[1, 2]]), np.array([[3, -2]])).tolist() == [[4, 0]]
    x, y = np.random.default_rng(0).normal(size=(2, 3, 4))
    np.testing.assert_allclose(combine(2.5 * x, 2.5 * y), 2.5 * combine(x, y))


def test_decoder_heads():
    model = stock("lae").eval()
    h = T.Tensor(np.random.default_rng(2).normal(size=(1, 5, 64)).astype(np.float32))
    model.global_decoder.weight.data[:] = 0.0
    rows = model.global_logits(h).data[0]
    assert np.array_equal(rows, np.broadcast_to(model.global_decoder.bias.data, rows.shape))
    assert np.array_equal(model.aux_logits(h).data, model.aux_logits(h).data)
    before = model.aux_logits(h).data
    model.aux_decoder.bias.data += 1.0
    np.testing.assert_allclose(model.aux_logits(h).data - before, 1.0, atol=1e-5)
    lp = log_posteriors(model, np.zeros((30, 16), np.float32))
    np.testing.assert_allclose(np.exp(lp["auxA"]).sum(axis=1), 1.0, atol=1e-5)
    with pytest.raises(ConfigError):
        stock("vanilla").aux_logits(h)


def test_probe_gradient_stops_before_encoder():
    with T.precision(np.float64):
        model = build_model(ModelConfig(n_shared=1, n_specific=1, d_model=16, d_ff=32, heads=2,
                                        dropout=0.0)).astype(np.float64)
    utts = tiny_corpus(4)
    feats, lengths = pad_batch([u.features for u in utts], np.float64)
    masked = [mask_targets(u.targets, VOCAB) for u in utts]

    def enc_grads(probe):
        for p in model.named_parameters().values():
            p.grad = None
        bl = batch_loss(model, feats, lengths, masked, True, [0, 1, 2, 2] if probe else None)
        bl.loss.backward()
        if probe:
            bl.probe.backward()
        return {k: p.grad.copy() for k, p in model.named_parameters().items()
                if p.grad is not None and not k.startswith("probe.")}

    off, on = enc_grads(False), enc_grads(True)
    assert off.keys() == on.keys()
    for k in off:
        assert np.array_equal(off[k], on[k]), k
    assert model.probe.weight.grad is not None and np.abs(model.probe.weight.grad).sum() > 0


def test_training_breaks_branch_symmetry():
    model = build_model(ModelConfig(n_shared=1, n_specific=1, d_model=16, d_ff=32, heads=2))
    train(model, tiny_corpus(8), VOCAB, TrainConfig(epochs=1, batch_size=4, warmup=2, average_last=1))
    names = model.named_parameters()
    gap = max(np.abs(names[k].data - names["blockB." + k[7:]].data).max()
              for k in names if k.startswith("blockA."))
    assert gap > 0


def test_checkpoint_round_trip_keeps_single_aux_decoder(tmp_path):
    model = stock("lae")
    ckpt_io.save(tmp_path / "m.laec", ckpt_io.Checkpoint(model.state()))
    back = ckpt_io.load(tmp_path / "m.laec")
    assert sum(k.startswith("aux_decoder.") for k in back.params) == 2
    other = build_model(ModelConfig(arch="lae", seed=9)).load_state(back.params)
    assert all(np.array_equal(other.state()[k], model.state()[k]) for k in back.params)
    with pytest.raises(ConfigError):
        stock("vanilla").load_state(back.params)


def test_vocabulary_file_round_trip(tmp_path):
    VOCAB.save(tmp_path / "v.tsv")
    back = Vocabulary.load(tmp_path / "v.tsv")
    assert back == VOCAB and back.digest() == VOCAB.digest()
    assert set(VOCAB.a_ids).isdisjoint(VOCAB.b_ids) and min(VOCAB.a_ids + VOCAB.b_ids) == 3
    assert VOCAB.tag(0) == "special" and VOCAB.size == 43
    (tmp_path / "bad.tsv").write_text("0\t<blank>\tspecial\n2\tx\tA\n")
    with pytest.raises(VocabError):
        Vocabulary.load(tmp_path / "bad.tsv")
