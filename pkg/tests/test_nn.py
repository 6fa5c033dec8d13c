import numpy as np
import pytest

from lae.nn import checkpoint as ckpt_io
from lae.nn import tensor as T
from lae.nn.layers import LayerStack, LengthError, Subsampler, key_padding_bias, subsampled_length
from lae.nn.optim import Adam, LrSchedule, clip_by_global_norm, global_norm

from gradcases import CASES
from oracles import relative_error


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    with T.precision(np.float64):
        analytic, numeric = CASES[name](np.random.default_rng(0))
    assert all(a.dtype == np.float64 for a in analytic)
    assert relative_error(analytic, numeric) <= 1e-6


def test_backward_accumulates_over_shared_use():
    x = T.Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = T.sum_all(x * x + x)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_without_graph_raises():
    with pytest.raises(RuntimeError):
        T.Tensor(np.ones(2)).backward()


def test_no_grad_records_nothing():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_detach_blocks_gradient():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = T.sum_all(T.detach(x) * x)
    y.backward()
    np.testing.assert_allclose(x.grad, np.ones(3))


def test_subsampled_length_and_minimum():
    assert subsampled_length(7) == 1
    assert subsampled_length(100) == 24
    np.testing.assert_array_equal(subsampled_length(np.array([7, 8, 9, 11])), [1, 1, 1, 2])
    rng = np.random.default_rng(0)
    sub = Subsampler(4, 8, rng)
    x, lens = sub(T.Tensor(rng.normal(size=(2, 30, 4)).astype(np.float32)), [30, 12])
    assert x.shape == (2, subsampled_length(30), 8)
    np.testing.assert_array_equal(lens, [subsampled_length(30), subsampled_length(12)])
    with pytest.raises(LengthError):
        sub(T.Tensor(np.zeros((1, 6, 4), np.float32)))


def test_padding_does_not_change_valid_outputs():
    rng = np.random.default_rng(1)
    with T.precision(np.float64):
        stack = LayerStack(2, 8, 16, 2, rng, dropout=0.0)
    stack.eval()
    a = rng.normal(size=(5, 8))
    padded = np.zeros((2, 7, 8))
    padded[0, :5] = a
    padded[1] = rng.normal(size=(7, 8))
    with T.no_grad():
        alone = stack(T.Tensor(a[None])).data[0]
        both = stack(T.Tensor(padded), key_padding_bias([5, 7], 7, np.float64)).data[0, :5]
    np.testing.assert_allclose(alone, both, atol=1e-12)


def test_lr_schedule_shape():
    s = LrSchedule(1e-3, 100)
    assert s(50) == pytest.approx(5e-4)
    assert s(100) == pytest.approx(1e-3)
    assert s(400) == pytest.approx(5e-4)
    with pytest.raises(ValueError):
        s(0)


def test_clip_by_global_norm():
    p = {"a": T.Parameter(np.zeros(2)), "b": T.Parameter(np.zeros(1))}
    p["a"].grad = np.array([3.0, 0.0])
    p["b"].grad = np.array([4.0])
    assert clip_by_global_norm(p, 1.0) == pytest.approx(5.0)
    assert global_norm(x.grad for x in p.values()) == pytest.approx(1.0)


def test_adam_minimises_quadratic_and_refuses_nan():
    w = T.Parameter(np.array([3.0, -2.0]))
    opt = Adam({"w": w}, LrSchedule(0.1, 1))
    for _ in range(1000):
        opt.zero_grad()
        T.sum_all(w * w).backward()
        opt.step()
    assert np.abs(w.data).max() < 0.05
    w.grad = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError, match="'w'"):
        opt.step()


def test_frozen_parameter_is_not_updated():
    w = T.Parameter(np.ones(2), trainable=False)
    opt = Adam({"w": w}, LrSchedule(0.1, 1))
    w.grad = np.ones(2)
    opt.step()
    np.testing.assert_array_equal(w.data, np.ones(2))


def test_checkpoint_round_trip_and_average(tmp_path):
    rng = np.random.default_rng(0)
    params = {"b.w": rng.normal(size=(3, 2)).astype(np.float32), "a": rng.normal(size=(4,)).astype(np.float32)}
    ck = ckpt_io.Checkpoint(params, 17, bytes(range(32)), {"note": "x"})
    ckpt_io.save(tmp_path / "c.laec", ck)
    back = ckpt_io.load(tmp_path / "c.laec")
    assert back.step == 17 and back.digest == bytes(range(32)) and back.meta == {"note": "x"}
    for k in params:
        np.testing.assert_array_equal(back.params[k], params[k])
    # sorted parameter order makes the bytes independent of dict order
    ckpt_io.save(tmp_path / "d.laec", ckpt_io.Checkpoint(dict(reversed(params.items())), 17, bytes(range(32))))
    assert (tmp_path / "c.laec").read_bytes() == (tmp_path / "d.laec").read_bytes()

    other = ckpt_io.Checkpoint({k: v + 2 for k, v in params.items()}, 20, bytes(32))
    avg = ckpt_io.average([ck, other])
    np.testing.assert_allclose(avg.params["a"], params["a"] + 1, rtol=1e-6)
    assert avg.meta["averaged_steps"] == [17, 20]


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.laec").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.load(tmp_path / "bad.laec")
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.average([ckpt_io.Checkpoint({"a": np.zeros(2)}), ckpt_io.Checkpoint({"a": np.zeros(3)})])
