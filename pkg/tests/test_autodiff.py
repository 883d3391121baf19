import math

import numpy as np
import pytest

from rmat import autodiff as ad
from rmat.autodiff import Parameter, Tensor, backward, grad_check, zero_grad


def check(f, params, seed, tol=1e-6):
    report = grad_check(f, params, rng=np.random.default_rng(seed), tol=tol)
    assert report.passed, report.failures
    return report


# ---------------------------------------------------------------------------
# per-op gradient checks, tol 1e-6, several seeded draws each

def rand_param(rng, shape, name="p", lo=-2.0, hi=2.0):
    return Parameter(name, rng.uniform(lo, hi, size=shape))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_elementwise_binary(seed):
    rng = np.random.default_rng([seed, 1])
    a = rand_param(rng, (3, 4), "a")
    b = rand_param(rng, (3, 4), "b")
    check(lambda: ad.tensor_sum(ad.mul(ad.add(a, b), ad.sub(a, b))), [a, b], seed)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_matmul(seed):
    rng = np.random.default_rng([seed, 2])
    a = rand_param(rng, (3, 4), "a")
    b = rand_param(rng, (4, 5), "b")
    check(lambda: ad.tensor_sum(ad.mul(ad.matmul(a, b), ad.matmul(a, b))), [a, b], seed)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_matmul_batched(seed):
    rng = np.random.default_rng([seed, 3])
    a = rand_param(rng, (2, 3, 4), "a")
    b = rand_param(rng, (2, 4, 5), "b")
    check(lambda: ad.tensor_sum(ad.matmul(a, b)), [a, b], seed)


@pytest.mark.parametrize(
    "name",
    ["exp", "tanh", "sigmoid", "softplus", "neg"],
)
def test_grad_smooth_unary(name):
    op = getattr(ad, name)
    for seed in range(3):
        rng = np.random.default_rng([seed, 4])
        x = rand_param(rng, (4, 3), "x", lo=-1.5, hi=1.5)
        check(lambda: ad.tensor_sum(ad.mul(op(x), op(x))), [x], seed)


def test_grad_log():
    for seed in range(3):
        rng = np.random.default_rng([seed, 5])
        x = rand_param(rng, (4, 3), "x", lo=0.5, hi=3.0)
        check(lambda: ad.tensor_sum(ad.log(x)), [x], seed)


def test_grad_leaky_relu():
    for seed in range(3):
        rng = np.random.default_rng([seed, 6])
        # keep every coordinate away from the kink at 0
        raw = rng.uniform(0.5, 2.0, size=(4, 4)) * rng.choice([-1.0, 1.0], size=(4, 4))
        x = Parameter("x", raw)
        check(lambda: ad.tensor_sum(ad.mul(ad.leaky_relu(x), ad.leaky_relu(x))), [x], seed)


@pytest.mark.parametrize("name", ["softmax", "log_softmax"])
def test_grad_softmax_family(name):
    op = getattr(ad, name)
    for seed in range(3):
        rng = np.random.default_rng([seed, 7])
        x = rand_param(rng, (3, 5), "x")
        w = Tensor(rng.normal(size=(3, 5)))
        check(lambda: ad.tensor_sum(ad.mul(op(x), w)), [x], seed)


def test_grad_reductions():
    for seed in range(3):
        rng = np.random.default_rng([seed, 8])
        x = rand_param(rng, (3, 4, 2), "x")
        check(lambda: ad.tensor_sum(ad.mul(ad.mean(x, axis=1), ad.mean(x, axis=1))), [x], seed)
        check(lambda: ad.tensor_sum(ad.mul(x, x)), [x], seed)
        check(
            lambda: ad.tensor_sum(
                ad.mul(ad.tensor_sum(x, axis=2, keepdims=True), ad.tensor_sum(x, axis=2, keepdims=True))
            ),
            [x],
            seed,
        )
        check(lambda: ad.tensor_sum(ad.mul(ad.sum_sorted(x, axis=1), ad.sum_sorted(x, axis=1))), [x], seed)


def test_grad_shape_ops():
    for seed in range(3):
        rng = np.random.default_rng([seed, 9])
        x = rand_param(rng, (3, 4), "x")
        check(lambda: ad.tensor_sum(ad.mul(ad.reshape(x, (2, 6)), ad.reshape(x, (2, 6)))), [x], seed)
        check(lambda: ad.tensor_sum(ad.mul(ad.flatten(x), ad.flatten(x))), [x], seed)
        check(
            lambda: ad.tensor_sum(ad.mul(ad.transpose_last(x), ad.transpose_last(x))),
            [x],
            seed,
        )
        check(
            lambda: ad.tensor_sum(ad.mul(ad.slice_last(x, 1, 3), ad.slice_last(x, 1, 3))),
            [x],
            seed,
        )


def test_grad_concat():
    for seed in range(3):
        rng = np.random.default_rng([seed, 10])
        a = rand_param(rng, (2, 3), "a")
        b = rand_param(rng, (2, 5), "b")
        check(
            lambda: ad.tensor_sum(ad.mul(ad.concat([a, b], axis=-1), ad.concat([a, b], axis=-1))),
            [a, b],
            seed,
        )


def test_grad_embedding_lookup():
    for seed in range(3):
        rng = np.random.default_rng([seed, 11])
        table = rand_param(rng, (6, 4), "table")
        idx = rng.integers(0, 6, size=5)
        check(
            lambda: ad.tensor_sum(
                ad.mul(ad.embedding_lookup(table, idx), ad.embedding_lookup(table, idx))
            ),
            [table],
            seed,
        )


def test_grad_layer_norm():
    for seed in range(3):
        rng = np.random.default_rng([seed, 12])
        x = rand_param(rng, (3, 8), "x")
        w = Tensor(rng.normal(size=(3, 8)))
        check(lambda: ad.tensor_sum(ad.mul(ad.layer_norm(x), w)), [x], seed)


def test_grad_mul_scalar():
    for seed in range(3):
        rng = np.random.default_rng([seed, 13])
        x = rand_param(rng, (3, 3), "x")
        check(lambda: ad.tensor_sum(ad.mul_scalar(ad.mul(x, x), -1.75)), [x], seed)


def test_grad_losses():
    for seed in range(3):
        rng = np.random.default_rng([seed, 14])
        pred = rand_param(rng, (5,), "pred")
        target = rng.normal(size=5)
        check(lambda: ad.mse_loss(pred, target), [pred], seed)

        logits = rand_param(rng, (6,), "logits")
        labels = rng.integers(0, 2, size=6).astype(np.float64)
        check(lambda: ad.bce_with_logits_loss(logits, labels), [logits], seed)

        clog = rand_param(rng, (2, 7), "clog")
        targets = rng.integers(0, 7, size=2)
        check(lambda: ad.cross_entropy_with_logits(clog, targets), [clog], seed)


def test_grad_broadcast_bias():
    for seed in range(3):
        rng = np.random.default_rng([seed, 15])
        w = rand_param(rng, (4, 3), "w")
        b = rand_param(rng, (3,), "b")
        x = Tensor(rng.normal(size=(5, 4)))
        check(lambda: ad.tensor_sum(ad.tanh(ad.add(ad.matmul(x, w), b))), [w, b], seed)


# ---------------------------------------------------------------------------
# worked identities

def test_softmax_of_constant_is_uniform():
    for k in (1, 2, 5, 9):
        x = Tensor(np.full(k, 3.7))
        out = ad.softmax(x).data
        np.testing.assert_allclose(out, np.full(k, 1.0 / k), rtol=0, atol=1e-15)
        assert abs(out.sum() - 1.0) < 1e-15


def test_leaky_relu_values():
    x = Tensor(np.array([-2.0, 3.0, 0.0]))
    out = ad.leaky_relu(x).data
    assert out[0] == -0.2
    assert out[1] == 3.0
    assert out[2] == 0.0


def test_softmax_sum_gradient_is_zero():
    # sum of softmax is constant 1, so the gradient vanishes
    x = Parameter("x", np.array([0.3, -1.2, 2.0, 0.05]))
    loss = ad.tensor_sum(ad.softmax(x))
    backward(loss)
    np.testing.assert_allclose(x.grad, np.zeros(4), rtol=0, atol=1e-16)


def test_sum_gradient_is_ones():
    x = Parameter("x", np.arange(6.0).reshape(2, 3))
    backward(ad.tensor_sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_matmul_sum_gradient():
    rng = np.random.default_rng(7)
    a = Parameter("a", rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 5)))
    backward(ad.tensor_sum(ad.matmul(a, b)))
    expected = np.ones((3, 5)) @ b.data.T
    np.testing.assert_allclose(a.grad, expected, rtol=1e-15, atol=1e-15)


def test_branch_reuse_accumulates():
    x = Parameter("x", np.array([1.5]))
    y = ad.add(ad.mul(x, x), ad.mul_scalar(x, 3.0))  # x^2 + 3x
    backward(y)
    assert x.grad[0] == 2 * 1.5 + 3.0


def test_quadratic_gradient_exact():
    x = Parameter("x", np.array([0.5, -1.25, 2.0]))
    backward(ad.tensor_sum(ad.mul(x, x)))
    assert np.array_equal(x.grad, 2.0 * x.data)


def test_zero_grad_clears():
    x = Parameter("x", np.ones(3))
    backward(ad.tensor_sum(x))
    assert x.grad is not None
    zero_grad([x])
    assert x.grad is None or np.all(x.grad == 0.0)


def test_uniform_cross_entropy_is_log_v():
    for v in (2, 5, 17):
        logits = Tensor(np.zeros((3, v)))
        loss = ad.cross_entropy_with_logits(logits, np.array([0, 1, v - 1]))
        assert abs(loss.item() - math.log(v)) < 1e-12


def test_bce_at_zero_logit_is_log_two():
    logits = Tensor(np.zeros(4))
    for target in (np.zeros(4), np.ones(4)):
        loss = ad.bce_with_logits_loss(logits, target)
        assert abs(loss.item() - math.log(2.0)) < 1e-12


def test_mse_loss_value():
    loss = ad.mse_loss(Tensor(np.array([1.0, 2.0])), np.array([0.0, 0.0]))
    assert loss.item() == 2.5


def test_log_softmax_matches_log_of_softmax():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 6)))
    a = ad.log_softmax(x).data
    b = np.log(ad.softmax(x).data)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_softmax_shift_invariant():
    rng = np.random.default_rng(4)
    x = rng.normal(size=7)
    a = ad.softmax(Tensor(x)).data
    b = ad.softmax(Tensor(x + 1000.0)).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
    huge = ad.softmax(Tensor(np.array([1e30, 0.0, -1e30]))).data
    assert np.all(np.isfinite(huge))


# ---------------------------------------------------------------------------
# order-independent summation

def test_sum_sorted_permutation_bitwise():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(1, 40, 3)) * np.logspace(-8, 8, 40)[None, :, None]
    base = ad.sum_sorted(Tensor(x), axis=1).data
    for seed in range(10):
        perm = np.random.default_rng(seed).permutation(40)
        out = ad.sum_sorted(Tensor(x[:, perm, :]), axis=1).data
        assert np.array_equal(base, out)


def test_sum_sorted_matches_plain_sum_loosely():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(3, 9))
    a = ad.sum_sorted(Tensor(x), axis=1).data
    b = x.sum(axis=1)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_sum_sorted_handles_negative_axis_and_ties():
    x = Tensor(np.array([[1.0, 1.0, -2.0], [0.0, 0.0, 0.0]]))
    out = ad.sum_sorted(x, axis=-1).data
    assert out.tolist() == [0.0, 0.0]


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    params = [
        Parameter("layer.w", rng.normal(size=(3, 4))),
        Parameter("layer.b", rng.normal(size=(4,))),
        Parameter("scalar", np.array(2.5)),
    ]
    cfg = {"d_model": 8, "variant": "rmsa"}
    path = str(tmp_path / "model.ckpt")
    ad.save_checkpoint(path, params, cfg)
    loaded, cfg2 = ad.load_checkpoint(path)
    assert cfg2 == cfg
    assert list(loaded.keys()) == ["layer.w", "layer.b", "scalar"]
    for p in params:
        assert np.array_equal(loaded[p.name], p.data)
        assert loaded[p.name].dtype == np.float64


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(str(path))


def test_checkpoint_truncated(tmp_path):
    params = [Parameter("w", np.ones((8, 8)))]
    path = str(tmp_path / "full.ckpt")
    ad.save_checkpoint(path, params, {})
    blob = open(path, "rb").read()
    short = tmp_path / "short.ckpt"
    short.write_bytes(blob[: len(blob) - 16])
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(str(short))
    extra = tmp_path / "extra.ckpt"
    extra.write_bytes(blob + b"junk")
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(str(extra))


def test_checkpoint_accepts_dict(tmp_path):
    path = str(tmp_path / "d.ckpt")
    ad.save_checkpoint(path, {"a": np.arange(3.0)}, {"k": 1})
    loaded, cfg = ad.load_checkpoint(path)
    assert np.array_equal(loaded["a"], np.arange(3.0))
    assert cfg == {"k": 1}


# ---------------------------------------------------------------------------
# engine behavior

def test_backward_requires_scalar():
    x = Parameter("x", np.ones((2, 2)))
    with pytest.raises(ValueError):
        backward(ad.mul(x, x))


def test_no_grad_tracking_for_constants():
    x = Tensor(np.ones(3))
    y = ad.tensor_sum(ad.mul(x, x))
    assert not y.requires_grad


def test_graph_reuse_two_backwards():
    # two separate graphs over the same leaf accumulate into .grad
    x = Parameter("x", np.array([2.0]))
    backward(ad.tensor_sum(ad.mul(x, x)))
    first = x.grad.copy()
    backward(ad.tensor_sum(ad.mul(x, x)))
    assert np.array_equal(x.grad, 2.0 * first)
