import math

import numpy as np
import pytest

from mrtnet.layers import (
    Adam,
    AdamState,
    BatchNorm,
    Conv1d,
    Linear,
    adam_step,
    avg_pool1d,
    batch_norm,
    conv1d,
    linear,
    lr_schedule,
    nn_upsample,
    parameter,
    softmax_cross_entropy,
    transposed_conv1d,
)
from mrtnet.tensor import Tensor, backward, finite_diff_check, precision, relu


@pytest.fixture(autouse=True)
def float64():
    with precision(np.float64):
        yield


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def test_conv_k2s2_hand_value():
    out = conv1d(t([[[1, 2, 3, 4]]]), t([[[1, 1]]]), t([0]))
    np.testing.assert_array_equal(out.data, [[[3, 7]]])


def test_conv_k1s1_identity():
    x = t(np.random.default_rng(0).normal(size=(2, 3, 5)))
    w = t(np.eye(3)[:, :, None])
    np.testing.assert_array_equal(conv1d(x, w, t(np.zeros(3))).data, x.data)


def test_conv_shapes():
    rng = np.random.default_rng(0)
    conv = Conv1d(16, 32, 2, rng)
    assert conv(t(np.zeros((2, 16, 1024)))).shape == (2, 32, 512)


def test_conv_odd_length_rejected():
    with pytest.raises(ValueError):
        conv1d(t(np.zeros((1, 1, 3))), t([[[1, 1]]]))


def test_transposed_hand_value():
    out = transposed_conv1d(t([[[3, 5]]]), t([[[1, 2]]]), t([0]))
    np.testing.assert_array_equal(out.data, [[[3, 6, 5, 10]]])


def test_transposed_shape():
    conv = Conv1d(512, 512, 2, np.random.default_rng(0), transposed=True)
    assert conv(t(np.zeros((1, 512, 16)))).shape == (1, 512, 32)


def _brute_conv(x, w, b):
    B, C, L = x.shape
    O, _, K = w.shape
    out = np.zeros((B, O, L // K))
    for bb in range(B):
        for o in range(O):
            for tt in range(L // K):
                out[bb, o, tt] = b[o] + sum(
                    w[o, c, j] * x[bb, c, K * tt + j] for c in range(C) for j in range(K)
                )
    return out


def test_conv_matches_loop_definition():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3, 8)), rng.normal(size=(4, 3, 2)), rng.normal(size=4)
    np.testing.assert_allclose(conv1d(t(x), t(w), t(b)).data, _brute_conv(x, w, b), atol=1e-12)


@pytest.mark.parametrize("trial", range(100))
def test_adjoint_identity(trial):
    rng = np.random.default_rng(trial)
    B, Ci, Co, T = 2, 3, 5, 4
    w = rng.normal(size=(Co, Ci, 2))
    x = rng.normal(size=(B, Ci, 2 * T))
    y = rng.normal(size=(B, Co, T))
    ax = conv1d(t(x), t(w)).data
    aty = transposed_conv1d(t(y), t(w.transpose(1, 0, 2))).data
    assert abs(np.sum(ax * y) - np.sum(x * aty)) < 1e-10


def test_pool_and_upsample():
    np.testing.assert_array_equal(avg_pool1d(t([[[1, 3, 5, 7]]]), 2).data, [[[2, 6]]])
    np.testing.assert_array_equal(avg_pool1d(t([[[1, 1, 1, 1]]]), 4).data, [[[1]]])
    np.testing.assert_array_equal(nn_upsample(t([[[2, 6]]]), 2).data, [[[2, 2, 6, 6]]])
    x = t([[[2, 6]]])
    assert nn_upsample(x, 1) is x
    with pytest.raises(ValueError):
        avg_pool1d(t([[[1, 2, 3]]]), 2)


@pytest.mark.parametrize("k", [1, 2, 4, 8])
def test_pool_inverts_upsample(k):
    x = t(np.random.default_rng(k).normal(size=(2, 3, 5)))
    np.testing.assert_array_equal(avg_pool1d(nn_upsample(x, k), k).data, x.data)


def test_batch_norm_unit_variance_pair():
    bn = BatchNorm(1)
    out = bn(t([[[-1.0, 1.0]]]))
    np.testing.assert_allclose(out.data, [[[-1, 1]]], atol=1e-5)


def test_batch_norm_constant_channel_gives_beta():
    bn = BatchNorm(2)
    bn.beta.data[:] = [0.3, -0.7]
    out = bn(t(np.full((3, 2, 4), 5.0)))
    np.testing.assert_allclose(out.data[:, 0], 0.3)
    np.testing.assert_allclose(out.data[:, 1], -0.7)


def test_batch_norm_eval_identity():
    bn = BatchNorm(3).eval()
    x = t(np.random.default_rng(0).normal(size=(2, 3, 4)))
    np.testing.assert_allclose(bn(x).data, x.data / math.sqrt(1 + 1e-5))


def test_batch_norm_train_statistics():
    rng = np.random.default_rng(5)
    x = t(rng.normal(3.0, 2.0, size=(4, 6, 16)))
    out = BatchNorm(6)(x).data
    assert np.all(np.abs(out.mean(axis=(0, 2))) < 1e-6)
    assert np.all(np.abs(out.var(axis=(0, 2)) - 1) < 1e-4)


def test_batch_norm_updates_running_stats():
    bn = BatchNorm(1)
    bn(t([[[1.0, 3.0]]]))
    np.testing.assert_allclose(bn.running_mean, [0.2])
    np.testing.assert_allclose(bn.running_var, [0.9 + 0.1 * 2.0])


def test_batch_norm_needs_two_values():
    with pytest.raises(ValueError):
        BatchNorm(1)(t([[[1.0]]]))


def test_linear_examples():
    x = t([[1.0, 2.0]])
    np.testing.assert_array_equal(linear(x, t(np.eye(2)), t([0, 0])).data, x.data)
    np.testing.assert_array_equal(linear(x, t([[1, 1]]), t([0.5])).data, [[3.5]])
    assert Linear(512, 40, np.random.default_rng(0))(t(np.zeros((3, 512)))).shape == (3, 40)
    with pytest.raises(ValueError):
        linear(x, t(np.eye(3)))


def test_cross_entropy_uniform_40():
    loss = softmax_cross_entropy(t(np.zeros((4, 40))), [0, 5, 39, 7])
    assert abs(loss.item() - math.log(40)) < 1e-12


def test_cross_entropy_margin_limit_and_gradient_sum():
    logits = np.zeros((2, 5))
    logits[0, 1] = logits[1, 3] = 50.0
    assert softmax_cross_entropy(t(logits), [1, 3]).item() < 1e-15
    x = Tensor(np.random.default_rng(0).normal(size=(3, 6)), requires_grad=True)
    backward(softmax_cross_entropy(x, [0, 1, 2]))
    np.testing.assert_allclose(x.grad.sum(axis=1), 0, atol=1e-15)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError):
        softmax_cross_entropy(t(np.zeros((1, 3))), [3])


def test_adam_first_step_magnitude():
    p = parameter(np.zeros(4))
    p.grad = np.ones(4)
    adam_step([p], AdamState(lr=1e-3))
    np.testing.assert_allclose(p.data, -1e-3, rtol=1e-6)


def test_adam_zero_gradient_leaves_params():
    p = parameter([1.0, -2.0])
    st = AdamState()
    for _ in range(5):
        p.grad = np.zeros(2)
        adam_step([p], st)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st.step_count == 5


def test_adam_quadratic_bowl():
    w = parameter([1.0])
    opt = Adam([w], lr=1e-2)
    history = []
    for step in range(2000):
        opt.zero_grad()
        loss = (w * w).sum()
        if step % 100 == 0:
            history.append(loss.item())
        backward(loss)
        opt.step()
    assert abs(w.data[0]) < 1e-3
    assert all(b < a for a, b in zip(history, history[1:]))


def test_lr_schedule():
    assert lr_schedule(0, 1e-3, 5) == 1e-3
    assert lr_schedule(10, 1e-3, 5) == 2.5e-4
    assert lr_schedule(3, 1e-3, 2) == 5e-4
    with pytest.raises(ValueError):
        lr_schedule(1, 1e-3, 0)


# -- gradient oracles --------------------------------------------------------

def _away_from_kinks(v, eps=1e-3):
    v = v.copy()
    v[np.abs(v) < eps] += 10 * eps
    return v


@pytest.mark.parametrize("seed", range(5))
def test_layer_gradients(seed):
    rng = np.random.default_rng(seed)
    w2 = t(rng.normal(size=(4, 3, 2)))
    w1 = t(rng.normal(size=(4, 3, 1)))
    wt = t(rng.normal(size=(4, 3, 2)))
    b = t(rng.normal(size=4))
    gamma, beta = t(rng.normal(size=3)), t(rng.normal(size=3))
    lw, lb = t(rng.normal(size=(5, 24))), t(rng.normal(size=5))
    r = rng.normal(size=(2, 4, 4))
    x0 = t(rng.normal(size=(2, 3, 8)))
    cases = {
        "conv_k2": lambda x: (conv1d(x, w2, b) * t(r)).sum(),
        "conv_k1": lambda x: (conv1d(x, w1, b) * t(rng_fixed8)).sum(),
        "tconv": lambda x: (transposed_conv1d(avg_pool1d(x, 2), wt, b) * t(rng_fixed8)).sum(),
        "pool_up": lambda x: (nn_upsample(avg_pool1d(x, 4), 4) * x).sum(),
        "bn_train": lambda x: (batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), True) * x).sum(),
        "bn_eval": lambda x: (batch_norm(x, gamma, beta, np.full(3, 0.1), np.full(3, 2.0), False) * x).sum(),
        "linear_ce": lambda x: softmax_cross_entropy(linear(x.reshape(2, 24), lw, lb), [1, 4]),
    }
    rng_fixed8 = rng.normal(size=(2, 4, 8))
    for name, f in cases.items():
        assert finite_diff_check(f, x0, eps=1e-6) < 1e-4, name


def test_parameter_gradients_through_layers():
    rng = np.random.default_rng(7)
    x = t(rng.normal(size=(2, 3, 8)))
    conv = Conv1d(3, 4, 2, rng)

    def f(w):
        return relu(conv1d(x, w, conv.bias)).sum()

    w0 = Tensor(_away_from_kinks(conv.weight.data))
    assert finite_diff_check(f, w0, eps=1e-6) < 1e-4
