import math

import numpy as np
import pytest

from genert.errors import ShapeMismatch, ZeroTargetNorm
from genert.nn import (
    Adam, Dense, Embedding, ParamGroup, PosEnc, ReLU, ResidualBlock, Sequential, Sigmoid, adam_step,
    angle_mse, check_gradients, nmse, pos_enc, sincos_mse, xavier_init,
)

from gradharness import LAYER_KINDS, layer_case, run_check


def test_pos_enc_quarter_pi():
    assert np.allclose(pos_enc(math.pi / 4, 2), [1, 0, 0, -1], atol=1e-15)


@pytest.mark.parametrize("L", range(1, 9))
def test_pos_enc_length(L):
    assert pos_enc(0.3, L).shape == (2 * L,)


def test_pos_enc_layer_clamps(caplog):
    y, _ = PosEnc(2).forward(np.array([-0.5, 3.0]))
    assert np.allclose(y[0], pos_enc(0.0, 2))
    assert np.allclose(y[1], pos_enc(math.pi / 2, 2))


def test_pos_enc_clamped_inputs_have_zero_gradient():
    layer = PosEnc(2)
    y, c = layer.forward(np.array([-0.5, 0.7]))
    dx = layer.backward(np.ones_like(y), c)
    assert dx[0] == 0.0 and dx[1] != 0.0


def _group(*layers_fn):
    g = ParamGroup("t")
    rng = np.random.default_rng(0)
    out = [f(g, rng) for f in layers_fn]
    g.finalize()
    return g, out


def test_zero_residual_block_is_identity():
    g, (blk,) = _group(lambda g, r: ResidualBlock((4, 3, 4), g, r))
    g.data[...] = 0.0
    x = np.random.default_rng(1).normal(size=(5, 4))
    assert np.array_equal(blk.forward(x)[0], x)


def test_residual_needs_equal_widths():
    with pytest.raises(ShapeMismatch):
        ResidualBlock((4, 3, 5), ParamGroup("t"), np.random.default_rng(0))


def test_embedding_lookup_row():
    g, (emb,) = _group(lambda g, r: Embedding(3, 5, g, r))
    for i in range(3):
        assert np.array_equal(emb.forward([i])[0][0], emb.table[i])
    with pytest.raises(ShapeMismatch):
        emb.forward([3])


def test_identity_dense():
    g, (d,) = _group(lambda g, r: Dense(3, 3, g, r))
    d.W[...] = np.eye(3)
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(d.forward(x)[0], x)
    with pytest.raises(ShapeMismatch):
        d.forward(np.zeros((2, 4)))


def test_views_share_group_buffer():
    g, (d,) = _group(lambda g, r: Dense(2, 2, g, r))
    g.data[0] = 42.0
    assert d.W[0, 0] == 42.0


@pytest.mark.parametrize("kind", LAYER_KINDS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layer_gradients(kind, seed):
    worst, checked, skipped = run_check(layer_case(kind, seed))
    assert checked > 0
    assert worst < 1e-4


def test_random_three_layer_net_64_params():
    rng = np.random.default_rng(7)
    g = ParamGroup("net")
    # 3*5+5 + 5*4+4 + 4*4+4 = 64
    net = Sequential([Dense(3, 5, g, rng), ReLU(), Dense(5, 4, g, rng), ReLU(), Dense(4, 4, g, rng)])
    g.finalize()
    assert g.size == 64
    g.data += rng.normal(scale=0.1, size=64)
    x = rng.normal(size=(10, 3))
    t = rng.normal(size=(10, 4))
    g.zero_grad()
    y, c = net.forward(x)
    net.backward(nmse(y, t)[1], c)
    worst, checked, _ = check_gradients(lambda: nmse(net.forward(x)[0], t)[0], [g])
    assert checked > 50 and worst < 1e-4


def test_constant_loss_gives_zero_gradient():
    g, (d,) = _group(lambda g, r: Dense(3, 2, g, r))
    y, c = d.forward(np.ones((4, 3)))
    g.zero_grad()
    d.backward(np.zeros_like(y), c)
    assert np.abs(g.grad).max() <= 1e-12


def test_residual_input_gradient_is_sum():
    g, (blk,) = _group(lambda g, r: ResidualBlock((3, 4, 3), g, r))
    x = np.random.default_rng(2).normal(size=(5, 3))
    dy = np.random.default_rng(3).normal(size=(5, 3))
    _, c = blk.forward(x)
    with_skip = blk.backward(dy, c)
    blk.residual = False
    through = Sequential.backward(blk, dy, c)
    assert np.allclose(with_skip, through + dy, atol=1e-15)


def test_relu_gradient_zero_where_inactive():
    x = np.array([[-1.0, 0.0, 2.0]])
    relu = ReLU()
    y, m = relu.forward(x)
    dx = relu.backward(np.ones_like(x), m)
    assert np.array_equal(dx == 0, y == 0)


def test_sigmoid_range_and_symmetry():
    y, _ = Sigmoid().forward(np.array([-800.0, 0.0, 800.0]))
    assert np.array_equal(y, [0.0, 0.5, 1.0])


def test_frozen_layer_accumulates_nothing():
    g, (d,) = _group(lambda g, r: Dense(3, 2, g, r))
    d.frozen = True
    y, c = d.forward(np.ones((4, 3)))
    g.zero_grad()
    dx = d.backward(np.ones_like(y), c)
    assert not g.grad.any() and dx.shape == (4, 3)


def test_adam_quadratic():
    w = np.zeros(1)
    m, v = np.zeros(1), np.zeros(1)
    for t in range(1, 501):
        w = adam_step(w, 2 * (w - 3.0), m, v, t, 0.1)
    assert abs(w[0] - 3.0) < 1e-3


def test_adam_zero_gradient_no_move():
    w = np.array([1.0, -2.0])
    out = adam_step(w, np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.1)
    assert np.abs(out - w).max() <= 1e-12


def test_adam_class_matches_functional():
    g = ParamGroup("p")
    holder = type("H", (), {"grads": {}})()
    g.register(holder, "w", np.array([0.5, -1.0, 2.0]))
    g.finalize()
    ref = g.data.copy()
    m, v = np.zeros(3), np.zeros(3)
    opt = Adam()
    for t in range(1, 20):
        grad = np.sin(ref * t)
        g.grad[...] = grad
        opt.step(g, 0.01)
        ref = adam_step(ref, grad, m, v, t, 0.01)
    assert np.array_equal(g.data, ref)


def test_adam_deterministic():
    runs = []
    for _ in range(2):
        w = np.random.default_rng(5).normal(size=10)
        m, v = np.zeros(10), np.zeros(10)
        for t in range(1, 50):
            w = adam_step(w, np.tanh(w) + 0.1 * w, m, v, t, 1e-2)
        runs.append(w)
    assert np.array_equal(runs[0], runs[1])


def test_losses():
    t = np.array([0.3, -0.2])
    assert nmse(t, t)[0] == 0.0
    assert nmse(np.zeros(2), t)[0] == 1.0
    with pytest.raises(ZeroTargetNorm):
        nmse(t, np.zeros(2))
    assert angle_mse(0.7, 0.7) == 0.0
    assert angle_mse(math.pi / 2, 0.0) == pytest.approx(2.0, abs=1e-15)
    sc = np.array([[0.0, 1.0]])
    assert sincos_mse(np.array([[1.0, 0.0]]), sc)[0] == pytest.approx(2.0)


def test_xavier_bound():
    rng = np.random.default_rng(0)
    w = xavier_init((32, 64), rng)
    bound = math.sqrt(6 / 96)
    assert bound == 0.25
    big = xavier_init((1000, 100), np.random.default_rng(1))
    b2 = math.sqrt(6 / 1100)
    assert np.abs(big).max() <= b2 and np.abs(big).max() > 0.99 * b2
    assert np.abs(w).max() <= bound
    assert np.array_equal(w, xavier_init((32, 64), np.random.default_rng(0)))
