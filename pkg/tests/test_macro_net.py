import numpy as np
import pytest

from pimrl import tensor as T
from pimrl.macro_net import ConvLstmState, MacroNet, convlstm_cell, encode, macro_step

from oracles import fd_grad, rel_err


def zeroed(net):
    for p in net.params.values():
        p.values = np.zeros_like(p.values)
    return net


def state_of(h, c):
    return ConvLstmState(T.DiffTensor(h), T.DiffTensor(c))


def test_encoder_shape():
    net = MacroNet(2, 2)
    z = encode(T.DiffTensor(np.random.default_rng(0).normal(size=(2, 48, 48))), net)
    assert z.shape == (32, 12, 12)


def test_encoder_1d_shape():
    net = MacroNet(1, 1)
    assert encode(T.DiffTensor(np.zeros((1, 64))), net).shape == (32, 16)


def test_zero_weights_zero_latent_and_determinism():
    u = T.DiffTensor(np.random.default_rng(1).normal(size=(2, 16, 16)))
    assert np.all(encode(u, zeroed(MacroNet(2, 2))).values == 0.0)
    net = MacroNet(2, 2, seed=4)
    np.testing.assert_array_equal(encode(u, net).values, encode(u, net).values)


def test_encoder_rejects_bad_shapes():
    net = MacroNet(2, 2)
    with pytest.raises(T.ShapeError):
        encode(T.DiffTensor(np.zeros((3, 16, 16))), net)
    with pytest.raises(T.ShapeError):
        encode(T.DiffTensor(np.zeros((2, 18, 16))), net)


def test_cell_zero_weights_hand_values():
    net = zeroed(MacroNet(2, 2))
    c0 = np.random.default_rng(2).normal(size=(32, 4, 4))
    new = convlstm_cell(T.DiffTensor(np.zeros((32, 4, 4))), state_of(np.zeros((32, 4, 4)), c0), net)
    # sigma(0) = 1/2 on every gate and tanh(0) = 0
    np.testing.assert_allclose(new.c.values, 0.5 * c0, rtol=1e-15)
    np.testing.assert_allclose(new.h.values, 0.5 * np.tanh(0.5 * c0), rtol=1e-15)


def test_cell_all_zero_stays_zero():
    net = zeroed(MacroNet(2, 2))
    z = np.zeros((32, 4, 4))
    new = convlstm_cell(T.DiffTensor(z), state_of(z, z), net)
    assert np.all(new.h.values == 0) and np.all(new.c.values == 0)


def test_cell_matches_gate_equations():
    net = MacroNet(2, 2, seed=3)
    rng = np.random.default_rng(3)
    x, h, c = (rng.normal(size=(32, 4, 4)) for _ in range(3))
    p = {n: t.values for n, t in net.params.items()}

    def conv(inp, w, b):
        return T.conv(T.DiffTensor(inp), T.DiffTensor(w), T.DiffTensor(b)).values

    def gate(g):
        return conv(x, p[f"lstm.wx{g}"], p[f"lstm.bx{g}"]) + conv(h, p[f"lstm.wh{g}"], p[f"lstm.bh{g}"])

    sig = lambda a: 1 / (1 + np.exp(-a))
    ci, cf, co = sig(gate("i")), sig(gate("f")), sig(gate("o"))
    cc = cf * c + ci * np.tanh(gate("c"))
    new = convlstm_cell(T.DiffTensor(x), state_of(h, c), net)
    np.testing.assert_allclose(new.c.values, cc, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(new.h.values, co * np.tanh(cc), rtol=1e-12, atol=1e-13)


def test_forget_bias_initialised_to_one():
    net = MacroNet(2, 2)
    assert np.all(net.params["lstm.bxf"].values == 1.0)
    assert np.all(net.params["lstm.bhf"].values == 0.0)


def test_cell_shape_mismatch_rejected():
    net = MacroNet(2, 2)
    with pytest.raises(T.ShapeError):
        convlstm_cell(T.DiffTensor(np.zeros((32, 4, 4))), state_of(np.zeros((32, 4, 4)), np.zeros((32, 2, 2))),
                      net)


def test_gates_bounded_and_finite():
    net = MacroNet(2, 2, seed=5)
    for p in net.params.values():
        p.values = p.values * 50
    x = T.DiffTensor(np.random.default_rng(5).normal(size=(32, 4, 4)) * 100)
    s = net.init_state((16, 16))
    new = convlstm_cell(x, s, net)
    assert np.all(np.isfinite(new.c.values)) and np.all(np.abs(new.h.values) <= 1.0)


def test_zero_decoder_identity_over_rollout():
    net = MacroNet(2, 2, seed=6)
    net.zero_decoder()
    u0 = np.random.default_rng(6).normal(size=(2, 16, 16))
    u, s = T.DiffTensor(u0), net.init_state((16, 16))
    for _ in range(20):
        u, s = macro_step(u, s, net)
        np.testing.assert_array_equal(u.values, u0)
        assert s.h.shape == s.c.shape == (32, 4, 4)


@pytest.mark.parametrize("shape", [(2, 16, 16), (2, 8, 12)])
def test_output_shape(shape):
    net = MacroNet(2, 2)
    u, _ = macro_step(np.zeros(shape), net.init_state(shape[1:]), net)
    assert u.shape == shape


def test_recurrent_state_carries():
    net = MacroNet(2, 2, seed=7)
    u0 = np.random.default_rng(7).normal(size=(2, 16, 16))
    s0 = net.init_state((16, 16))
    u1, s1 = macro_step(u0, s0, net)
    u2_carried, _ = macro_step(u1, s1, net)
    u2_fresh, _ = macro_step(u1, net.init_state((16, 16)), net)
    assert np.abs(u2_carried.values - u2_fresh.values).max() > 1e-8


def test_three_step_gradcheck():
    net = MacroNet(2, 2, enc_channels=(4, 8), seed=8)
    for n in net.decoder_names():
        net.params[n].values = net.params[n].values * 10
    rng = np.random.default_rng(8)
    u0 = rng.normal(size=(2, 8, 8))
    tgt = rng.normal(size=(2, 8, 8))

    def loss():
        u, s = T.DiffTensor(u0), net.init_state((8, 8))
        for _ in range(3):
            u, s = macro_step(u, s, net)
        return T.mse(u, tgt)

    T.backward(loss(), reset=True)
    for name, p in net.params.items():
        entries = rng.choice(p.values.size, size=min(5, p.values.size), replace=False)
        fd = fd_grad(lambda: loss().item(), p.values, entries=entries)
        assert rel_err(p.grad.reshape(-1)[entries], fd.reshape(-1)[entries]) < 1e-4, name
