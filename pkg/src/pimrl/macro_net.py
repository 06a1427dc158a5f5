"""Macro module: strided conv encoder, ConvLSTM cell, upsampling decoder, residual.

All convolutions use periodic padding. The encoder downsamples x4 (two
stride-2 layers), so grid extents must be divisible by 4.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .solvers import SplitMix64

GATES = ("i", "f", "c", "o")


class MacroDivergence(FloatingPointError):
    pass


@dataclass
class ConvLstmState:
    h: T.DiffTensor
    c: T.DiffTensor


class MacroNet:
    def __init__(self, n_fields, ndim, enc_channels=(16, 32), kernel=3, seed=0):
        self.n_fields, self.ndim = n_fields, ndim
        self.enc_channels = tuple(enc_channels)
        self.hidden = self.enc_channels[-1]
        self.kernel = kernel
        rng = SplitMix64(seed)
        self.params = {}
        c0, c1 = self.enc_channels
        self._conv("enc.0", c0, n_fields, rng)
        self._conv("enc.1", c1, c0, rng)
        for g in GATES:
            self._conv(f"lstm.x{g}", self.hidden, c1, rng)
            self._conv(f"lstm.h{g}", self.hidden, self.hidden, rng)
        self.params["lstm.bxf"].values = np.ones(self.hidden)
        self._conv("dec.0", c0, self.hidden, rng)
        self._conv("dec.1", n_fields, c0, rng, scale=0.1)

    def _conv(self, name, co, ci, rng, scale=1.0):
        ksz = (self.kernel,) * self.ndim
        fan_in = ci * self.kernel ** self.ndim
        w = rng.normal(co * fan_in).reshape((co, ci) + ksz) * (scale / np.sqrt(fan_in))
        if name.startswith("lstm."):
            wname, bname = f"lstm.w{name[5:]}", f"lstm.b{name[5:]}"
        else:
            wname, bname = f"{name}.w", f"{name}.b"
        self.params[wname] = T.DiffTensor(w, True, wname)
        self.params[bname] = T.DiffTensor(np.zeros(co), True, bname)

    def decoder_names(self):
        return [n for n in self.params if n.startswith("dec.")]

    def zero_decoder(self):
        for n in self.decoder_names():
            self.params[n].values = np.zeros_like(self.params[n].values)

    def latent_shape(self, grid):
        for n in grid:
            if n % 4:
                raise T.ShapeError(f"macro: grid extent {n} not divisible by 4")
        return (self.hidden,) + tuple(n // 4 for n in grid)

    def init_state(self, grid):
        shape = self.latent_shape(grid)
        return ConvLstmState(T.DiffTensor(np.zeros(shape)), T.DiffTensor(np.zeros(shape)))


def encode(u, net):
    if u.shape[0] != net.n_fields or u.values.ndim != net.ndim + 1:
        raise T.ShapeError(f"encode: expected {net.n_fields} fields in {net.ndim}D, got {u.shape}")
    net.latent_shape(u.shape[1:])
    p = net.params
    z = T.tanh(T.conv(u, p["enc.0.w"], p["enc.0.b"], stride=2))
    return T.conv(z, p["enc.1.w"], p["enc.1.b"], stride=2)


def decode(h, net):
    p = net.params
    z = T.tanh(T.conv(T.upsample2x(h), p["dec.0.w"], p["dec.0.b"]))
    return T.conv(T.upsample2x(z), p["dec.1.w"], p["dec.1.b"])


def _gate_preacts(x, h, net):
    # all four gates from one conv on x and one on h, split afterwards
    p = net.params
    wx = T.concat([p[f"lstm.wx{g}"] for g in GATES])
    bx = T.concat([p[f"lstm.bx{g}"] for g in GATES])
    wh = T.concat([p[f"lstm.wh{g}"] for g in GATES])
    bh = T.concat([p[f"lstm.bh{g}"] for g in GATES])
    z = T.add(T.conv(x, wx, bx), T.conv(h, wh, bh))
    n = net.hidden
    return {g: T.channel_slice(z, j * n, (j + 1) * n) for j, g in enumerate(GATES)}


def convlstm_cell(x, state, net):
    """Standard ConvLSTM update; returns the new ``(h, c)``."""
    if x.shape != state.h.shape or state.h.shape != state.c.shape:
        raise T.ShapeError(f"convlstm: x {x.shape}, h {state.h.shape}, c {state.c.shape}")
    z = _gate_preacts(x, state.h, net)
    i = T.sigmoid(z["i"])
    f = T.sigmoid(z["f"])
    c = T.add(T.mul(f, state.c), T.mul(i, T.tanh(z["c"])))
    o = T.sigmoid(z["o"])
    h = T.mul(o, T.tanh(c))
    return ConvLstmState(h, c)


def macro_step(u, state, net):
    """``u + decode(h')`` with ``(h', c') = cell(encode(u), state)``."""
    u = T.as_tensor(u)
    new = convlstm_cell(encode(u, net), state, net)
    out = T.add(u, decode(new.h, net))
    if not np.all(np.isfinite(out.values)):
        raise MacroDivergence("macro step produced non-finite values")
    return out, new
