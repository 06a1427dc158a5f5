"""Physics-encoded micro module: Pi-block plus fixed FD convolution, forward Euler.

The Pi-block approximates the unknown part of the right-hand side as a 1x1
channel mix of the elementwise product of ``n_layers`` parallel periodic
convolutions of the state. Known terms (diffusion, KdV dispersion) enter
through a frozen convolution whose kernel is the finite-difference stencil
scaled by the PDE coefficient.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .physics import d3x_stencil, laplacian_stencil
from .solvers import SplitMix64


class MicroDivergence(FloatingPointError):
    def __init__(self, step):
        super().__init__(f"micro rollout produced non-finite values at step {step}")
        self.step = step


def known_terms(case_name, dx, params, ndim):
    """Per-field (coefficient, stencil) pairs for the hard-encoded physics."""
    if case_name == "kdv":
        return [(-1.0, d3x_stencil(dx))]
    lap = laplacian_stencil(dx, ndim=ndim)
    if case_name == "burgers2d":
        return [(params["nu"], lap), (params["nu"], lap)]
    if case_name == "fn2d":
        return [(params["mu_u"], lap), (params["mu_v"], lap)]
    if case_name == "gs2d":
        return [(params["D_u"], lap), (params["D_v"], lap)]
    raise ValueError(f"no known-term assignment for case {case_name!r}")


def physics_kernel(terms):
    """Block-diagonal conv kernel ``(C, C, *k)`` applying term c to field c."""
    C = len(terms)
    ext = max(max(s.coefficients.shape) for _, s in terms)
    ndim = terms[0][1].ndim
    w = np.zeros((C, C) + (ext,) * ndim)
    for c, (coef, s) in enumerate(terms):
        k = s.coefficients
        off = (ext - k.shape[0]) // 2
        if ndim == 1:
            w[c, c, off:off + k.shape[0]] = coef * k
        else:
            w[c, c, off:off + k.shape[0], off:off + k.shape[1]] = coef * k
    return w


class MicroNet:
    """Pi-block weights, frozen physics kernel and the Euler step size ``dt``."""

    def __init__(self, n_fields, ndim, dt, physics_terms=None, n_layers=3, n_channels=16,
                 kernel=5, seed=0):
        if dt <= 0:
            raise ValueError("micro step dt must be positive")
        self.n_fields, self.ndim, self.dt = n_fields, ndim, float(dt)
        self.n_layers, self.n_channels, self.kernel = n_layers, n_channels, kernel
        rng = SplitMix64(seed)
        ksz = (kernel,) * ndim
        fan_in = n_fields * kernel ** ndim
        self.params = {}
        for l in range(n_layers):
            w = rng.normal(n_channels * fan_in).reshape((n_channels, n_fields) + ksz)
            self.params[f"pi.k{l}"] = T.DiffTensor(0.1 / np.sqrt(fan_in) * w, True, f"pi.k{l}")
            self.params[f"pi.b{l}"] = T.DiffTensor(np.zeros(n_channels), True, f"pi.b{l}")
        wc = rng.normal(n_fields * n_channels).reshape(n_fields, n_channels)
        self.params["pi.w"] = T.DiffTensor(0.1 / np.sqrt(n_channels) * wc, True, "pi.w")
        self.params["pi.wb"] = T.DiffTensor(np.zeros(n_fields), True, "pi.wb")
        self.physics = None
        if physics_terms:
            if len(physics_terms) != n_fields:
                raise ValueError("need one physics term per field")
            self.physics = T.DiffTensor(physics_kernel(physics_terms))

    def zero_pi_block(self):
        self.params["pi.w"].values = np.zeros_like(self.params["pi.w"].values)
        self.params["pi.wb"].values = np.zeros_like(self.params["pi.wb"].values)

    def _check(self, u):
        if u.shape[0] != self.n_fields or u.values.ndim != self.ndim + 1:
            raise T.ShapeError(f"micro: expected ({self.n_fields}, *{self.ndim}D grid), got {u.shape}")


def pi_block(u, net):
    """Learned right-hand side: 1x1 mix of the product of parallel convolutions."""
    net._check(u)
    p = net.params
    L, Nc = net.n_layers, net.n_channels
    # the parallel layers share one strided gather: stack kernels, convolve once, split
    k = T.concat([p[f"pi.k{l}"] for l in range(L)])
    b = T.concat([p[f"pi.b{l}"] for l in range(L)])
    z = T.conv(u, k, b)
    prod = T.channel_slice(z, 0, Nc)
    for l in range(1, L):
        prod = T.mul(prod, T.channel_slice(z, l * Nc, (l + 1) * Nc))
    return T.conv_1x1(prod, p["pi.w"], p["pi.wb"])


def physics_term(u, net):
    if net.physics is None:
        return None
    return T.conv(u, net.physics)


def micro_step(u, net, step_index=0, use_physics=True):
    """Forward Euler: ``u + dt * (pi_block(u) + physics(u))``."""
    u = T.as_tensor(u)
    f = pi_block(u, net)
    ph = physics_term(u, net) if use_physics else None
    if ph is not None:
        f = T.add(f, ph)
    out = T.add(u, T.scalar_mul(f, net.dt))
    if not np.all(np.isfinite(out.values)):
        raise MicroDivergence(step_index)
    return out


def micro_rollout(u0, net, k_steps, use_physics=True):
    """Autoregressive ``k_steps`` micro steps; returns ``[u1, ..., uk]``."""
    if k_steps < 1:
        raise ValueError("k_steps must be >= 1")
    out = []
    u = T.as_tensor(u0)
    for j in range(k_steps):
        u = micro_step(u, net, step_index=j, use_physics=use_physics)
        out.append(u)
    return out
