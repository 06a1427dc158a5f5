"""Reference integrators, initial conditions and burst sampling.

Four periodic cases are supported: ``kdv`` (1D, flux-form central scheme),
``burgers2d``, ``fn2d`` (FitzHugh-Nagumo) and ``gs2d`` (Gray-Scott), all
method-of-lines with RK4 substeps. Randomness comes from a counter-based
SplitMix64 stream so every trajectory is bit-reproducible from its seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Burst, MultiScaleTrajectory
from .physics import apply_stencil, d1_stencil, d3x_stencil, laplacian_stencil

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


class SimulationDiverged(FloatingPointError):
    def __init__(self, step, msg=None):
        super().__init__(msg or f"non-finite state at substep {step}")
        self.step = step


class SplitMix64:
    """SplitMix64 generator; output ``i`` depends only on seed and ``i``."""

    def __init__(self, seed):
        self.state = int(seed) & _MASK

    def next_u64(self, n=1):
        ctr = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + ctr * _GAMMA
        self.state = (self.state + n * int(_GAMMA)) & _MASK
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n=1, low=0.0, high=1.0):
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return low + (high - low) * u

    def integers(self, low, high, n=1):
        """Uniform integers in ``[low, high)``."""
        return (low + np.floor(self.uniform(n) * (high - low))).astype(np.int64)

    def normal(self, n=1):
        """Standard normals by Box-Muller, both outputs of each pair used."""
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n]

    def split(self):
        return SplitMix64(int(self.next_u64(1)[0]))


# ----------------------------------------------------------------------------- cases

_PARAMS = {
    "kdv": {},
    "burgers2d": {"nu": 0.005},
    "fn2d": {"alpha": 0.01, "beta": 0.25, "mu_u": 1.0, "mu_v": 100.0},
    "gs2d": {"D_u": 2.0e-5, "D_v": 5.0e-6, "F_feed": 0.04, "k_kill": 0.06},
}
_FIELDS = {"kdv": ["u"], "burgers2d": ["u", "v"], "fn2d": ["u", "v"], "gs2d": ["u", "v"]}
# grid spacing at full scale; desk grids shrink L to keep dx
_DX = {"kdv": 64.0 / 256, "burgers2d": 1.0 / 128, "fn2d": 128.0 / 128, "gs2d": 1.0 / 128}
_DT_MICRO = {"kdv": 0.01, "burgers2d": 0.001, "fn2d": 0.002, "gs2d": 0.5}
_SUBSTEPS = {"kdv": 100, "burgers2d": 10, "fn2d": 10, "gs2d": 50}
_FULL_GRID = {"kdv": 256, "burgers2d": 128, "fn2d": 128, "gs2d": 128}
CASES = tuple(_PARAMS)


@dataclass(frozen=True)
class PdeCase:
    name: str
    n: int
    domain_length: float
    params: dict = field(default_factory=dict)
    dt_micro: float = 0.01
    substeps: int = 10
    gs_seeds: int = 3
    gs_square: int = 10
    warmup_macro_steps: int = 0

    @property
    def n_fields(self):
        return len(_FIELDS[self.name])

    @property
    def field_names(self):
        return list(_FIELDS[self.name])

    @property
    def ndim(self):
        return 1 if self.name == "kdv" else 2

    @property
    def grid(self):
        return (self.n,) * self.ndim

    @property
    def dx(self):
        return self.domain_length / self.n

    @property
    def dt_sub(self):
        return self.dt_micro / self.substeps

    @property
    def shape(self):
        return (self.n_fields,) + self.grid


def make_case(name, n=None, dt_micro=None, **overrides):
    """Build a case with the default constants; ``n`` defaults to full scale."""
    if name not in _PARAMS:
        raise ValueError(f"unknown case {name!r}; choose from {CASES}")
    n = _FULL_GRID[name] if n is None else int(n)
    params = dict(_PARAMS[name])
    for key in list(overrides):
        if key in params:
            params[key] = float(overrides.pop(key))
    case = PdeCase(
        name=name, n=n, domain_length=_DX[name] * n, params=params,
        dt_micro=_DT_MICRO[name] if dt_micro is None else float(dt_micro),
        substeps=_SUBSTEPS[name],
        warmup_macro_steps=200 if name == "fn2d" else 0,
    )
    case = replace(case, **overrides)
    if set(case.params) != set(_PARAMS[name]):
        raise ValueError(f"{name}: params must be exactly {sorted(_PARAMS[name])}")
    if case.dx <= 0:
        raise ValueError("dx must be positive")
    return case


# ----------------------------------------------------------------------------- initial conditions


def _smooth_gaussian_field(rng, n, L, kmax=4):
    """Real Gaussian random field from modes with |kx|, |ky| <= kmax, unit std."""
    x = np.arange(n) * (L / n)
    X, Y = np.meshgrid(x, x, indexing="xy")
    f = np.zeros((n, n))
    for ky in range(-kmax, kmax + 1):
        for kx in range(0, kmax + 1):
            if kx == 0 and ky <= 0:
                continue
            a, b = rng.normal(2)
            ph = 2.0 * np.pi * (kx * X + ky * Y) / L
            f += a * np.cos(ph) + b * np.sin(ph)
    return f / f.std()


def generate_ic(case, seed):
    """Deterministic initial field of shape ``case.shape`` for ``seed``."""
    rng = SplitMix64(seed)
    n, L = case.n, case.domain_length
    if case.name == "kdv":
        x = np.arange(n) * case.dx
        amp = rng.uniform(4, -1.0, 1.0)
        wav = rng.integers(1, 9, 4)
        phase = rng.uniform(4, 0.0, 2.0 * np.pi)
        u = np.zeros(n)
        for a, kw, p in zip(amp, wav, phase):
            u += a * np.sin(2.0 * np.pi * kw * x / L + p)
        return u[None, :]
    if case.name == "burgers2d":
        # same physical wavelengths as the full 128^2 domain (4 modes per unit length)
        kmax = max(1, round(4 * L))
        return 0.5 * np.stack([_smooth_gaussian_field(rng, n, L, kmax), _smooth_gaussian_field(rng, n, L, kmax)])
    if case.name == "fn2d":
        return 0.5 * rng.normal(2 * n * n).reshape(2, n, n)
    if case.name == "gs2d":
        u = np.ones((n, n))
        v = np.zeros((n, n))
        s = case.gs_square
        for _ in range(case.gs_seeds):
            i, j = rng.integers(0, n, 2)
            rows = (np.arange(i, i + s) % n)[:, None]
            cols = (np.arange(j, j + s) % n)[None, :]
            u[rows, cols] = 0.5
            v[rows, cols] = 0.25
        noise = rng.uniform(2 * n * n, -0.01, 0.01).reshape(2, n, n)
        return np.stack([u, v]) + noise
    raise ValueError(f"unknown case {case.name!r}")


# ----------------------------------------------------------------------------- right-hand sides


def _stencils(case):
    h = case.dx
    if case.name == "kdv":
        return {"d3x": d3x_stencil(h)}
    st = {"lap": laplacian_stencil(h, ndim=2)}
    if case.name == "burgers2d":
        st["dx"] = d1_stencil(h, axis=1, ndim=2)
        st["dy"] = d1_stencil(h, axis=0, ndim=2)
    return st


def rhs(case, u, stencils=None):
    """Time derivative of the state ``u`` (shape ``case.shape``)."""
    st = stencils or _stencils(case)
    p = case.params
    if case.name == "kdv":
        # flux form: u_t = -d/dx(u^2/2) - u_xxx, face flux = mean of cell fluxes
        f = 0.5 * u * u
        face = 0.5 * (f + np.roll(f, -1, axis=-1))
        return -(face - np.roll(face, 1, axis=-1)) / case.dx - apply_stencil(u, st["d3x"])
    lap = apply_stencil(u, st["lap"])
    a, b = u[0], u[1]
    out = np.empty_like(u)
    if case.name == "burgers2d":
        gx = apply_stencil(u, st["dx"])
        gy = apply_stencil(u, st["dy"])
        out[0] = -a * gx[0] - b * gy[0] + p["nu"] * lap[0]
        out[1] = -a * gx[1] - b * gy[1] + p["nu"] * lap[1]
    elif case.name == "fn2d":
        out[0] = p["mu_u"] * lap[0] + a - a ** 3 - b + p["alpha"]
        out[1] = p["mu_v"] * lap[1] + (a - b) * p["beta"]
    elif case.name == "gs2d":
        abb = a * b * b
        out[0] = p["D_u"] * lap[0] - abb + p["F_feed"] * (1.0 - a)
        out[1] = p["D_v"] * lap[1] + abb - (p["F_feed"] + p["k_kill"]) * b
    else:
        raise ValueError(f"unknown case {case.name!r}")
    return out


def _rk4(case, u, h, st):
    k1 = rhs(case, u, st)
    k2 = rhs(case, u + 0.5 * h * k1, st)
    k3 = rhs(case, u + 0.5 * h * k2, st)
    k4 = rhs(case, u + h * k3, st)
    return u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_reference(case, state, dt=None, step_index=0):
    """Advance one substep (``case.dt_sub`` unless ``dt`` is given) with RK4."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape != case.shape:
        raise ValueError(f"state shape {state.shape} != case shape {case.shape}")
    out = _rk4(case, state, case.dt_sub if dt is None else dt, _stencils(case))
    if not np.all(np.isfinite(out)):
        raise SimulationDiverged(step_index)
    return out


def integrate(case, u, n_substeps, dt=None, start_index=0):
    """Run ``n_substeps`` RK4 substeps, checking finiteness at the end."""
    st = _stencils(case)
    h = case.dt_sub if dt is None else dt
    for _ in range(n_substeps):
        u = _rk4(case, u, h, st)
    if not np.all(np.isfinite(u)):
        raise SimulationDiverged(start_index + n_substeps)
    return u


# ----------------------------------------------------------------------------- bursts


@dataclass(frozen=True)
class BurstSpec:
    n_bursts: int = 8
    burst_len: int | None = None  # defaults to 2k+1
    start_indices: tuple | None = None  # macro indices; sampled when None

    def length(self, k):
        return 2 * k + 1 if self.burst_len is None else self.burst_len


def _burst_span(burst_len, k):
    """Macro intervals touched by a burst starting on a macro frame."""
    return math.ceil((burst_len - 1) / k)


def sample_bursts(rng, n_macro, k, n_bursts, burst_len, max_tries=10000):
    """Draw non-overlapping burst starts (macro indices), sorted."""
    if burst_len < k + 1:
        raise ValueError(f"burst_len {burst_len} must be >= k+1 = {k + 1}")
    span = _burst_span(burst_len, k)
    last = n_macro - 1 - span
    if n_bursts and last < 0:
        raise ValueError("trajectory too short for a single burst")
    chosen = []
    tries = 0
    while len(chosen) < n_bursts:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"could not place {n_bursts} non-overlapping bursts in {n_macro} frames")
        s = int(rng.integers(0, last + 1, 1)[0])
        # micro ranges [s*k, s*k + burst_len) must be disjoint
        if all(abs(s - c) * k >= burst_len for c in chosen):
            chosen.append(s)
    return sorted(chosen)


# ----------------------------------------------------------------------------- simulation


def _n_intervals(t_end, dt_macro):
    q = t_end / dt_macro
    n = int(round(q))
    if n < 1 or abs(q - n) > 1e-9 * max(1.0, q):
        raise ValueError(f"t_end={t_end} is not a positive integer multiple of dt_macro={dt_macro}")
    return n


def simulate(case, seed, t_end, dt_micro=None, k=15, bursts=None):
    """Integrate one trajectory and sample macro frames plus micro bursts.

    Macro frames are taken every ``k`` micro steps from ``t=0`` to ``t_end``
    inclusive; bursts are ``burst_len`` consecutive micro frames starting on
    a macro frame. Both are copies of the same fine-run states, so a burst
    frame landing on a macro time equals that macro frame bit for bit.
    """
    if dt_micro is not None and dt_micro != case.dt_micro:
        case = replace(case, dt_micro=float(dt_micro))
    k = int(k)
    if k < 1:
        raise ValueError("k must be >= 1")
    n_int = _n_intervals(t_end, k * case.dt_micro)
    n_macro = n_int + 1
    root = SplitMix64(seed)
    ic_rng, burst_rng = root.split(), root.split()
    spec = bursts if bursts is not None else BurstSpec(n_bursts=0)
    blen = spec.length(k)
    if spec.start_indices is not None:
        starts = sorted(int(s) for s in spec.start_indices)
        for s in starts:
            if s < 0 or s * k + blen - 1 > n_int * k:
                raise ValueError(f"burst at macro index {s} (len {blen}) falls outside the horizon")
    else:
        starts = sample_bursts(burst_rng, n_macro, k, spec.n_bursts, blen) if spec.n_bursts else []

    u = generate_ic(case, int(ic_rng.next_u64(1)[0]))
    sub = case.substeps
    if case.warmup_macro_steps:
        u = integrate(case, u, case.warmup_macro_steps * k * sub, start_index=0)
    offset = case.warmup_macro_steps * k * sub

    wanted = {}
    for s in starts:
        for j in range(blen):
            wanted.setdefault(s * k + j, []).append((s, j))
    macro = np.empty((n_macro,) + case.shape)
    burst_frames = {s: np.empty((blen,) + case.shape) for s in starts}
    total_micro = n_int * k
    for i in range(total_micro + 1):
        if i % k == 0:
            macro[i // k] = u
        for s, j in wanted.get(i, ()):
            burst_frames[s][j] = u
        if i < total_micro:
            u = integrate(case, u, sub, start_index=offset + i * sub)
    return MultiScaleTrajectory(
        case=case.name, field_names=case.field_names, domain_length=case.domain_length,
        dx=case.dx, dt_micro=case.dt_micro, k=k, macro=macro,
        bursts=[Burst(s, burst_frames[s]) for s in starts], seed=int(seed), params=dict(case.params),
    )
