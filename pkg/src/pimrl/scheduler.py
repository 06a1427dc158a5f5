"""Multi-scale rollout: micro k-step loops feeding macro steps, then macro-only steps.

Times are tracked as integer multiples of the macro interval ``dt_macro = k * dt_micro``.
A combined step (k micro steps, then one macro step) advances two macro
intervals; a free macro step advances one. Only macro outputs are emitted.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .macro_net import MacroDivergence, MacroNet, macro_step
from .micro_net import MicroDivergence, MicroNet, known_terms, micro_rollout

MACRO_AFTER_MICRO = "macro_after_micro"
MACRO_FREE = "macro_free"
MICRO = "micro"


class RolloutDiverged(FloatingPointError):
    def __init__(self, phase, cycle, frame, cause):
        super().__init__(f"{phase} diverged in cycle {cycle} before frame {frame}: {cause}")
        self.phase, self.cycle, self.frame = phase, cycle, frame


@dataclass(frozen=True)
class ScheduleConfig:
    k: int
    dt_micro: float
    n_corrected: int = 2
    n_free: int = 4
    no_connect: bool = False
    no_physics_conv: bool = False
    micro_only: bool = False
    macro_only: bool = False
    reset_state_each_cycle: bool = False  # default keeps the ConvLSTM state for the whole rollout

    def __post_init__(self):
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise ValueError(f"k must be an integer >= 1, got {self.k!r}")
        if not self.dt_micro > 0:
            raise ValueError("dt_micro must be positive")
        if self.n_corrected < 0 or self.n_free < 0 or self.n_corrected + self.n_free == 0:
            raise ValueError("n_corrected, n_free must be >= 0 and not both zero")
        if self.micro_only and self.macro_only:
            raise ValueError("micro_only and macro_only are exclusive")

    @property
    def dt_macro(self):
        return self.k * self.dt_micro

    @property
    def zeta(self):
        return 1.0 / self.k

    @property
    def mode(self):
        if self.micro_only:
            return "micro-only"
        if self.macro_only:
            return "macro-only"
        return "pimrl"

    def cycle_offsets(self):
        """Emission offsets (in macro intervals) within one cycle, and its span."""
        offs = [2 * (i + 1) for i in range(self.n_corrected)]
        base = 2 * self.n_corrected
        offs += [base + i + 1 for i in range(self.n_free)]
        return offs, base + self.n_free


@dataclass
class RolloutRecord:
    indices: list = field(default_factory=list)  # emission time / dt_macro
    frames: list = field(default_factory=list)  # DiffTensor per emission
    provenance: list = field(default_factory=list)
    dt_macro: float = 1.0

    @property
    def times(self):
        return np.asarray(self.indices, dtype=np.float64) * self.dt_macro

    def emit(self, index, frame, kind):
        if self.indices and index <= self.indices[-1]:
            raise AssertionError("emission indices must increase")
        self.indices.append(int(index))
        self.frames.append(frame)
        self.provenance.append(kind)

    def truncate(self, n):
        self.indices, self.frames, self.provenance = self.indices[:n], self.frames[:n], self.provenance[:n]
        return self

    def arrays(self):
        return np.stack([f.values for f in self.frames])


class PimrlModel:
    """Micro and macro modules plus the metadata needed to rebuild them."""

    def __init__(self, micro, macro, spec=None):
        self.micro, self.macro = micro, macro
        self.spec = dict(spec or {})

    def parameters(self, which="all"):
        out = {}
        if which in ("all", "micro"):
            out.update({f"micro.{n}": p for n, p in self.micro.params.items()})
        if which in ("all", "macro"):
            out.update({f"macro.{n}": p for n, p in self.macro.params.items()})
        return out

    def state_dict(self):
        sd = {n: p.values.copy() for n, p in self.parameters().items()}
        if self.micro.physics is not None:
            sd["frozen.physics"] = self.micro.physics.values.copy()
        return sd

    def load_state_dict(self, sd):
        params = self.parameters()
        missing = set(params) - set(sd)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)}")
        for n, p in params.items():
            if sd[n].shape != p.values.shape:
                raise T.ShapeError(f"{n}: checkpoint shape {sd[n].shape} != model {p.values.shape}")
            p.values = np.array(sd[n], dtype=np.float64)
        if "frozen.physics" in sd and self.micro.physics is not None:
            if not np.array_equal(sd["frozen.physics"], self.micro.physics.values):
                raise ValueError("checkpoint physics kernel differs from the case's known terms")


def build_model(case_name, ndim, n_fields, dx, params, dt_micro, physics=True, seed=0,
                n_layers=3, n_channels=16, micro_kernel=5, enc_channels=(16, 32)):
    terms = known_terms(case_name, dx, params, ndim) if physics else None
    micro = MicroNet(n_fields, ndim, dt_micro, terms, n_layers, n_channels, micro_kernel, seed=seed)
    macro = MacroNet(n_fields, ndim, enc_channels, seed=seed + 1)
    spec = {
        "case": case_name, "ndim": ndim, "n_fields": n_fields, "dx": dx, "params": dict(params),
        "dt_micro": dt_micro, "physics": bool(physics), "seed": seed, "n_layers": n_layers,
        "n_channels": n_channels, "micro_kernel": micro_kernel, "enc_channels": list(enc_channels),
    }
    return PimrlModel(micro, macro, spec)


def model_from_spec(spec):
    s = dict(spec)
    return build_model(s.pop("case"), s.pop("ndim"), s.pop("n_fields"), s.pop("dx"), s.pop("params"),
                       s.pop("dt_micro"), physics=s.pop("physics"), seed=s.pop("seed"),
                       enc_channels=tuple(s.pop("enc_channels")), **s)


def _micro(u, model, cfg, k):
    return micro_rollout(u, model.micro, k, use_physics=not cfg.no_physics_conv)


def combined_step(u, state, model, cfg):
    """k micro steps, then one macro step on the micro output (2 macro intervals)."""
    v = u if cfg.no_connect else _micro(u, model, cfg, cfg.k)[-1]
    return macro_step(v, state, model.macro)


def pimrl_cycle(u, state, model, cfg, start_index=0, record=None, limit=None, cycle=0):
    """One cycle: ``n_corrected`` combined steps, then ``n_free`` macro-only steps."""
    record = record if record is not None else RolloutRecord(dt_macro=cfg.dt_macro)
    idx = start_index
    plan = [(MACRO_AFTER_MICRO, 2)] * cfg.n_corrected + [(MACRO_FREE, 1)] * cfg.n_free
    for kind, adv in plan:
        if limit is not None and len(record.frames) >= limit:
            break
        try:
            if kind == MACRO_AFTER_MICRO:
                u, state = combined_step(u, state, model, cfg)
            else:
                u, state = macro_step(u, state, model.macro)
        except (MicroDivergence, MacroDivergence) as exc:
            raise RolloutDiverged(kind, cycle, len(record.frames), exc) from exc
        idx += adv
        record.emit(idx, u, kind)
    return record, u, state, idx


def rollout(u0, horizon_steps, model, cfg, state=None):
    """Emit exactly ``horizon_steps`` frames; the recurrent state persists throughout."""
    if horizon_steps < 1:
        raise ValueError("horizon_steps must be >= 1")
    u = T.as_tensor(u0)
    record = RolloutRecord(dt_macro=cfg.dt_macro)
    if cfg.micro_only:
        for i in range(horizon_steps):
            try:
                u = _micro(u, model, cfg, cfg.k)[-1]
            except MicroDivergence as exc:
                raise RolloutDiverged(MICRO, 0, i, exc) from exc
            record.emit(i + 1, u, MICRO)
        return record
    if state is None:
        state = model.macro.init_state(u.shape[1:])
    if cfg.macro_only:
        for i in range(horizon_steps):
            try:
                u, state = macro_step(u, state, model.macro)
            except MacroDivergence as exc:
                raise RolloutDiverged(MACRO_FREE, 0, i, exc) from exc
            record.emit(i + 1, u, MACRO_FREE)
        return record
    idx, cycle = 0, 0
    while len(record.frames) < horizon_steps:
        if cycle and cfg.reset_state_each_cycle:
            state = model.macro.init_state(u.shape[1:])
        record, u, state, idx = pimrl_cycle(u, state, model, cfg, idx, record, horizon_steps, cycle)
        cycle += 1
    return record


def emission_indices(cfg, horizon_steps):
    """Macro-interval indices of the first ``horizon_steps`` PIMRL emissions."""
    offs, span = cfg.cycle_offsets()
    out, base = [], 0
    while len(out) < horizon_steps:
        out.extend(base + o for o in offs)
        base += span
    return out[:horizon_steps]


def evaluation_axis(cfg, n_truth_frames):
    """PIMRL emission indices that fit inside a ground-truth sequence of ``n_truth_frames``.

    All rollout modes are scored on this shared axis so reports are comparable.
    """
    offs, span = cfg.cycle_offsets()
    out, base = [], 0
    while True:
        for o in offs:
            if base + o >= n_truth_frames:
                return out
            out.append(base + o)
        base += span
