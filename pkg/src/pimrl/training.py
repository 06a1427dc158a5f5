"""Two-phase optimization: micro pretraining on bursts, then joint rollout training.

Both phases use Adam with global-norm clipping and a step-decayed learning
rate, and keep the parameters with the lowest validation loss. A sample whose
forward pass diverges or whose gradient is non-finite is skipped and counted.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics
from . import tensor as T
from .data import read_pmck, write_pmck
from .micro_net import MicroDivergence, micro_rollout
from .scheduler import (RolloutDiverged, emission_indices, evaluation_axis,
                        model_from_spec, rollout)
from .solvers import SplitMix64


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "joint"
    epochs: int = 1000
    batches: int = 1  # optimizer steps per epoch
    batch_size: int = 1  # samples whose gradients are averaged per step
    rollout: int = 0  # pretrain: micro steps per sample (0 = whole burst); joint: max cycles
    lr0: float | None = None
    step_size: int = 200
    gamma: float = 0.98
    clip_norm: float = 1.0
    seed: int = 0
    val_every: int = 10
    no_pretrain: bool = False
    no_connect: bool = False
    no_physics_conv: bool = False

    def __post_init__(self):
        if self.phase not in ("pretrain", "joint"):
            raise ValueError(f"phase must be pretrain or joint, got {self.phase!r}")
        if self.epochs < 0 or self.batches < 1 or self.batch_size < 1:
            raise ValueError("epochs >= 0, batches >= 1 and batch_size >= 1 are required")
        if self.rollout < 0:
            raise ValueError("rollout length must be >= 0")
        if self.lr0 is not None and self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")

    @property
    def learning_rate(self):
        if self.lr0 is not None:
            return self.lr0
        return 1e-3 if self.phase == "pretrain" else 5e-3

    @property
    def max_cycles(self):
        return self.rollout or 4


@dataclass
class Checkpoint:
    weights: dict
    model_spec: dict
    adam: dict  # {"m": {...}, "v": {...}, "t": int}
    epoch: int
    config: dict
    best_val_loss: float
    history: dict = field(default_factory=dict)

    def to_arrays(self):
        arrays = {f"w/{n}": v for n, v in self.weights.items()}
        arrays.update({f"m/{n}": v for n, v in self.adam.get("m", {}).items()})
        arrays.update({f"v/{n}": v for n, v in self.adam.get("v", {}).items()})
        meta = {"model_spec": self.model_spec, "adam_t": int(self.adam.get("t", 0)),
                "epoch": int(self.epoch), "config": self.config,
                "best_val_loss": _json_float(self.best_val_loss), "history": self.history}
        return arrays, meta

    @classmethod
    def from_arrays(cls, arrays, meta):
        group = {"w": {}, "m": {}, "v": {}}
        for key, v in arrays.items():
            g, _, name = key.partition("/")
            group[g][name] = v
        return cls(weights=group["w"], model_spec=meta["model_spec"],
                   adam={"m": group["m"], "v": group["v"], "t": meta["adam_t"]},
                   epoch=meta["epoch"], config=meta["config"],
                   best_val_loss=float(meta["best_val_loss"]), history=meta.get("history", {}))

    def model(self):
        m = model_from_spec(self.model_spec)
        m.load_state_dict(self.weights)
        return m


def _json_float(x):
    return float(x) if np.isfinite(x) else 1e308


def save_checkpoint(ckpt, path):
    arrays, meta = ckpt.to_arrays()
    write_pmck(path, arrays, meta)


def load_checkpoint(path):
    return Checkpoint.from_arrays(*read_pmck(path))


def mse_loss(pred, target):
    """Mean squared error over every frame and element of two aligned sequences."""
    if len(pred) != len(target):
        raise ValueError(f"sequence lengths differ: {len(pred)} vs {len(target)}")
    if not pred:
        raise ValueError("empty sequences")
    total = None
    for p, t in zip(pred, target):
        p = T.as_tensor(p)
        if p.shape != np.shape(t.values if isinstance(t, T.DiffTensor) else t):
            raise T.ShapeError(f"frame shapes differ: {p.shape} vs {np.shape(t)}")
        term = T.mse(p, t)
        total = term if total is None else T.add(total, term)
    return T.scalar_mul(total, 1.0 / len(pred))


# ----------------------------------------------------------------------------- shared loop


class _Optim:
    def __init__(self, params, cfg, resume=None):
        self.names = list(params)
        self.params = [params[n] for n in self.names]
        self.opt = T.Adam(self.params, clip_norm=cfg.clip_norm)
        if resume and resume.get("m"):
            st = self.opt.state
            st.m = [np.array(resume["m"][n]) for n in self.names]
            st.v = [np.array(resume["v"][n]) for n in self.names]
            st.t = int(resume["t"])
        self.schedule = T.LrSchedule(cfg.learning_rate, cfg.step_size, cfg.gamma)

    def state(self):
        st = self.opt.state
        return {"m": {n: a.copy() for n, a in zip(self.names, st.m)},
                "v": {n: a.copy() for n, a in zip(self.names, st.v)}, "t": int(st.t)}


def _run(model, params, cfg, sample_loss, val_loss, train_spec):
    """Generic epoch loop; ``sample_loss(rng, epoch)`` builds one sample's loss graph."""
    opt = _Optim(params, cfg)
    rng = SplitMix64(cfg.seed)
    frozen = None if model.micro.physics is None else model.micro.physics.values.copy()
    best = val_loss()
    best_w = model.state_dict()
    history = {"train": [], "val": [[0, _json_float(best)]], "skipped": 0}
    for epoch in range(cfg.epochs):
        lr = T.lr_at(opt.schedule, epoch)
        ep_losses = []
        for _ in range(cfg.batches):
            opt.opt.zero_grad()
            used = 0
            for _ in range(cfg.batch_size):
                try:
                    loss = sample_loss(rng, epoch)
                    if not np.isfinite(loss.values):
                        raise FloatingPointError("non-finite loss")
                    T.backward(T.scalar_mul(loss, 1.0 / cfg.batch_size))
                except (RolloutDiverged, MicroDivergence, FloatingPointError):
                    history["skipped"] += 1
                    continue
                used += 1
                ep_losses.append(loss.item())
            if not used:
                continue
            try:
                opt.opt.step(lr)
            except T.NonFiniteGradientError:
                history["skipped"] += 1
        history["train"].append(float(np.mean(ep_losses)) if ep_losses else None)
        if (epoch + 1) % cfg.val_every == 0 or epoch + 1 == cfg.epochs:
            v = val_loss()
            history["val"].append([epoch + 1, _json_float(v)])
            if v < best:
                best, best_w = v, model.state_dict()
    if frozen is not None and not np.array_equal(frozen, model.micro.physics.values):
        raise AssertionError("physics kernel changed during training")
    model.load_state_dict(best_w)
    return Checkpoint(weights=best_w, model_spec=dict(model.spec), adam=opt.state(),
                      epoch=cfg.epochs, config={**asdict(cfg), **train_spec},
                      best_val_loss=best, history=history)


# ----------------------------------------------------------------------------- pretraining


def _bursts(dataset):
    return [b for traj in dataset for b in traj.bursts]


def _burst_loss(model, frames, start, n_steps, cfg):
    preds = micro_rollout(frames[start], model.micro, n_steps, use_physics=not cfg.no_physics_conv)
    return mse_loss(preds, list(frames[start + 1:start + 1 + n_steps]))


def pretrain_micro(dataset, cfg, model, val_dataset=()):
    """Fit the micro module to burst frames; macro weights are not touched."""
    bursts = _bursts(dataset)
    if not bursts:
        raise ValueError("pretraining needs trajectories with micro bursts")
    val_bursts = _bursts(val_dataset)

    def n_steps(b):
        full = b.frames.shape[0] - 1
        return full if cfg.rollout == 0 else min(cfg.rollout, full)

    def sample(rng, epoch):
        b = bursts[int(rng.integers(0, len(bursts), 1)[0])]
        n = n_steps(b)
        start = int(rng.integers(0, b.frames.shape[0] - n, 1)[0])
        return _burst_loss(model, b.frames, start, n, cfg)

    def val():
        src = val_bursts or bursts
        with T.no_grad():
            try:
                return float(np.mean([_burst_loss(model, b.frames, 0, b.frames.shape[0] - 1, cfg).item()
                                      for b in src]))
            except MicroDivergence:
                return float("inf")

    return _run(model, model.parameters("micro"), replace(cfg, phase="pretrain"), sample, val,
                {"n_train_bursts": len(bursts), "n_val_bursts": len(val_bursts)})


# ----------------------------------------------------------------------------- joint


def curriculum_cycles(epoch, epochs, max_cycles=4):
    """1 cycle, doubling after every third of the epochs, capped at ``max_cycles``."""
    stage = min(2, 3 * epoch // max(epochs, 1))
    return min(max_cycles, 2 ** stage)


def window_loss(model, traj_macro, start, n_frames, sched):
    """Loss of a rollout from ``traj_macro[start]`` against ground truth at the emission times."""
    rec = rollout(traj_macro[start], n_frames, model, sched)
    idx = [start + i for i in rec.indices]
    return mse_loss(rec.frames, [traj_macro[i] for i in idx])


def _frames_per_cycle(sched):
    if sched.micro_only or sched.macro_only:
        return sched.n_corrected + sched.n_free
    return len(sched.cycle_offsets()[0])


def _span(sched, n_frames):
    if sched.micro_only or sched.macro_only:
        return n_frames
    return emission_indices(sched, n_frames)[-1]


def train_joint(dataset, sched, cfg, model, val_dataset=()):
    """End-to-end training on macro windows through the multi-scale rollout."""
    cfg = replace(cfg, phase="joint")
    sched = replace(sched, no_connect=cfg.no_connect or sched.no_connect,
                    no_physics_conv=cfg.no_physics_conv or sched.no_physics_conv)
    per_cycle = _frames_per_cycle(sched)
    n_max = per_cycle * cfg.max_cycles
    lengths = [t.macro.shape[0] for t in dataset]
    if not dataset or max(lengths) <= _span(sched, per_cycle):
        raise ValueError("training trajectories are shorter than one cycle's emissions")

    def sample(rng, epoch):
        n = per_cycle * curriculum_cycles(epoch, cfg.epochs, cfg.max_cycles)
        span = _span(sched, n)
        usable = [i for i, L in enumerate(lengths) if L > span]
        if not usable:
            n, span = per_cycle, _span(sched, per_cycle)
            usable = [i for i, L in enumerate(lengths) if L > span]
        traj = dataset[usable[int(rng.integers(0, len(usable), 1)[0])]]
        start = int(rng.integers(0, traj.macro.shape[0] - span, 1)[0])
        return window_loss(model, traj.macro, start, n, sched)

    val_src = list(val_dataset) or list(dataset)

    def val():
        losses = []
        with T.no_grad():
            for traj in val_src:
                n = n_max
                while n > per_cycle and _span(sched, n) >= traj.macro.shape[0]:
                    n -= per_cycle
                if _span(sched, n) >= traj.macro.shape[0]:
                    continue
                try:
                    losses.append(window_loss(model, traj.macro, 0, n, sched).item())
                except RolloutDiverged:
                    return float("inf")
        return float(np.mean(losses)) if losses else float("inf")

    names = model.parameters("all")
    if sched.macro_only:
        names = model.parameters("macro")
    elif sched.micro_only:
        names = model.parameters("micro")
    return _run(model, names, cfg, sample, val, {"schedule": asdict(sched)})


# ----------------------------------------------------------------------------- evaluation


def predict(model, u0, sched, n_truth_frames):
    """Frames on the shared evaluation axis (PIMRL emission indices) for any mode."""
    axis = evaluation_axis(replace(sched, micro_only=False, macro_only=False), n_truth_frames)
    if not axis:
        raise ValueError("trajectory too short for one emission")
    with T.no_grad():
        if sched.micro_only or sched.macro_only:
            rec = rollout(u0, axis[-1], model, sched)
            frames = [rec.frames[i - 1].values for i in axis]
        else:
            rec = rollout(u0, len(axis), model, sched)
            frames = [f.values for f in rec.frames]
    return axis, np.stack(frames)


def evaluate(test_dataset, model, sched, horizon=None):
    """Per-trajectory and aggregate metrics; horizon caps the truth frames used."""
    per = []
    for traj in test_dataset:
        n = traj.macro.shape[0] if horizon is None else min(horizon + 1, traj.macro.shape[0])
        axis, pred = predict(model, traj.macro[0], sched, n)
        rep = metrics.report(pred, traj.macro[axis], sched.dt_macro,
                             times=np.asarray(axis) * sched.dt_macro)
        rep.extra = {"seed": traj.seed, "case": traj.case}
        per.append(rep.to_dict())
    agg = {
        "rmse": float(np.mean([r["rmse"] for r in per])) if per else None,
        "mae": float(np.mean([r["mae"] for r in per])) if per else None,
        "hct": float(np.mean([r["hct"] for r in per])) if per else None,
    }
    return {"mode": sched.mode, "schedule": asdict(sched), "aggregate": agg, "trajectories": per}


def write_report(report, path):
    try:
        with open(path, "w") as fh:
            fh.write(metrics.dumps_report(report))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_report(path):
    with open(path) as fh:
        return json.load(fh)
