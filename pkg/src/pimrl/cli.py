"""Command-line pipeline: generate, pretrain, train, eval, rollout, plot.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import metrics
from .data import FormatError, MultiScaleTrajectory, read_mstd, split_dataset, write_mstd
from .macro_net import MacroDivergence
from .micro_net import MicroDivergence
from .scheduler import RolloutDiverged, ScheduleConfig, build_model, rollout
from .solvers import CASES, BurstSpec, SimulationDiverged, make_case, simulate
from . import tensor as T
from .training import (TrainConfig, evaluate, load_checkpoint, pretrain_micro, save_checkpoint,
                       train_joint, write_report)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4

# every key a run config may carry, with its default
DEFAULTS = {
    "case": None, "grid": None, "tend": None, "seed_base": 0, "count": 1, "k": 15,
    "dt_micro": None, "bursts": 8, "burst_len": None,
    "n_corrected": 2, "n_free": 4, "mode": "pimrl",
    "epochs": None, "batches": 1, "batch_size": 1, "rollout": 0, "lr0": None,
    "step_size": 200, "gamma": 0.98, "seed": 0, "val_every": 10,
    "no_pretrain": False, "no_connect": False, "no_physics_conv": False, "reset_state_each_cycle": False,
    "train": 5, "val": 1, "test": 2, "horizon": None,
}
MODES = ("pimrl", "micro-only", "macro-only")


class ConfigError(ValueError):
    pass


def resolve_config(path, overrides):
    cfg = dict(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        unknown = sorted(set(doc) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg.update(doc)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if cfg["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    return cfg


def echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=1)


def _schedule(cfg, k, dt_micro):
    return ScheduleConfig(k=int(k), dt_micro=float(dt_micro), n_corrected=int(cfg["n_corrected"]),
                          n_free=int(cfg["n_free"]), no_connect=bool(cfg["no_connect"]),
                          no_physics_conv=bool(cfg["no_physics_conv"]),
                          micro_only=cfg["mode"] == "micro-only", macro_only=cfg["mode"] == "macro-only",
                          reset_state_each_cycle=bool(cfg["reset_state_each_cycle"]))


def _train_cfg(cfg, phase):
    epochs = cfg["epochs"] if cfg["epochs"] is not None else 1000
    return TrainConfig(phase=phase, epochs=int(epochs), batches=int(cfg["batches"]),
                       batch_size=int(cfg["batch_size"]), rollout=int(cfg["rollout"]), lr0=cfg["lr0"],
                       step_size=int(cfg["step_size"]), gamma=float(cfg["gamma"]), seed=int(cfg["seed"]),
                       val_every=int(cfg["val_every"]), no_pretrain=bool(cfg["no_pretrain"]),
                       no_connect=bool(cfg["no_connect"]), no_physics_conv=bool(cfg["no_physics_conv"]))


def _data_files(path):
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "*.mstd")))
    else:
        files = [path]
    if not files:
        raise OSError(f"no .mstd files under {path}")
    return files


def _load_split(cfg, data):
    files = _data_files(data)
    trajs = [read_mstd(f) for f in files]
    parts = split_dataset(list(range(len(trajs))), int(cfg["train"]), int(cfg["val"]), int(cfg["test"]),
                          seeds=[t.seed for t in trajs])
    return {name: [trajs[i] for i in idx] for name, idx in parts.items()}


def _model_for(traj, cfg):
    return build_model(traj.case, traj.macro.ndim - 2, traj.n_fields, traj.dx, traj.params, traj.dt_micro,
                       physics=not cfg["no_physics_conv"], seed=int(cfg["seed"]))


# ----------------------------------------------------------------------------- commands


def cmd_generate(cfg, args):
    if cfg["case"] not in CASES:
        raise ConfigError(f"unknown case {cfg['case']!r}; choose from {CASES}")
    if cfg["tend"] is None:
        raise ConfigError("--tend is required")
    case = make_case(cfg["case"], n=cfg["grid"], dt_micro=cfg["dt_micro"])
    spec = BurstSpec(n_bursts=int(cfg["bursts"]), burst_len=cfg["burst_len"])
    echo_config(cfg, args.out_dir)
    for i in range(int(cfg["count"])):
        seed = int(cfg["seed_base"]) + i
        traj = simulate(case, seed, float(cfg["tend"]), k=int(cfg["k"]), bursts=spec)
        write_mstd(traj, os.path.join(args.out_dir, f"{case.name}_seed{seed:05d}.mstd"))
    return EXIT_OK


def cmd_pretrain(cfg, args):
    split = _load_split(cfg, args.data)
    model = _model_for(split["train"][0], cfg)
    echo_config(cfg, args.out_dir)
    ckpt = pretrain_micro(split["train"], _train_cfg(cfg, "pretrain"), model, split["val"])
    save_checkpoint(ckpt, os.path.join(args.out_dir, "micro.pmck"))
    return EXIT_OK


def cmd_train(cfg, args):
    split = _load_split(cfg, args.data)
    t0 = split["train"][0]
    model = _model_for(t0, cfg)
    if args.micro_ckpt and not cfg["no_pretrain"]:
        pre = load_checkpoint(args.micro_ckpt)
        model.load_state_dict({**model.state_dict(), **{n: v for n, v in pre.weights.items()
                                                       if n.startswith("micro.")}})
    elif not cfg["no_pretrain"] and cfg["mode"] != "macro-only":
        raise ConfigError("train needs --micro-ckpt unless --no-pretrain is set")
    echo_config(cfg, args.out_dir)
    ckpt = train_joint(split["train"], _schedule(cfg, t0.k, t0.dt_micro), _train_cfg(cfg, "joint"),
                       model, split["val"])
    save_checkpoint(ckpt, os.path.join(args.out_dir, "model.pmck"))
    return EXIT_OK


def _truth_frames(pred, truth):
    n = min(pred.macro.shape[0], truth.macro.shape[0])
    return pred.macro[:n], truth.macro[:n]


def cmd_eval(cfg, args):
    echo_config(cfg, os.path.dirname(os.path.abspath(args.out)))
    if args.pred:
        pred, truth = read_mstd(args.pred), read_mstd(args.truth)
        p, t = _truth_frames(pred, truth)
        rep = metrics.report(p[1:], t[1:], truth.dt_macro,
                             times=np.arange(1, p.shape[0]) * truth.dt_macro)
        write_report({"mode": "file", "aggregate": {"rmse": rep.rmse, "mae": rep.mae, "hct": rep.hct},
                      "trajectories": [rep.to_dict()]}, args.out)
        return EXIT_OK
    if not args.ckpt:
        raise ConfigError("eval needs --ckpt or --pred")
    model = load_checkpoint(args.ckpt).model()
    tests = [read_mstd(f) for f in _data_files(args.data)]
    t0 = tests[0]
    rep = evaluate(tests, model, _schedule(cfg, t0.k, t0.dt_micro), cfg["horizon"])
    write_report(rep, args.out)
    return EXIT_OK


def cmd_rollout(cfg, args):
    model = load_checkpoint(args.ckpt).model()
    ic = read_mstd(args.ic)
    if cfg["horizon"] is None:
        raise ConfigError("--horizon is required")
    sched = _schedule(cfg, ic.k, ic.dt_micro)
    with T.no_grad():
        rec = rollout(ic.macro[0], int(cfg["horizon"]), model, sched)
    frames = np.concatenate([ic.macro[:1], rec.arrays()])
    out = MultiScaleTrajectory(case=ic.case, field_names=ic.field_names, domain_length=ic.domain_length,
                               dx=ic.dx, dt_micro=ic.dt_micro, k=ic.k, macro=frames, seed=ic.seed,
                               params=ic.params)
    echo_config(cfg, os.path.dirname(os.path.abspath(args.out)))
    write_mstd(out, args.out)
    with open(args.out + ".times.json", "w") as fh:
        json.dump({"indices": [0] + rec.indices, "provenance": ["initial"] + rec.provenance}, fh)
    return EXIT_OK


def write_pgm(path, field2d):
    """8-bit binary PGM; values min-max mapped to 0..255 (constant field -> 0)."""
    a = np.atleast_2d(np.asarray(field2d, dtype=np.float64))
    lo, hi = float(a.min()), float(a.max())
    scaled = np.zeros(a.shape) if hi == lo else (a - lo) / (hi - lo) * 255.0
    img = np.rint(scaled).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _indices(path, n):
    side = path + ".times.json"
    if os.path.exists(side):
        with open(side) as fh:
            return json.load(fh)["indices"]
    return list(range(n))


def cmd_plot(cfg, args):
    traj = read_mstd(args.traj)
    os.makedirs(args.out, exist_ok=True)
    if args.frame is not None:
        if not 0 <= args.frame < traj.n_macro_frames:
            raise ConfigError(f"frame {args.frame} outside 0..{traj.n_macro_frames - 1}")
        for c, name in enumerate(traj.field_names):
            write_pgm(os.path.join(args.out, f"frame{args.frame:05d}_{name}.pgm"), traj.macro[args.frame, c])
    if args.error_curve:
        if not args.truth:
            raise ConfigError("--error-curve needs --truth")
        truth = read_mstd(args.truth)
        idx = _indices(args.traj, traj.n_macro_frames)
        if max(idx) >= truth.n_macro_frames:
            raise ConfigError("trajectory extends beyond the truth horizon")
        with open(os.path.join(args.out, "error_curve.csv"), "w") as fh:
            fh.write("t,rmse,mae,pcc\n")
            for j, i in enumerate(idx):
                p, t = traj.macro[j], truth.macro[i]
                fh.write(f"{i * truth.dt_macro!r},{metrics.rmse(p, t)!r},{metrics.mae(p, t)!r},"
                         f"{metrics.pcc(p, t)!r}\n")
    return EXIT_OK


# ----------------------------------------------------------------------------- parser


def build_parser():
    ap = argparse.ArgumentParser(prog="pimrl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config; flags override its keys")
        return p

    def sched_flags(p):
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--n-corrected", type=int)
        p.add_argument("--n-free", type=int)
        p.add_argument("--no-connect", action="store_true", default=None)
        p.add_argument("--no-physics-conv", action="store_true", default=None)
        p.add_argument("--reset-state-each-cycle", action="store_true", default=None)

    def train_flags(p):
        p.add_argument("--data", required=True, help="directory of .mstd files or one file")
        p.add_argument("--out-dir", required=True)
        for name, typ in (("epochs", int), ("batches", int), ("batch-size", int), ("rollout", int),
                          ("lr0", float), ("step-size", int), ("gamma", float), ("seed", int),
                          ("val-every", int), ("train", int), ("val", int), ("test", int)):
            p.add_argument(f"--{name}", type=typ)

    g = common(sub.add_parser("generate", help="simulate trajectories into MSTD files"))
    g.add_argument("--case", choices=CASES)
    g.add_argument("--grid", type=int)
    g.add_argument("--tend", type=float)
    g.add_argument("--seed-base", type=int)
    g.add_argument("--count", type=int)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--k", type=int)
    g.add_argument("--dt-micro", type=float)
    g.add_argument("--bursts", type=int)
    g.add_argument("--burst-len", type=int)

    p = common(sub.add_parser("pretrain", help="fit the micro module on bursts"))
    train_flags(p)
    p.add_argument("--no-physics-conv", action="store_true", default=None)

    t = common(sub.add_parser("train", help="joint training through the rollout"))
    train_flags(t)
    sched_flags(t)
    t.add_argument("--micro-ckpt")
    t.add_argument("--no-pretrain", action="store_true", default=None)

    e = common(sub.add_parser("eval", help="metrics report for a checkpoint or a trajectory file"))
    e.add_argument("--ckpt")
    e.add_argument("--data")
    e.add_argument("--pred")
    e.add_argument("--truth")
    e.add_argument("--out", required=True)
    e.add_argument("--horizon", type=int)
    sched_flags(e)

    r = common(sub.add_parser("rollout", help="roll a checkpoint out from a trajectory's first frame"))
    r.add_argument("--ckpt", required=True)
    r.add_argument("--ic", required=True)
    r.add_argument("--horizon", type=int)
    r.add_argument("--out", required=True)
    sched_flags(r)

    pl = common(sub.add_parser("plot", help="PGM heatmaps and error-curve CSV"))
    pl.add_argument("--traj", required=True)
    pl.add_argument("--truth")
    pl.add_argument("--frame", type=int)
    pl.add_argument("--error-curve", action="store_true")
    pl.add_argument("--out", required=True)
    return ap


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "rollout": cmd_rollout, "plot": cmd_plot}
_RUNTIME_ONLY = {"command", "config", "out_dir", "data", "micro_ckpt", "ckpt", "pred", "truth", "out",
                 "ic", "traj", "frame", "error_curve"}


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    overrides = {k: v for k, v in vars(args).items() if k not in _RUNTIME_ONLY}
    try:
        cfg = resolve_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (FormatError, OSError) as exc:
        print(f"pimrl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SimulationDiverged, RolloutDiverged, MicroDivergence, MacroDivergence) as exc:
        print(f"pimrl: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, KeyError, TypeError) as exc:
        print(f"pimrl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
