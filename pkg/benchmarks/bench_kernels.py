"""Compiled vs numpy kernels: raw conv/stencil timings and an end-to-end micro step.

    python benchmarks/bench_kernels.py [--grid 48] [--repeat 20]

The end-to-end rows run in a child process per backend because the backend is
fixed at import time (PIMRL_PURE_PYTHON=1 selects numpy).
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from pimrl.kernels import implementations
from pimrl.physics import laplacian_stencil

STEP_SNIPPET = """
import json, sys, timeit
import numpy as np
from pimrl import BACKEND, tensor as T
from pimrl.micro_net import micro_rollout
from pimrl.scheduler import build_model
from pimrl.solvers import make_case
n, repeat = int(sys.argv[1]), int(sys.argv[2])
c = make_case("gs2d", n=n)
m = build_model("gs2d", 2, 2, c.dx, c.params, 0.5, seed=0)
u = 0.5 + 0.1 * np.random.default_rng(0).normal(size=(2, n, n))
def fwd():
    with T.no_grad():
        micro_rollout(u, m.micro, 15)
def fwd_bwd():
    T.backward(T.mse(micro_rollout(u, m.micro, 15)[-1], u), reset=True)
out = {"backend": BACKEND}
for name, fn in (("micro x15 fwd", fwd), ("micro x15 fwd+bwd", fwd_bwd)):
    fn()
    out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
print(json.dumps(out))
"""


def best(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_rows(n, repeat):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, n, n))
    w = rng.normal(size=(48, 16, 5, 5))
    gy = rng.normal(size=(48, n, n))
    u = rng.normal(size=(2, n, n))
    lap = np.ascontiguousarray(laplacian_stencil(1.0 / n, ndim=2).coefficients)
    rows = {}
    for name, k in implementations().items():
        rows[name] = {
            "conv fwd 16->48 5x5": best(lambda: k.conv2d_forward(x, w, 1, True), repeat),
            "conv grad weight": best(lambda: k.conv2d_backward_weight(gy, x, 5, 5, 1, True), repeat),
            "conv grad input": best(lambda: k.conv2d_backward_input(gy, w, n, n, 1, True), repeat),
            "laplacian stencil": best(lambda: k.stencil_periodic(u, lap), repeat),
        }
    return rows


def step_rows(n, repeat):
    rows = {}
    for force in ("0", "1"):
        env = dict(os.environ, PIMRL_PURE_PYTHON=force)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET, str(n), str(repeat)], env=env,
                             capture_output=True, text=True, check=True)
        out = json.loads(res.stdout)
        rows.setdefault(out.pop("backend"), {}).update(out)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", type=int, default=48)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rows = kernel_rows(args.grid, args.repeat)
    for backend, r in step_rows(args.grid, max(3, args.repeat // 4)).items():
        rows.setdefault(backend, {}).update(r)
    names = list(rows["numpy"])
    print(f"grid {args.grid}x{args.grid}, best of {args.repeat} (ms)")
    print(f"{'kernel':<22}{'numpy':>10}{'compiled':>10}{'speedup':>9}")
    for name in names:
        a = rows["numpy"][name] * 1e3
        b = rows.get("compiled", {}).get(name)
        if b is None:
            print(f"{name:<22}{a:>10.3f}{'n/a':>10}")
        else:
            print(f"{name:<22}{a:>10.3f}{b * 1e3:>10.3f}{a / (b * 1e3):>8.2f}x")


if __name__ == "__main__":
    main()
