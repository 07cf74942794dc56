"""Time the numba kernels against the numpy fallback.

Each backend runs in its own interpreter because the choice is made at
import time from ANYTIMENET_DISABLE_NUMBA.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--steps 200]
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from anytimenet import _kernels as K
from anytimenet.arch import NestedNetwork, StagePlan
from anytimenet.optim import MultitaskOptimizer, OptimizerConfig

repeat, steps = int(sys.argv[1]), int(sys.argv[2])
K.warmup()
rng = np.random.default_rng(0)


def best(fn, n):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        for _ in range(n):
            fn()
        times.append((time.perf_counter() - t) / n)
    return min(times)


out = {"backend": K.BACKEND}
logits, labels = rng.normal(size=(64, 3)), rng.integers(0, 3, 64)
out["softmax_xent_us"] = 1e6 * best(lambda: K.softmax_xent(logits, labels), 5000)
G = rng.normal(size=(4, 3000))
out["orthogonalize_4x3000_us"] = 1e6 * best(lambda: K.orthogonalize_rows(G.copy(), 1e-12), 500)

x, y = rng.normal(size=(64, 2)), rng.integers(0, 3, 64)
for strat in ("sgd", "osgd"):
    net = NestedNetwork(StagePlan(4, "width", 4, 2), seed=0)
    opt = MultitaskOptimizer(net, OptimizerConfig(strat))
    opt.train_step(x, y, 0.01)
    out[f"train_step_{strat}_ms"] = 1e3 * best(lambda: opt.train_step(x, y, 0.01), steps)
print(json.dumps(out))
"""


def run(disable, repeat, steps):
    env = dict(os.environ, ANYTIMENET_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat), str(steps)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args()
    nb = run(False, args.repeat, args.steps)
    npy = run(True, args.repeat, args.steps)
    if nb["backend"] != "numba":
        print("numba unavailable; only the numpy path was measured")
    keys = [k for k in nb if k != "backend"]
    print(f"{'benchmark':<28}{nb['backend']:>12}{'numpy':>12}{'speedup':>10}")
    for k in keys:
        print(f"{k:<28}{nb[k]:>12.2f}{npy[k]:>12.2f}{npy[k] / nb[k]:>9.2f}x")


if __name__ == "__main__":
    main()
