"""Compare the compiled and numpy kernel backends.

Times each kernel at training shapes (batch 32 x 64 steps, hidden 128,
|V| = 4000, d = 64), then one full training epoch per backend on a small
synthetic set.  Usage::

    python3 benchmarks/bench_kernels.py [--repeat N] [--skip-epoch]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from hierplace.kernels import backends


def kernel_cases(rng):
    B, H, V, d = 32 * 64, 128, 4000, 64
    # float32 throughout, as in training
    z = rng.normal(size=(32, 4 * H)).astype(np.float32)
    c = rng.normal(size=(32, H)).astype(np.float32)
    logits = rng.normal(size=(B, V)).astype(np.float32)
    targets = rng.integers(0, V, B)
    scale = np.full(B, 1.0 / B, np.float32)
    emb = rng.normal(size=(V, d)).astype(np.float32)
    ids = rng.integers(0, V, B)
    src = rng.normal(size=(B, d)).astype(np.float32)
    bounds = np.arange(0, V + 1, 10)
    p = rng.normal(size=V * d).astype(np.float32)
    g = rng.normal(size=V * d).astype(np.float32)

    def lstm(k):
        zz = z.copy()
        acts, cc, tc, h = k.lstm_forward(zz, c)
        k.lstm_backward(acts, c, tc, h, cc)

    return {
        "lstm step fwd+bwd (32x128)": lambda k: lstm(k),
        "softmax xent + grad (2048x4000)": lambda k: k.softmax_xent(logits.copy(), targets, scale),
        "scatter add rows (2048 into 4000x64)": lambda k: k.scatter_add_rows(np.zeros_like(emb), ids, src),
        "average intervals (400 x 10 rows)": lambda k: k.average_intervals(emb.copy(), bounds[:-1], bounds[1:], 0, 32),
        "adam update (256k)": lambda k: k.adam_update(p.copy(), g, np.zeros_like(p), np.zeros_like(p),
                                                      1e-3, 0.9, 0.999, 1e-8, 3),
    }


EPOCH = """
import time
from hierplace.experiment import prepare
from hierplace.model import ModelConfig, NextPlaceModel, train
from hierplace.synth import SynthConfig, synth_generate
cfg = SynthConfig(n_users=2000, seed=1)
trajs, _, _ = synth_generate(cfg)
data = prepare(trajs, cfg.grid_spec())
m = NextPlaceModel(ModelConfig(method="hier", epochs=1), data.vocab, seed=0)
t = time.perf_counter()
train(m, data.split, m.cfg)
print(time.perf_counter() - t)
"""


def epoch_time(backend):
    env = dict(os.environ, HIERPLACE_KERNELS=backend)
    out = subprocess.run([sys.executable, "-c", EPOCH], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.split()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-epoch", action="store_true")
    args = ap.parse_args()
    found = backends()
    names = sorted(found)
    print(f"{'kernel':40s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for label, fn in kernel_cases(np.random.default_rng(0)).items():
        ms = {n: 1e3 * min(timeit.repeat(lambda: fn(found[n]), number=1, repeat=args.repeat)) for n in names}
        row = f"{label:40s}" + "".join(f"{ms[n]:10.3f}ms" for n in names)
        if len(names) > 1:
            row += f"{ms['numpy'] / ms['cython']:11.2f}x"
        print(row)
    if not args.skip_epoch:
        times = {n: epoch_time(n) for n in names}
        row = f"{'one epoch, 2000 users, hier':40s}" + "".join(f"{times[n]:11.2f}s" for n in names)
        if len(names) > 1:
            row += f"{times['numpy'] / times['cython']:11.2f}x"
        print(row)


if __name__ == "__main__":
    main()
