"""Compare the compiled and numpy kernel backends.

Usage::

    python benchmarks/bench_kernels.py [--repeat 20] [--step]

Each kernel is timed on activations shaped like the flagship network
(batch 64, 32x32, 16 channels). ``--step`` also times one full training
step per backend in a fresh interpreter, since the backend is fixed at
import.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from radiomap.kernels import backends

STEP_SNIPPET = """
import time, numpy as np
from radiomap import kernels
from radiomap.network.model import CompletionAutoencoder, NetworkSpec
spec = NetworkSpec.flagship(filters=[16, 32, 32, 32], input_offset=-60.0, input_scale=10.0)
model = CompletionAutoencoder(spec)
rng = np.random.default_rng(0)
vals = rng.normal(-60, 10, (64, 32, 32, 1)); masks = (rng.random((64, 32, 32, 1)) < 0.1).astype(float)
x = model.make_input(vals * masks, masks)
model.backward(np.ones_like(model.forward(x)))
t = time.perf_counter()
for _ in range({repeat}):
    model.backward(np.ones_like(model.forward(x)))
print(kernels.BACKEND, (time.perf_counter() - t) / {repeat})
"""


def kernel_cases(rng):
    x = rng.standard_normal((16, 64, 32, 32)).astype(np.float32)
    small = rng.standard_normal((16, 64, 16, 16)).astype(np.float32)
    leak = np.full(16, 0.25, np.float32)

    def cases(mod):
        cols = mod.im2col(x, 3)
        return {
            "im2col 3x3": lambda: mod.im2col(x, 3),
            "col2im 3x3": lambda: mod.col2im(cols, x.shape, 3),
            "avgpool2": lambda: mod.avgpool2(x),
            "avgpool2_backward": lambda: mod.avgpool2_backward(small),
            "upsample2": lambda: mod.upsample2(small),
            "upsample2_backward": lambda: mod.upsample2_backward(x),
            "prelu": lambda: mod.prelu(x, leak),
            "prelu_backward": lambda: mod.prelu_backward(x, x, leak),
        }

    return cases


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--step", action="store_true", help="also time a full training step")
    args = p.parse_args(argv)

    found = backends()
    cases = kernel_cases(np.random.default_rng(0))
    timings = {name: {k: min(timeit.repeat(fn, number=1, repeat=args.repeat)) for k, fn in cases(mod).items()}
               for name, mod in found.items()}
    names = list(found)
    print(f"{'kernel':<20}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for kernel in timings["python"]:
        row = [timings[n][kernel] * 1e3 for n in names]
        line = f"{kernel:<20}" + "".join(f"{v:>10.3f}ms" for v in row)
        if len(names) > 1:
            line += f"{row[0] / row[1]:>11.2f}x"
        print(line)
    if "cython" not in found:
        print("compiled backend not built; run `pip install -e . --no-build-isolation` to build it")

    if args.step:
        for pure in ("1", "0"):
            env = dict(os.environ, RADIOMAP_PURE_PYTHON=pure)
            res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=3)], env=env,
                                 capture_output=True, text=True, check=True)
            backend, secs = res.stdout.split()
            print(f"training step (batch 64, {backend}): {float(secs) * 1e3:.1f} ms")


if __name__ == "__main__":
    with threadpool_limits(limits=1):
        main()
