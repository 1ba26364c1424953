"""Time the numba kernels against the pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N] [--step]

Shapes are those of a desk-scale training step (batch 8, 64x64 input). Both
backends are imported from the same module, so the env flag is not needed
here; ORSIFLOW_NUMBA=0 is what switches the library default. ``--step``
also times one full training step of the desk-scale model in a subprocess
per backend, which is where the flag matters in practice.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from orsiflow import _kernels as K

CASES = [
    # name, kernel, arguments (arrays are replaced by random data of that shape)
    ("im2col stage1 k8 s4", "im2col", (np.zeros((8, 3, 68, 68)), 8, 4)),
    ("im2col 3x3 on 16x16", "im2col", (np.zeros((8, 64, 10, 10)), 3, 1)),
    ("im2col 3x3 on 64x64", "im2col", (np.zeros((8, 16, 66, 66)), 3, 1)),
    ("col2im stage1 k8 s4", "col2im", (np.zeros((8, 192, 256)), (8, 3, 68, 68), 8, 4)),
    ("col2im 3x3 on 32x32", "col2im", (np.zeros((8, 288, 1024)), (8, 32, 34, 34), 3, 1)),
    ("resize 2x2 -> 8x8", "resize", (np.zeros((8, 128, 2, 2)), 8, 8)),
    ("resize 16x16 -> 64x64", "resize", (np.zeros((8, 16, 16, 16)), 64, 64)),
    ("resize adjoint 64 -> 16", "resize_adjoint", (np.zeros((8, 16, 64, 64)), 16, 16)),
]


STEP_SCRIPT = """
import time, numpy as np
from orsiflow import _kernels, pipeline
from orsiflow.config import RunConfig
from orsiflow.tensor import backward
cfg = RunConfig()
model = pipeline.build_model(cfg, pipeline.build_vae(cfg))
rng = np.random.default_rng(0)
images, z0, eps = rng.random((8, 3, 64, 64)), rng.standard_normal((8, 4, 8, 8)), rng.standard_normal((8, 4, 8, 8))
times = []
for _ in range(REPEAT):
    start = time.perf_counter()
    backward(model.flow_loss(images, z0, eps, rng.random(8)))
    times.append(time.perf_counter() - start)
print(_kernels.BACKEND, min(times[1:]) * 1e3)
"""


def time_training_step(repeat):
    print(f"\n{'training step (batch 8)':<26s} {'ms':>10s}")
    for flag in ("0", "1"):
        env = dict(os.environ, ORSIFLOW_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.replace("REPEAT", str(max(repeat, 2)))],
                             env=env, capture_output=True, text=True, check=True).stdout.split()
        print(f"{'  backend ' + out[0]:<26s} {float(out[1]):10.1f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--step", action="store_true", help="also time a full training step per backend")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"numba available: {K.HAVE_NUMBA}; library default backend: {K.BACKEND}")
    print(f"{'kernel':<26s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  max |diff|")
    for name, kind, shape_args in CASES:
        call_args = tuple(rng.standard_normal(a.shape) if isinstance(a, np.ndarray) else a for a in shape_args)
        f_np = getattr(K, f"{kind}_numpy")
        t_np = min(timeit.repeat(lambda: f_np(*call_args), number=1, repeat=args.repeat)) * 1e3
        if not K.HAVE_NUMBA:
            print(f"{name:<26s} {t_np:10.3f} {'n/a':>10s}")
            continue
        f_nb = getattr(K, f"{kind}_numba")
        f_nb(*call_args)  # compile / load cache outside the timing
        t_nb = min(timeit.repeat(lambda: f_nb(*call_args), number=1, repeat=args.repeat)) * 1e3
        diff = np.abs(f_np(*call_args) - f_nb(*call_args)).max()
        print(f"{name:<26s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:8.2f}  {diff:.1e}")
    if args.step:
        time_training_step(min(args.repeat, 5))


if __name__ == "__main__":
    main()
