"""Time the numba kernels against their numpy twins, then a whole training step.

    python benchmarks/bench_kernels.py [--repeats 50] [--no-step]

Kernel shapes match the default 32x32 model (batch 8, widths 8/16/32). The
training-step timing runs in a subprocess per backend, because the backend
is chosen at import time from ``CGS_NUMBA``.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from cgs import _kernels as K

STEP_SNIPPET = """
import time
from cgs import _kernels, synthdata, trainer
cfg = trainer.TrainConfig(iterations={iters}, eval_interval=0)
ds = synthdata.generate_dataset(cfg.data)
trainer.train(trainer.TrainConfig(iterations=2, eval_interval=0), ds)  # warm-up / jit
t = time.perf_counter()
trainer.train(cfg, ds)
print(_kernels.backend(), (time.perf_counter() - t) / {iters})
"""


def _time(fn, args, repeats):
    fn(*args)  # compile / warm caches
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def kernel_cases(rng):
    x = rng.standard_normal((8, 34, 34, 8)).astype(np.float32)
    cols = K.im2col_numpy(x, 3, 3, 1, 32, 32)
    act = rng.standard_normal((8, 32, 32, 16)).astype(np.float32)
    pooled, idx = K.maxpool2_numpy(act)
    x2 = rng.standard_normal((8 * 32 * 32, 16)).astype(np.float32)
    mu, var = K.channel_moments_numpy(x2)
    invstd = (1.0 / np.sqrt(var + 1e-5)).astype(np.float32)
    xhat = (x2 - mu) * invstd
    gamma = np.ones(16, np.float32)
    return [
        ("im2col 3x3", "im2col", (x, 3, 3, 1, 32, 32)),
        ("col2im 3x3", "col2im", (cols, 34, 34, 1)),
        ("maxpool2", "maxpool2", (act,)),
        ("maxpool2 backward", "maxpool2_backward", (pooled, idx)),
        ("bn moments", "channel_moments", (x2,)),
        ("bn backward", "bn_backward", (x2, xhat, gamma, invstd)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--step-iters", type=int, default=30)
    ap.add_argument("--no-step", action="store_true", help="skip the end-to-end training step timing")
    args = ap.parse_args(argv)
    if not K._HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for label, name, call_args in kernel_cases(rng):
        t_np = _time(getattr(K, name + "_numpy"), call_args, args.repeats)
        t_nb = _time(getattr(K, name + "_numba"), call_args, args.repeats)
        print(f"{label:<20}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>8.1f}x")

    if args.no_step:
        return
    print("\nfull cgs training step (batch 4+4, 32x32):")
    for flag in ("0", "1"):
        env = dict(os.environ, CGS_NUMBA=flag, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1")
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(iters=args.step_iters)],
                             env=env, capture_output=True, text=True, check=True).stdout.split()
        print(f"  {out[0]:<6} {1e3 * float(out[1]):.1f} ms/iter")


if __name__ == "__main__":
    main()
