"""Micro-benchmark: numba kernels vs the pure-numpy fallback.

Times every hot kernel on attack-sized shapes, checks both backends agree,
then times one full DA-MI-FGSM run end to end under each backend.

Run:  python3 benchmarks/bench_kernels.py
The package-wide backend is whatever DAATTACK_BACKEND says (numba when
available); this script bypasses the global choice via kernels.get_impl.
"""

import os
import subprocess
import sys
import time

import numpy as np

from daattack import kernels
from daattack.rng import RngStream

REPS = 30
B, C_IN, C_OUT, H, K = 64, 6, 4, 16, 3


def make_args(rng):
    x = rng.random((B, C_IN, H, H))
    w = rng.normal(0.1, (C_OUT, C_IN, K, K))
    b = rng.normal(0.1, (C_OUT,))
    dy = rng.normal(1.0, (B, C_OUT, H, H))
    xf = np.ascontiguousarray(x.reshape(B, -1))
    wd = rng.normal(0.1, (32, xf.shape[1]))
    bd = rng.normal(0.1, (32,))
    dyd = rng.normal(1.0, (B, 32))
    k2 = rng.random((2 * 3 + 1, 2 * 3 + 1))
    k2 /= k2.sum()
    g = rng.normal(1.0, (B, 1, H, H))
    return {
        "conv2d_fwd": (x, w, b),
        "conv2d_dx": (dy, w),
        "conv2d_dw": (dy, x, K),
        "depthwise2d": (g, k2),
        "dense_fwd": (xf, wd, bd),
        "dense_dx": (dyd, wd),
        "dense_dw": (dyd, xf),
    }


def bench_one(fn, args):
    fn(*args)  # warm-up (numba compiles here)
    t0 = time.perf_counter()
    for _ in range(REPS):
        fn(*args)
    return (time.perf_counter() - t0) / REPS


def bench_kernels():
    args = make_args(RngStream(0))
    tables = {name: kernels.get_impl(name) for name in kernels.available_backends()}
    if "numba" not in tables:
        print("numba not importable; nothing to compare")
        return
    print(f"{'kernel':<14} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for op, a in args.items():
        out_np = tables["numpy"][op](*a)
        out_nb = tables["numba"][op](*a)
        if not isinstance(out_np, tuple):
            out_np, out_nb = (out_np,), (out_nb,)
        for p, q in zip(out_np, out_nb):
            assert np.allclose(p, q, rtol=1e-10, atol=1e-10), op
        t_np = bench_one(tables["numpy"][op], a)
        t_nb = bench_one(tables["numba"][op], a)
        print(f"{op:<14} {t_np*1e3:>8.2f}ms {t_nb*1e3:>8.2f}ms {t_np/t_nb:>7.1f}x")


ATTACK_SNIPPET = r"""
import time
import numpy as np
from daattack.data import gen_rings
from daattack.nets import TrainConfig, build_arch, train
from daattack.attacks import attack_config, run_attack

ds = gen_rings(200, 16, 3, seed=1)
model = train(build_arch("convA", 16, 3), ds,
              TrainConfig(lr=0.1, epochs=4, batch_size=32, seed=2))
x, y = ds.images[:64], ds.labels[:64]
cfg = attack_config("da-mi-fgsm", aggregate=10, seed=3)
run_attack(model, x, y, cfg)  # warm-up
t0 = time.perf_counter()
run_attack(model, x, y, cfg)
print(f"{time.perf_counter() - t0:.3f}")
"""


def bench_attack():
    print("\nend-to-end da-mi-fgsm (64 examples, N=10, T=12, convA):")
    times = {}
    for backend in kernels.available_backends():
        env = dict(os.environ, DAATTACK_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", ATTACK_SNIPPET],
                             capture_output=True, text=True, env=env)
        if out.returncode != 0:
            print(f"  {backend}: FAILED\n{out.stderr}")
            return
        times[backend] = float(out.stdout.strip().splitlines()[-1])
        print(f"  {backend:<6} {times[backend]:.3f}s")
    if len(times) == 2:
        print(f"  speedup {times['numpy'] / times['numba']:.1f}x")


if __name__ == "__main__":
    bench_kernels()
    bench_attack()
