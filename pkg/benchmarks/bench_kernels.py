"""Time the numba and pure-numpy kernel paths side by side.

    python3 benchmarks/bench_kernels.py [--repeat N]

Kernel timings call both paths in-process. The end-to-end rows run a
training step and a 1920x1080 enhancement in subprocesses, once with
AESTHADAPT_DISABLE_NUMBA=1 and once without.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from aesthadapt import _kernels as K


def best_of(fn, repeat):
    fn()  # warm-up (includes jit compile for numba)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 32, 18, 18)).astype(np.float32)
    oh = ow = 16
    cols = K.im2col(x, 3, 3, 1, oh, ow, use_numba=False)
    img = rng.random((1, 3, 1080, 1920)).astype(np.float32)
    pooled = K.adaptive_pool(img, 32, 32, use_numba=False)
    cases = {
        "im2col 16x32x16x16 k3": lambda nb: K.im2col(x, 3, 3, 1, oh, ow, use_numba=nb),
        "col2im 16x32x16x16 k3": lambda nb: K.col2im(cols, x.shape, 3, 3, 1, oh, ow, use_numba=nb),
        "adaptive_pool 1080x1920->32": lambda nb: K.adaptive_pool(img, 32, 32, use_numba=nb),
        "adaptive_pool_grad 32->1080x1920": lambda nb: K.adaptive_pool_grad(pooled, 1080, 1920, use_numba=nb),
    }
    rows = []
    for name, fn in cases.items():
        t_np = best_of(lambda: fn(False), repeat)
        t_nb = best_of(lambda: fn(True), repeat) if K.HAVE_NUMBA else float("nan")
        rows.append((name, t_np, t_nb))
    return rows


E2E = r"""
import time, numpy as np
from aesthadapt.model import BackboneConfig, build_backbone
from aesthadapt.numerics import RandomSource
from aesthadapt import numerics as nx
from aesthadapt.enhance import enhance, EnhanceConfig
m = build_backbone(BackboneConfig(), RandomSource(0))
x = np.random.default_rng(0).normal(size=(16, 3, 32, 32)).astype(np.float32)
names = frozenset(k for k in m.params)
def step():
    r = m.apply(x, training=True, rng=RandomSource(1), trainable=names)
    nx.backward(nx.mse(r.scores, np.zeros(16, np.float32)))
step()
t0 = time.perf_counter(); [step() for _ in range(5)]; t_step = (time.perf_counter() - t0) / 5
img = np.random.default_rng(1).random((3, 1080, 1920)).astype(np.float32)
enhance(img[:, :40, :40], m, None, EnhanceConfig(1e-3))
t0 = time.perf_counter(); enhance(img, m, None, EnhanceConfig(1e-3)); t_hd = time.perf_counter() - t0
print(t_step, t_hd)
"""


def e2e(disable):
    env = dict(os.environ, AESTHADAPT_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
    return tuple(float(v) for v in out.stdout.split())


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()

    print(f"numba available: {K.HAVE_NUMBA}")
    print(f"{'kernel':36s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, t_np, t_nb in kernel_rows(args.repeat):
        print(f"{name:36s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.1f}x")
    if args.skip_e2e:
        return
    np_step, np_hd = e2e(True)
    nb_step, nb_hd = e2e(False)
    print(f"{'train step, batch 16 (desk net)':36s} {np_step * 1e3:10.1f} {nb_step * 1e3:10.1f} {np_step / nb_step:8.1f}x")
    print(f"{'enhance 1920x1080, 1 step':36s} {np_hd * 1e3:10.1f} {nb_hd * 1e3:10.1f} {np_hd / nb_hd:8.1f}x")


if __name__ == "__main__":
    main()
