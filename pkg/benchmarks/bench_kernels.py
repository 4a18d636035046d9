"""Time the compiled kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

The numpy timings come from a child process started with
AAASEG_DISABLE_NUMBA=1, since the backend is fixed at import time.
Numba timings exclude the first (compiling) call.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _cases():
    from aaaseg import hed3d, kernels
    from aaaseg.engine import conv_out_dim

    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 66, 66, 34)).astype(np.float32)  # one padded desk-width sample
    out = tuple(conv_out_dim(n, 3, 1, 0) for n in x.shape[1:])
    cols = kernels.im2col3d(x, (3, 3, 3), (1, 1, 1), out)
    pool_in = rng.normal(size=(2, 8, 32, 64, 64)).astype(np.float32)
    pooled, idx = kernels.maxpool3d_forward(pool_in, 2, 2)
    blobs = rng.random((32, 64, 64)) < 0.3
    vol = rng.normal(size=(32, 64, 64))
    zz, yy, xx = (g.ravel() for g in np.meshgrid(np.linspace(0, 31, 40), np.linspace(0, 63, 80),
                                                 np.linspace(0, 63, 80), indexing="ij"))
    net = hed3d.build(hed3d.Hed3DConfig.desk(), seed=0)
    item = rng.random((1, 1, 32, 64, 64)).astype(np.float32)
    target = (rng.random((1, 1, 32, 64, 64)) < 0.2).astype(np.float32)

    def train_step():
        prob, sides, cache = hed3d.forward_train(net, item)
        loss, g, gs = hed3d._loss(net, prob, sides, target)
        hed3d.backward(net, cache, g, gs)

    return {
        "im2col3d 8x66x66x34 k3": lambda: kernels.im2col3d(x, (3, 3, 3), (1, 1, 1), out),
        "col2im3d 8x66x66x34 k3": lambda: kernels.col2im3d(cols, 8, x.shape[1:], (3, 3, 3), (1, 1, 1), out),
        "maxpool fwd 2x8x32x64x64": lambda: kernels.maxpool3d_forward(pool_in, 2, 2),
        "maxpool bwd 2x8x32x64x64": lambda: kernels.maxpool3d_backward(pooled, idx, pool_in.shape),
        "label26 64x64x32 p=0.3": lambda: kernels.label26(blobs),
        "trilinear 256k points": lambda: kernels.trilinear_sample(vol, zz, yy, xx),
        "desk net train step": train_step,
    }


def measure(repeat):
    from aaaseg._accel import backend_name

    results = {}
    for name, fn in _cases().items():
        fn()  # warm-up / JIT compile
        times = []
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        results[name] = min(times)
    return backend_name(), results


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write raw timings here")
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.child:
        print(json.dumps(measure(args.repeat)))
        return 0

    backend, fast = measure(args.repeat)
    env = dict(os.environ, AAASEG_DISABLE_NUMBA="1")
    child = subprocess.run(
        [sys.executable, __file__, "--child", "--repeat", str(args.repeat)],
        env=env, check=True, capture_output=True, text=True,
    )
    slow_backend, slow = json.loads(child.stdout.strip().splitlines()[-1])
    print(f"{'kernel':<28}{backend + ' ms':>12}{slow_backend + ' ms':>12}{'speedup':>10}")
    for name in fast:
        a, b = fast[name] * 1e3, slow[name] * 1e3
        print(f"{name:<28}{a:>12.2f}{b:>12.2f}{b / a:>9.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({backend: fast, slow_backend: slow}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
