"""Time the compiled and pure-numpy kernel backends on desk-scale shapes.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one row per kernel with the median time for each backend and the
speed-up, after checking that both backends agree.
"""

import argparse
import statistics
import time

import numpy as np

from dflgcn import kernels
from dflgcn.backbone import Backbone, BackboneConfig, default_blocks
from dflgcn.graph import build_graph
from dflgcn.skeleton import ntu_topology


def cases(rng):
    x = rng.standard_normal((16, 16, 100, 25))
    w = rng.standard_normal((9, 16, 16))
    y = kernels.temporal_conv_forward(x, w, 2, 4)
    dy = rng.standard_normal(y.shape)
    bn_x = rng.standard_normal((16, 16, 2500))
    gamma, beta = rng.standard_normal(16), rng.standard_normal(16)
    _, xhat, _, _, inv_std = kernels.batchnorm_forward_train(bn_x, gamma, beta, 1e-5)
    pos = rng.standard_normal((100, 25, 3))
    dw = np.zeros_like(w)
    return {
        "temporal_conv_forward": lambda: kernels.temporal_conv_forward(x, w, 2, 4),
        "temporal_conv_backward": lambda: kernels.temporal_conv_backward(dy, x, w, 2, 4, dw),
        "batchnorm_forward_train": lambda: kernels.batchnorm_forward_train(bn_x, gamma, beta,
                                                                           1e-5),
        "batchnorm_backward_train": lambda: kernels.batchnorm_backward_train(
            bn_x, xhat, gamma, inv_std),
        "dif_transform": lambda: kernels.dif_transform(pos, 1, 20, 4, 8),
    }


def backbone_step(rng):
    bb = Backbone(build_graph(ntu_topology()),
                  BackboneConfig(default_blocks(3, (8, 16, 16), (1, 2, 2), 9)), rng)
    x = rng.standard_normal((16, 3, 100, 25))

    def run():
        out = bb.forward(x)
        bb.backward(np.ones_like(out))
    return run


def median_time(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def compare(name, fn, repeat):
    if len(kernels.available_backends()) < 2:
        with kernels.use_backend("python"):
            print(f"{name:26s} python {median_time(fn, repeat) * 1e3:9.3f} ms  (no compiled "
                  "backend)")
        return
    results, timings = {}, {}
    for backend in ("python", "cython"):
        with kernels.use_backend(backend):
            results[backend] = fn()
            timings[backend] = median_time(fn, repeat)
    a, b = results["python"], results["cython"]
    diff = "-"
    if a is not None:
        a, b = (a, b) if isinstance(a, tuple) else ((a,), (b,))
        diff = f"{max(float(np.max(np.abs(p - q))) for p, q in zip(a, b)):.1e}"
    print(f"{name:26s} python {timings['python'] * 1e3:9.3f} ms  cython "
          f"{timings['cython'] * 1e3:9.3f} ms  speed-up {timings['python'] / timings['cython']:5.2f}x"
          f"  max diff {diff}")


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args()
    rng = np.random.default_rng(0)
    print(f"backends: {', '.join(kernels.available_backends())}")
    for name, fn in cases(rng).items():
        compare(name, fn, args.repeat)
    step = backbone_step(rng)
    compare("backbone fwd+bwd (B=16)", lambda: step(), max(3, args.repeat // 5))


if __name__ == "__main__":
    main()
