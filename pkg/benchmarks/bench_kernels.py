"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel with the best-of-N time for each backend and the
speedup, then a whole-network forward/backward at 64x64.
"""

import argparse
import timeit

import numpy as np

from lmnet import _fallback, backend
from lmnet.attention import window_starts
from lmnet.autodiff import backward
from lmnet.loss import weighted_cross_entropy
from lmnet.model import LmNet, tiny_config
from lmnet.tensor import Tensor


def kernel_cases(rng):
    a = rng.standard_normal((256, 72)).astype(np.float32)
    b = rng.standard_normal((72, 4096)).astype(np.float32)
    xpad = rng.standard_normal((8, 32, 36, 36)).astype(np.float32)
    w = rng.standard_normal((32, 5, 5)).astype(np.float32)
    g = rng.standard_normal((8, 32, 32, 32)).astype(np.float32)
    q, k, v = (rng.standard_normal((8, 16, 16, 32)).astype(np.float32) for _ in range(3))
    sh = sw = window_starts(16, 5)
    wt = rng.random((8, 16, 16, 25)).astype(np.float32)
    return {
        "gemm 256x72x4096": lambda m: m.gemm(a, b),
        "dwconv fwd 5x5": lambda m: m.dwconv_forward(xpad, w, 1, 1, 32, 32),
        "dwconv bwd 5x5": lambda m: m.dwconv_backward(xpad, w, g, 1, 1),
        "na logits k=5": lambda m: m.na_logits(q, k, sh, sw, 5, 5),
        "na apply k=5": lambda m: m.na_apply(wt, v, sh, sw, 5, 5),
        "na scatter k=5": lambda m: m.na_scatter(wt, q, sh, sw, 5, 5),
    }


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def network_step(seed=0):
    net = LmNet(tiny_config(), rng=seed)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.random((4, 3, 64, 64)).astype(np.float32))
    y = rng.integers(0, 2, (4, 64, 64))

    def step():
        backward(weighted_cross_entropy(net(x), y))

    return step


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if "compiled" not in backend.available():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    from lmnet import _kernels

    rows = []
    for label, fn in kernel_cases(np.random.default_rng(0)).items():
        tc = best(lambda fn=fn: fn(_kernels), args.repeat)
        tp = best(lambda fn=fn: fn(_fallback), args.repeat)
        rows.append((label, tc, tp))
    step = network_step()
    for which in ("compiled", "python"):
        backend.use(which)
        step()  # warm-up
        rows_t = best(step, max(1, args.repeat // 2))
        if which == "compiled":
            tc = rows_t
        else:
            tp = rows_t
    backend.use("compiled")
    rows.append(("tiny net fwd+bwd, 4x3x64x64", tc, tp))

    print(f"{'kernel':32} {'compiled ms':>12} {'python ms':>12} {'speedup':>8}")
    for label, tc, tp in rows:
        print(f"{label:32} {tc * 1e3:12.2f} {tp * 1e3:12.2f} {tp / tc:8.1f}x")


if __name__ == "__main__":
    main()
