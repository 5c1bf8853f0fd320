"""Time the compiled row-softmax kernels against the numpy fallback.

Shapes follow the attention core of the default model ([batch*heads, N, N]).

    python benchmarks/bench_kernels.py [--repeats 50]
"""

import argparse
import timeit

import numpy as np

from tmtstream import kernels


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=50)
    args = ap.parse_args()
    if kernels.BACKEND != "compiled":
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")

    rng = np.random.default_rng(0)
    print(f"{'shape':>16} {'op':>9} {'numpy ms':>9} {'cython ms':>9} {'speedup':>8}")
    for n in (32, 64, 128):
        x = rng.normal(size=(64, n, n))
        g = rng.normal(size=x.shape)
        p = kernels.softmax_forward_py(x)
        cases = {
            "forward": (lambda: kernels.softmax_forward_py(x), lambda: kernels.softmax_forward_compiled(x)),
            "backward": (lambda: kernels.softmax_backward_py(p, g), lambda: kernels.softmax_backward_compiled(p, g)),
        }
        for op, (py, c) in cases.items():
            t_py = min(timeit.repeat(py, number=1, repeat=args.repeats)) * 1e3
            t_c = min(timeit.repeat(c, number=1, repeat=args.repeats)) * 1e3
            print(f"{str(x.shape):>16} {op:>9} {t_py:9.3f} {t_c:9.3f} {t_py / t_c:7.2f}x")


if __name__ == "__main__":
    main()
