"""Compare the compiled and numpy kernel backends.

Times the four gather/scatter kernels on shapes taken from the model stacks
at a 27x27 window, then one full training step of each ConvLSTM network.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]
"""

import argparse
import timeit

import numpy as np

from hsiconvlstm import backend
from hsiconvlstm.models import Model, build


def kernel_cases(quick):
    s = 9 if quick else 27
    rng = np.random.default_rng(0)
    cases = []
    # convlstm1 of sscl2dnn: 4x4 window over [B*T, 1, s+3, s+3, 1] (padded)
    for label, shape, k in (
        ("2-D 4x4, C=1", (16, 1, s + 3, s + 3, 1), (1, 4, 4)),
        ("2-D 3x3, C=32", (16, 1, s // 2 + 3, s // 2 + 3, 32), (1, 3, 3)),
        ("3-D 4x4x4, C=1", (8, 13, s + 3, s + 3, 1), (4, 4, 4)),
    ):
        xp = rng.standard_normal(shape)
        out = tuple(shape[1 + a] - k[a] + 1 for a in range(3))
        cases.append((label, xp, k, out))
    return cases


def time_call(fn, repeat):
    number = 3
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def bench_kernels(repeat, quick):
    rows = []
    for label, xp, k, out in kernel_cases(quick):
        stride = (1, 1, 1)
        timings = {}
        for name in backend.available():
            kern = backend.get(name)
            cols = kern.im2col(xp, k, stride, out)
            win = (1, 2, 2) if k[0] == 1 else (2, 2, 2)
            pout = tuple(xp.shape[1 + a] // win[a] for a in range(3))
            pooled, arg = kern.maxpool_forward(xp, win, win, pout)
            timings[name] = {
                "im2col": time_call(lambda: kern.im2col(xp, k, stride, out), repeat),
                "col2im": time_call(lambda: kern.col2im(cols, xp.shape, k, stride), repeat),
                "pool fwd": time_call(lambda: kern.maxpool_forward(xp, win, win, pout), repeat),
                "pool bwd": time_call(lambda: kern.maxpool_backward(pooled, arg, xp.shape, win, win), repeat),
            }
        for op in ("im2col", "col2im", "pool fwd", "pool bwd"):
            rows.append((label, op, {n: t[op] for n, t in timings.items()}))
    return rows


def bench_models(repeat, quick):
    s, K, batch = (9, 3, 4) if quick else (27, 10, 16)
    rng = np.random.default_rng(1)
    rows = []
    for name in ("sacl2dnn", "sscl2dnn", "sscl3dnn"):
        k = 1 if name == "sacl2dnn" else K
        model = Model(build(name, K=k, s=s, N=9), seed=0)
        patches = rng.standard_normal((batch, s, s, k))
        labels = rng.integers(1, 10, size=batch)
        timings = {}
        for backend_name in backend.available():
            backend.use(backend_name)
            timings[backend_name] = time_call(
                lambda: model.loss_and_grads(patches, labels, np.random.default_rng(0)), max(1, repeat // 2)
            )
        rows.append((f"{name} s={s} K={k} B={batch}", "train step", timings))
    backend.use(backend.available()[0])
    return rows


def print_table(rows):
    names = backend.available()
    head = f"{'case':<28}{'op':<12}" + "".join(f"{n + ' ms':>12}" for n in names)
    if len(names) == 2:
        head += f"{'speedup':>10}"
    print(head)
    for label, op, t in rows:
        line = f"{label:<28}{op:<12}" + "".join(f"{t[n] * 1e3:>12.3f}" for n in names)
        if len(names) == 2:
            line += f"{t['python'] / t['cython']:>9.1f}x"
        print(line)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--quick", action="store_true", help="small shapes for a smoke run")
    args = parser.parse_args()
    print(f"backends: {', '.join(backend.available())}")
    print_table(bench_kernels(args.repeat, args.quick) + bench_models(args.repeat, args.quick))


if __name__ == "__main__":
    main()
