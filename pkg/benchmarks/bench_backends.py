"""Compare the numba and numpy kernel backends.

Times one training step (forward, backward and an Adam update) and one streaming
hop of inference for each backend, after a warm-up call that absorbs JIT compilation.

    python benchmarks/bench_backends.py [--repeats 5]
"""
import argparse
import time

import numpy as np

from cleegn import BACKEND
from cleegn import _kernels
from cleegn.model import CleegnConfig, backward, build_model, forward
from cleegn.neuralcore import AdamState, adam_step, mse_loss
from cleegn.streaming import stream_init, stream_push

BACKENDS = {"numpy": _kernels.NUMPY_KERNELS, "numba": _kernels.NUMBA_KERNELS}


def use(kernels):
    for name, fn in kernels.items():
        setattr(_kernels, name, fn)


def best_of(fn, repeats):
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def train_step_case(c=8, fs=128.0, batch=64):
    model = build_model(CleegnConfig(c, fs), seed=0)
    rng = np.random.default_rng(0)
    x = rng.normal(scale=20, size=(batch, c, model.config.window_len, 1)).astype(np.float32)
    y = rng.normal(scale=20, size=x.shape).astype(np.float32)
    state = AdamState.for_params(model.params())

    def step():
        out, cache = forward(model, x, "train")
        grads, _ = backward(model, cache, mse_loss(out, y)[1])
        adam_step(model.params(), grads, state, 1e-3)

    return step


def hop_case(c=56, fs=128.0):
    model = build_model(CleegnConfig(c, fs), seed=0)
    state = stream_init(model, fs)
    x = np.random.default_rng(0).normal(scale=20, size=(c, state.window)).astype(np.float32)
    stream_push(state, x)
    hop = x[:, : state.hop]
    return lambda: stream_push(state, hop)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    names = ["numpy", "numba"] if BACKEND == "numba" else ["numpy"]
    if BACKEND != "numba":
        print("numba unavailable or disabled; timing numpy only")
    cases = {"train step C=8 B=64 T=512": train_step_case, "stream hop C=56 T=512": hop_case}
    print(f"{'case':<28}" + "".join(f"{n:>12}" for n in names) + ("   speed-up" if len(names) == 2 else ""))
    for label, make in cases.items():
        row = []
        for name in names:
            use(BACKENDS[name])
            row.append(best_of(make(), args.repeats))
        line = f"{label:<28}" + "".join(f"{1e3 * t:>10.1f}ms" for t in row)
        if len(row) == 2:
            line += f"   {row[0] / row[1]:>7.2f}x"
        print(line)
    use(BACKENDS[BACKEND])


if __name__ == "__main__":
    main()
