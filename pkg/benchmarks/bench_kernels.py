"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--batch 32] [--channels 16] [--dim 32] [--repeat 20]

Reports the median wall time per call for each kernel and backend, plus one
full training iteration of a small network under each backend.
"""
import argparse
import statistics
import time

import numpy as np

from shape_adaptor import kernels
from shape_adaptor.data import batch_iterator, synth_dataset
from shape_adaptor.network import build_network, conv_spec
from shape_adaptor.tensor import softmax_cross_entropy
from shape_adaptor.trainer import TrainConfig


def median_ms(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times)


def kernel_cases(x):
    n, c, h, w = x.shape
    cols = kernels.im2col(x, 3, 3, 1, 1)
    pooled, idx = kernels.maxpool_forward(x, 2, 2)
    out_dim = int(h * 0.7)
    up = kernels.bilinear_forward(x, out_dim, out_dim)
    return {
        "im2col 3x3": lambda: kernels.im2col(x, 3, 3, 1, 1),
        "col2im 3x3": lambda: kernels.col2im(cols, h, w, 1, 1),
        "maxpool fwd": lambda: kernels.maxpool_forward(x, 2, 2),
        "maxpool bwd": lambda: kernels.maxpool_backward(pooled, idx, h, w),
        "bilinear fwd": lambda: kernels.bilinear_forward(x, out_dim, out_dim),
        "bilinear bwd": lambda: kernels.bilinear_backward(up, h, w),
    }


def train_step_case(batch, dim):
    data = synth_dataset(3, batch, dim=dim, seed=0)
    config = TrainConfig(n_adaptors=2, d_out=16)
    model = build_network(conv_spec((8, 16, 16, 32), 3, input_dim=dim), config, seed=0)
    xb, yb = next(batch_iterator(data, batch))

    def step():
        loss = softmax_cross_entropy(model.forward(xb), yb)
        loss.backward()
        for p in model.parameters():
            p.grad = None
    return step


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--channels", type=int, default=16)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()

    backends = kernels.available_backends()
    x = np.random.default_rng(0).random((args.batch, args.channels, args.dim, args.dim),
                                        dtype=np.float32)
    results = {}
    for name in backends:
        with kernels.use_backend(name):
            for case, fn in kernel_cases(x).items():
                results[(case, name)] = median_ms(fn, args.repeat)
            results[("train step", name)] = median_ms(train_step_case(args.batch, args.dim),
                                                      max(3, args.repeat // 4))

    cases = list(dict.fromkeys(case for case, _ in results))
    print(f"input {x.shape} float32, median of {args.repeat} runs (ms)")
    header = f"{'kernel':<14}" + "".join(f"{b:>10}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for case in cases:
        line = f"{case:<14}" + "".join(f"{results[(case, b)]:>10.3f}" for b in backends)
        if len(backends) == 2:
            line += f"{results[(case, 'python')] / results[(case, 'cython')]:>9.1f}x"
        print(line)
    if len(backends) == 1:
        print("compiled extension not built; only the fallback was measured")


if __name__ == "__main__":
    main()
