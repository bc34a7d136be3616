"""Compare the numba loop kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py            # kernel micro-benchmarks
    python3 benchmarks/bench_kernels.py --train    # plus one training epoch per backend

The kernel section calls both tables directly in one process. The training
section re-runs itself in subprocesses with and without
IDIOMADV_DISABLE_NUMBA=1, since the backend is fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from idiomadv import backend
from idiomadv.kernels import LOOP_KERNELS, NUMPY_KERNELS

# rows x width as seen in a default-size model: attention scores over 64
# positions (batch 16, 4 heads) and hidden states of width 64 / 128
SHAPES = {"small": (16 * 4 * 64, 64), "ffn": (16 * 64, 128), "large": (8192, 256)}


def _args(name, rows, width, rng):
    x = rng.normal(size=(rows, width))
    g = rng.normal(size=(rows, width))
    if name == "softmax_fwd":
        return (x,)
    if name == "softmax_bwd":
        return (NUMPY_KERNELS["softmax_fwd"](x), g)
    if name == "layer_norm_fwd":
        return (x, np.ones(width), np.zeros(width), 1e-12)
    if name == "layer_norm_bwd":
        _, xhat, rstd = NUMPY_KERNELS["layer_norm_fwd"](x, np.ones(width), np.zeros(width), 1e-12)
        return (g, xhat, rstd, np.ones(width))
    return (x,) if name == "gelu_fwd" else (x, g)


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"backend at import: {backend()}")
    if backend() != "numba":
        print("numba is disabled; the loop column times plain Python loops")
    print(f"{'kernel':<16} {'shape':>12} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name in NUMPY_KERNELS:
        for label, (rows, width) in SHAPES.items():
            if backend() != "numba" and label == "large":
                continue
            args = _args(name, rows, width, rng)
            LOOP_KERNELS[name](*args)  # compile outside the timed region
            t_np = min(timeit.repeat(lambda: NUMPY_KERNELS[name](*args), number=1, repeat=repeat))
            t_nb = min(timeit.repeat(lambda: LOOP_KERNELS[name](*args), number=1, repeat=repeat))
            print(f"{name:<16} {f'{rows}x{width}':>12} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} "
                  f"{t_np / t_nb:7.2f}x")


def one_epoch():
    from idiomadv import data as D
    from idiomadv.model import ModelConfig, init_model
    from idiomadv.training import AdvConfig, TrainConfig, train_run

    splits = D.generate_synthetic_dataset(7)
    vocab = D.build_vocab(D.training_pool(splits, "zero_shot"), 2048)
    model = init_model(ModelConfig(vocab_size=len(vocab)), vocab)
    # warm-up pass so JIT compilation is not timed
    train_run(model, splits, TrainConfig(max_epochs=1, method="smart"), AdvConfig(), vocab)
    model = init_model(ModelConfig(vocab_size=len(vocab)), vocab)
    start = time.perf_counter()
    train_run(model, splits, TrainConfig(max_epochs=1, method="smart"), AdvConfig(), vocab)
    print(f"{backend()} {time.perf_counter() - start:.3f}")


def bench_training():
    print("\none SMART epoch on the default synthetic corpus")
    for disable in ("0", "1"):
        env = dict(os.environ, IDIOMADV_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, __file__, "--_epoch"], env=env, check=True,
                             capture_output=True, text=True).stdout.split()
        print(f"  {out[0]:<6} {float(out[1]):.2f}s")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--train", action="store_true", help="also time a training epoch per backend")
    p.add_argument("--_epoch", action="store_true", help=argparse.SUPPRESS)
    args = p.parse_args()
    if args._epoch:
        one_epoch()
        return
    bench_kernels(args.repeat)
    if args.train:
        bench_training()


if __name__ == "__main__":
    main()
