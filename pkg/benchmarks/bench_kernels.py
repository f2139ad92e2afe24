"""Compare the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--end-to-end]

Kernel timings call both implementations directly in one process.  The
end-to-end timing trains a few epochs in two subprocesses, one with
UMI_DISABLE_NUMBA=1, so every kernel call site sees the other backend.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from umi import kernels

# row-major (rows, width) shapes seen during desk-scale training (batch 64,
# 4 heads, 8 tokens, width 64); callers flatten leading axes the same way
SHAPES = {
    "softmax": (64 * 4 * 8, 8),
    "log_softmax": (64, 8),
    "layer_norm": (64 * 8, 64),
    "gelu": (64 * 8, 128),
}


def cases(rng):
    att = rng.normal(size=SHAPES["softmax"])
    y = kernels.numpy_impl.softmax_fwd(att)
    logits = rng.normal(size=SHAPES["log_softmax"])
    ly = kernels.numpy_impl.log_softmax_fwd(logits)
    x = rng.normal(size=SHAPES["layer_norm"]).astype(np.float32)
    gain, bias = np.ones(64, np.float32), np.zeros(64, np.float32)
    _, xhat, rstd = kernels.numpy_impl.layer_norm_fwd(x, gain, bias, 1e-5)
    h = rng.normal(size=SHAPES["gelu"]).astype(np.float32)
    return {
        "softmax_fwd": (att,),
        "softmax_bwd": (y, att),
        "log_softmax_fwd": (logits,),
        "log_softmax_bwd": (ly, logits),
        "layer_norm_fwd": (x, gain, bias, 1e-5),
        "layer_norm_bwd": (x, xhat, rstd, gain),
        "gelu_fwd": (h,),
        "gelu_bwd": (h, h),
    }


def time_kernels(repeat: int) -> None:
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, args in cases(rng).items():
        fast, slow = getattr(kernels.numba_impl, name), getattr(kernels.numpy_impl, name)
        fast(*args)  # compile outside the timer
        t_np = min(timeit.repeat(lambda: slow(*args), number=50, repeat=repeat)) / 50 * 1e6
        t_nb = min(timeit.repeat(lambda: fast(*args), number=50, repeat=repeat)) / 50 * 1e6
        print(f"{name:<18}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>10.2f}")


TRAIN_SNIPPET = """
import time
from umi import kernels
from umi.benchgen import BenchmarkConfig, default_split_spec, generate, split
from umi.harness.config import Config
from umi.harness.train import pretrain_unimodal, train
bc = BenchmarkConfig(n_train=600, n_val=10, n_test=10)
spec = default_split_spec(bc)
parts = split(generate(bc), spec)
tr = [parts[n] for n in spec.train_names]
cfg = Config(epochs=3, pretrain_epochs=2)
pre = pretrain_unimodal(tr, cfg)
train(tr, cfg.with_(epochs=1), pre)  # warm-up, includes jit compilation
t = time.perf_counter()
train(tr, cfg, pre)
print(kernels.BACKEND, time.perf_counter() - t)
"""


def time_training() -> None:
    for disable in ("0", "1"):
        env = dict(os.environ, UMI_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, check=True,
                             capture_output=True, text=True).stdout.split()
        print(f"training, 3 epochs on 600 samples, {out[0]} backend: {float(out[1]):.2f} s")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()
    time_kernels(args.repeat)
    if args.end_to_end:
        time_training()


if __name__ == "__main__":
    main()
