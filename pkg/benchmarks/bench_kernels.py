"""Benchmark the compiled kernel core against the pure-numpy fallback.

Times each hot kernel on model-scale shapes, plus one full training step
per backend. Run after an editable install:

    python3 benchmarks/bench_kernels.py
"""

import os
import subprocess
import sys
import time

import numpy as np


def bench(fn, repeat=200):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def kernel_benchmarks(mod):
    rng = np.random.default_rng(0)
    b, n, d, k = 32, 17, 64, 3
    x = rng.normal(size=(b, n, d))
    taps = rng.normal(size=(k, d))
    dy = rng.normal(size=(b, n, d))
    logits = rng.normal(size=(b * 4 * n, n))
    mask = (rng.random(size=logits.shape) < 0.7).astype(np.uint8)
    mask[:, 0] = 1
    w = mod.masked_softmax(logits, mask)
    rows2d = rng.normal(size=(b * n, d))
    gain = rng.normal(size=d)
    bias = rng.normal(size=d)
    ids = rng.integers(0, 20, size=b * n).astype(np.int64)
    table = np.zeros((20, d))
    _, xhat, rstd = mod.layer_norm_forward(rows2d, gain, bias, 1e-6)

    return {
        "dw_conv1d_forward": lambda: mod.dw_conv1d_forward(x, taps, 2, 2),
        "dw_conv1d_backward": lambda: mod.dw_conv1d_backward(x, taps, dy, 2, 2),
        "masked_softmax": lambda: mod.masked_softmax(logits, mask),
        "softmax_backward": lambda: mod.softmax_backward(w, logits),
        "layer_norm_forward": lambda: mod.layer_norm_forward(rows2d, gain, bias, 1e-6),
        "layer_norm_backward": lambda: mod.layer_norm_backward(xhat, rstd, gain, rows2d),
        "scatter_add_rows": lambda: mod.scatter_add_rows(table, ids, rows2d),
    }


def time_train_step(backend):
    """One fresh process per backend (the kernel module binds at import)."""
    code = (
        "import time\n"
        "from posenet.data import TaskSpec\n"
        "from posenet.model import ModelConfig, init_parameters, bind\n"
        "from posenet.training import TrainConfig, AdamState, train_step\n"
        "cfg = ModelConfig(vocab_size=20, depth=64, max_length=32)\n"
        "params = init_parameters(cfg, seed=0)\n"
        "task = TaskSpec(kind='copy', symbols=16, min_len=4, max_len=16, seed=1)\n"
        "tcfg = TrainConfig(train_steps=1, batch_size=32, seed=0)\n"
        "bound = bind(cfg, params)\n"
        "state = AdamState.zeros_for(params)\n"
        "for s in range(1, 4): train_step(cfg, bound, params, task, tcfg, state, s)\n"
        "t0 = time.perf_counter()\n"
        "for s in range(4, 14): train_step(cfg, bound, params, task, tcfg, state, s)\n"
        "print((time.perf_counter() - t0) / 10)\n"
    )
    env = dict(os.environ, POSENET_KERNELS=backend)
    out = subprocess.run(
        [sys.executable, "-c", code], capture_output=True, text=True, env=env
    )
    if out.returncode != 0:
        return None
    return float(out.stdout.strip())


def main():
    from posenet.kernels import _pykernels

    try:
        from posenet.kernels import _ckernels
    except ImportError:
        _ckernels = None

    print(f"{'kernel':<22} {'numpy':>10} {'compiled':>10} {'speedup':>8}")
    py_cases = kernel_benchmarks(_pykernels)
    c_cases = kernel_benchmarks(_ckernels) if _ckernels else {}
    for name, py_fn in py_cases.items():
        t_py = bench(py_fn)
        if _ckernels:
            t_c = bench(c_cases[name])
            print(f"{name:<22} {t_py * 1e6:>8.1f}us {t_c * 1e6:>8.1f}us "
                  f"{t_py / t_c:>7.1f}x")
        else:
            print(f"{name:<22} {t_py * 1e6:>8.1f}us {'n/a':>10} {'':>8}")

    print()
    t_py = time_train_step("python")
    print(f"train step (numpy backend):    {t_py * 1e3:8.1f} ms")
    if _ckernels:
        t_c = time_train_step("compiled")
        print(f"train step (compiled backend): {t_c * 1e3:8.1f} ms "
              f"({t_py / t_c:.2f}x)")


if __name__ == "__main__":
    main()
