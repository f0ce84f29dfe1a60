"""Timings for the compiled kernels against the numpy reference.

Micro section calls both implementations directly on training-shaped
inputs; macro section spawns one subprocess per backend (selected via
FOLEY_ADAPTER_KERNELS) and times real backbone training steps.

Run:  python3 benchmarks/bench_kernels.py [--repeats N] [--skip-macro]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from foley_adapter.kernels import _numpy_kernels as np_impl

try:
    from foley_adapter.kernels import _ckernels  # noqa: F401
    import foley_adapter.kernels as pkg_kernels
    HAVE_CYTHON = pkg_kernels.backend_name() == "cython"
except ImportError:
    pkg_kernels = None
    HAVE_CYTHON = False

ROWS = 16 * 216       # one training minibatch flattened per frame
WIDTH = 32
MLP_WIDTH = 128
ATTN_ROWS = 16 * 4 * 216


def _cases(rng):
    x = rng.standard_normal((ROWS, WIDTH), dtype=np.float32)
    gain = rng.standard_normal(WIDTH).astype(np.float32)
    bias = rng.standard_normal(WIDTH).astype(np.float32)
    dy = rng.standard_normal((ROWS, WIDTH), dtype=np.float32)
    _, mean, rstd = np_impl.layer_norm_forward(x, gain, bias, 1e-5)
    logits = rng.standard_normal((ATTN_ROWS, 216), dtype=np.float32)
    probs = np_impl.softmax_rows(logits)
    dp = rng.standard_normal(probs.shape).astype(np.float32)
    act = rng.standard_normal((ROWS, MLP_WIDTH), dtype=np.float32)
    dact = rng.standard_normal((ROWS, MLP_WIDTH), dtype=np.float32)
    uni = rng.random((ROWS, WIDTH))  # float64, as the dropout op draws it
    n_params = 100_000
    return [
        ("layer_norm_forward",
         lambda impl: impl.layer_norm_forward(x, gain, bias, 1e-5)),
        ("layer_norm_backward",
         lambda impl: impl.layer_norm_backward(dy, x, mean, rstd, gain)),
        ("softmax_rows", lambda impl: impl.softmax_rows(logits)),
        ("softmax_rows_backward",
         lambda impl: impl.softmax_rows_backward(dp, probs)),
        ("relu_forward", lambda impl: impl.relu_forward(act)),
        ("relu_backward", lambda impl: impl.relu_backward(dact, act)),
        ("gelu_forward", lambda impl: impl.gelu_forward(act)),
        ("gelu_backward", lambda impl: impl.gelu_backward(dact, act)),
        ("dropout_apply", lambda impl: impl.dropout_apply(x, uni, 0.1)),
        ("adamw_update", _adamw_case(rng, n_params)),
    ]


def _adamw_case(rng, n):
    param = rng.standard_normal(n).astype(np.float32)
    grad = rng.standard_normal(n).astype(np.float32)

    def run(impl):
        impl.adamw_update(param.copy(), grad, np.zeros(n, np.float32),
                          np.zeros(n, np.float32), 1, 1e-3, 0.9, 0.999,
                          1e-8, 1e-2)

    return run


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def micro(repeats):
    rng = np.random.default_rng(0)
    print("%-24s %12s %12s %9s" % ("kernel", "numpy (ms)", "cython (ms)",
                                   "speedup"))
    for name, call in _cases(rng):
        t_np = _best_of(lambda: call(np_impl), repeats) * 1e3
        if HAVE_CYTHON:
            t_cy = _best_of(lambda: call(pkg_kernels), repeats) * 1e3
            print("%-24s %12.3f %12.3f %8.2fx" % (name, t_np, t_cy,
                                                  t_np / t_cy))
        else:
            print("%-24s %12.3f %12s %9s" % (name, t_np, "n/a", "n/a"))


MACRO_SNIPPET = r"""
import time
import numpy as np
from foley_adapter import kernels, synth, training

synth.make_dataset(64, 0.0, 5, {tmp!r})
ds = synth.load_dataset({tmp!r})
cfg = training.TrainConfig("backbone", steps=2, seed=0)
training.pretrain_backbone(ds, cfg)  # warm-up
cfg = training.TrainConfig("backbone", steps={steps}, seed=0)
t0 = time.monotonic()
training.pretrain_backbone(ds, cfg)
dt = time.monotonic() - t0
print("%s %.4f" % (kernels.backend_name(), dt / {steps}))
"""


def macro(steps=15):
    import tempfile

    backends = ["numpy"] + (["cython"] if HAVE_CYTHON else [])
    results = {}
    for backend in backends:
        with tempfile.TemporaryDirectory() as tmp:
            env = dict(os.environ, FOLEY_ADAPTER_KERNELS=backend)
            code = MACRO_SNIPPET.format(tmp=os.path.join(tmp, "ds"),
                                        steps=steps)
            out = subprocess.run([sys.executable, "-c", code], env=env,
                                 capture_output=True, text=True, check=True)
            name, per_step = out.stdout.split()
            assert name == backend, "backend %r did not activate" % backend
            results[backend] = float(per_step)
            print("backbone train step [%s]: %.3f s" % (backend,
                                                        results[backend]))
    if len(results) == 2:
        print("macro speedup: %.2fx" % (results["numpy"] / results["cython"]))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30,
                    help="best-of repeats per micro kernel")
    ap.add_argument("--skip-macro", action="store_true",
                    help="micro benchmarks only")
    args = ap.parse_args()
    if not HAVE_CYTHON:
        print("compiled extension unavailable; numpy numbers only\n")
    micro(args.repeats)
    if not args.skip_macro:
        print()
        macro()


if __name__ == "__main__":
    main()
