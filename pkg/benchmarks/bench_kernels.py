"""Compiled vs NumPy kernels: per-kernel timings and one end-to-end rate-training round.

    python benchmarks/bench_kernels.py [--quick] [--json out.json]

Shapes follow the desk-scale runs (batch 20, hidden width 64, 10 classes).
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from atpfl import kernels


def kernel_cases(B, F, C, D, d, rng):
    x = rng.standard_normal((B, F))
    gamma, beta = rng.uniform(0.5, 1.5, F), rng.standard_normal(F)
    mean, var = rng.standard_normal(F), rng.uniform(0.5, 2, F)
    dy = rng.standard_normal((B, F))
    _, xhat, _, _, inv = kernels.get_backend("python").bn_forward_train(x, gamma, beta, 1e-5)
    logits = rng.standard_normal((B, C)) * 3
    labels = rng.integers(0, C, B).astype(np.int64)
    lengths = np.full(d, D // d, dtype=np.int64)
    offsets = np.arange(d, dtype=np.int64) * (D // d)
    n = int(lengths.sum())
    h, g, w = rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal(n)
    alpha = rng.standard_normal(d)
    return {
        "bn_forward_train": (x, gamma, beta, 1e-5),
        "bn_forward_frozen": (x, mean, var, gamma, beta, 1e-5),
        "bn_backward_train": (dy, xhat, gamma, inv),
        "bn_backward_frozen": (dy, xhat, gamma, inv),
        "log_softmax": (logits,),
        "entropy_grad": (logits,),
        "ce_grad": (logits, labels),
        "segment_dot": (h, g, offsets, lengths),
        "scatter_axpy": (w, alpha, h, offsets, lengths),
    }


def time_call(fn, args, repeat, number):
    return min(timeit.repeat(lambda: fn(*args), repeat=repeat, number=number)) / number


_ROUND = """
import time, numpy as np
from atpfl import kernels
from atpfl.adaptation import AdaptationRates
from atpfl.fedsim import ShiftConfig, client_train_round, fedavg_pretrain, sample_population
pop = sample_population(ShiftConfig(kind="hybrid"), 4, 1, seed=0)
w, _ = fedavg_pretrain(pop.sources, (64,), 2, 4, 0.05, 20)
c = pop.sources[0]
r = AdaptationRates.zeros(w.manifest)
best = 1e9
for _ in range({reps}):
    t = time.perf_counter()
    client_train_round(c.X, c.y, w, r, 0.1, batch_size=20)
    best = min(best, time.perf_counter() - t)
print(kernels.BACKEND, best)
"""


def end_to_end(backend, reps):
    env = dict(os.environ)
    env["ATPFL_PURE_PYTHON"] = "1" if backend == "python" else "0"
    out = subprocess.run([sys.executable, "-c", _ROUND.format(reps=reps)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true", help="fewer repetitions")
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    repeat, number, reps = (3, 200, 2) if args.quick else (7, 2000, 5)

    backends = kernels.available_backends()
    cases = kernel_cases(20, 64, 10, 4096, 16, np.random.default_rng(0))
    rows = []
    print(f"{'kernel':<20s}" + "".join(f"{b + ' (us)':>16s}" for b in backends) + f"{'speedup':>10s}")
    for name, cargs in cases.items():
        t = {b: time_call(getattr(kernels.get_backend(b), name), cargs, repeat, number) * 1e6
             for b in backends}
        speed = t["python"] / t["cython"] if "cython" in t else float("nan")
        rows.append({"kernel": name, **{f"{b}_us": v for b, v in t.items()}, "speedup": speed})
        print(f"{name:<20s}" + "".join(f"{t[b]:16.2f}" for b in backends) + f"{speed:10.2f}")

    e2e = {}
    for b in backends:
        active, sec = end_to_end(b, reps)
        e2e[active] = sec
    print("\nend-to-end client rate-training round (160 samples, batch 20):")
    for b, sec in e2e.items():
        print(f"  {b:<8s} {1e3 * sec:8.2f} ms")
    if "cython" in e2e and "python" in e2e:
        print(f"  speedup  {e2e['python'] / e2e['cython']:8.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "end_to_end_s": e2e}, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
