"""Numba vs pure-numpy timings for the hot kernels.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel is run once first so JIT compilation is not timed. Results of the
two paths are compared for equality before timing.
"""

import argparse
import time

import numpy as np

from evil_lab import _kernels as K


def _best(fn, args, repeat):
    fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    bits = rng.integers(0, 2, (100_000, 90), dtype=np.uint8)
    signs = np.where(rng.random((100_000, 90)) < 0.8, 1, -1).astype(np.int8)
    keys = rng.random((20_000, 90))
    budget = rng.integers(0, 11, 20_000).astype(np.int64)
    mask = (rng.random(166_000) < 0.4).astype(np.uint8)
    n = 166_000
    p, g, m, v = (rng.standard_normal(n) for _ in range(4))
    v = np.abs(v)
    active = rng.random(n) < 0.4
    adam = (p, g, m, v, active, 1e-3, 0.9, 0.999, 0.1, 0.001, 1e-8)
    return [
        ("count_nonpositive 100000x90", K.np_count_nonpositive, "_nb_count", (bits, signs)),
        ("budget_fill 20000x90", K.np_budget_fill, "_nb_fill", (keys, budget)),
        ("rle_encode 166000", K.np_rle_encode, "_nb_rle", (mask,)),
        ("adam_update 166000", K.np_adam_update, "_nb_adam", adam),
    ]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"numba available: {K.USING_NUMBA}")
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, np_fn, nb_name, fargs in cases(rng):
        t_np = _best(np_fn, fargs, args.repeat)
        if not K.USING_NUMBA:
            print(f"{name:32s} {t_np * 1e3:10.2f} {'-':>10s} {'-':>8s}")
            continue
        nb = getattr(K, nb_name)
        if nb_name == "_nb_adam":
            p, g, m, v, active, *rest = fargs
            nb_args = (p, g, m, v, active, True, *rest)
        else:
            nb_args = fargs
        a, b = np_fn(*fargs), nb(*nb_args)
        same = all(np.array_equal(x, y) for x, y in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        t_nb = _best(nb, nb_args, args.repeat)
        flag = "" if same else "  MISMATCH"
        print(f"{name:32s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:7.1f}x{flag}")


if __name__ == "__main__":
    main()
