"""Time the numba and numpy implementations of each hot kernel.

    python3 benchmarks/bench_accel.py [--repeat 5]

Also checks that the two paths agree. The first numba call (compilation or
cache load) is reported separately.
"""

import argparse
import time

import numpy as np

from stgp import _accel


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    t_a = rng.uniform(0, 4000, 3000)
    t_b = rng.uniform(0, 4000, 180)
    s_a = rng.uniform(-20, 20, (3000, 2))
    s_b = rng.uniform(-20, 20, (180, 2))
    vals = rng.uniform(-1, 101, 1_000_000)
    edges = np.linspace(0, 100, 51)
    hist = rng.poisson(0.6, (6552, 36)).astype(float)  # three years of 4 h bins
    tt = np.repeat(np.arange(6552, 6552 + 42), 36)
    cc = np.tile(np.arange(36), 42)
    offs = np.array([y * 52 * 42 + w * 42 for y in range(3) for w in range(1, 5)])
    return {
        "periodic_unit 3000x180": (lambda f: f(t_a, t_b, 24.0, 8.0), "periodic_unit"),
        "rbf_unit 3000x180": (lambda f: f(s_a, s_b, 10.0), "rbf_unit"),
        "bin_index 1e6 values": (lambda f: f(vals, edges), "bin_index"),
        "medic_gather 1 week": (lambda f: f(hist, tt, cc, offs, 6552), "medic_gather"),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba not installed; nothing to compare")
        return
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<26} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'first call ms':>14}  agree")
    for name, (call, base) in cases(rng).items():
        f_np = getattr(_accel, base + "_numpy")
        f_nb = getattr(_accel, base + "_numba")
        t0 = time.perf_counter()
        r_nb = call(f_nb)
        first = time.perf_counter() - t0
        r_np = call(f_np)
        if isinstance(r_np, tuple):
            agree = all(np.array_equal(np.asarray(a), np.asarray(b)) for a, b in zip(r_np, r_nb))
        elif r_np.dtype.kind == "f":
            agree = bool(np.allclose(r_np, r_nb, rtol=1e-13, atol=0))
        else:
            agree = bool(np.array_equal(r_np, r_nb))
        t_np = _best(lambda: call(f_np), args.repeat)
        t_nb = _best(lambda: call(f_nb), args.repeat)
        print(f"{name:<26} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} {t_np / t_nb:>7.1f}x {1e3 * first:>14.1f}  {agree}")


if __name__ == "__main__":
    main()
