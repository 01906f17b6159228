"""Compare the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Reports per-call time of the rank-one inverse update (policy dims 5 and 1009)
and of one traffic decision epoch, plus the maximum output discrepancy.
"""

import argparse
import time
from unittest import mock

import numpy as np

from natural_marl import _kernels, env_traffic


def best_of(fn, repeat, number):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        best = min(best, (time.perf_counter() - t0) / number)
    return best


def bench_sm(m, repeat):
    rng = np.random.default_rng(m)
    a = rng.normal(size=(m, m))
    g_inv = np.linalg.inv(a @ a.T / m + np.eye(m))
    psi = rng.normal(size=m) / np.sqrt(m)
    x_nb, x_py = g_inv.copy(), g_inv.copy()
    _kernels.sm_update(x_nb, psi, 0.1)  # compile
    _kernels.sm_update_py(x_py, psi, 0.1)
    err = float(np.abs(x_nb - x_py).max())
    number = 2000 if m < 100 else 20
    t_nb = best_of(lambda: _kernels.sm_update(g_inv.copy(), psi, 0.01), repeat, number)
    t_py = best_of(lambda: _kernels.sm_update_py(g_inv.copy(), psi, 0.01), repeat, number)
    return t_nb, t_py, err


def _epochs(kernel, n_epochs, seed=0):
    net = env_traffic.TrafficNet()
    with mock.patch.object(_kernels, "simulate_epoch", kernel):
        sim = net.simulator(np.random.default_rng(seed))
        sim.reset()
        rng = np.random.default_rng(seed + 1)
        out = []
        t0 = time.perf_counter()
        for _ in range(n_epochs):
            obs, r = sim.step(rng.integers(0, 3, size=4))
            out.append(np.concatenate([obs, r]))
        return (time.perf_counter() - t0) / n_epochs, np.array(out)


def bench_epoch(n_epochs):
    _epochs(_kernels.simulate_epoch, 2)  # compile
    t_nb, a = _epochs(_kernels.simulate_epoch, n_epochs)
    t_py, b = _epochs(_kernels.simulate_epoch_py, n_epochs)
    return t_nb, t_py, float(np.abs(a - b).max())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=50)
    args = ap.parse_args()
    print(f"numba active: {_kernels.HAVE_NUMBA}")
    print(f"{'kernel':<22} {'numba':>12} {'fallback':>12} {'speedup':>8} {'max diff':>10}")
    for m in (5, 1009):
        t_nb, t_py, err = bench_sm(m, args.repeat)
        print(f"{'sm_update m=' + str(m):<22} {t_nb * 1e6:>10.1f}us {t_py * 1e6:>10.1f}us {t_py / t_nb:>8.1f} "
              f"{err:>10.1e}")
    t_nb, t_py, err = bench_epoch(args.epochs)
    print(f"{'traffic epoch':<22} {t_nb * 1e6:>10.1f}us {t_py * 1e6:>10.1f}us {t_py / t_nb:>8.1f} {err:>10.1e}")


if __name__ == "__main__":
    main()
