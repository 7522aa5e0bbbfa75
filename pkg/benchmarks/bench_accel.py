"""Compiled versus pure-numpy Monte Carlo tracer.

Runs the same configuration through both code paths, reports throughput,
and checks that the two agree statistically (they draw different random
streams, so agreement is within Monte Carlo error, not bitwise).

    python benchmarks/bench_accel.py [--photons N] [--repeat R]
"""

import argparse
import time

import numpy as np

from allphotons.diffusion import SceneGeometry
from allphotons.montecarlo import McConfig, trace


def _config(photons, seed):
    geo = SceneGeometry(d1=6.0, d2=6.0, nx=16, ny=16, nt=40)
    return McConfig(mu_s=10.0, g=0.9, mu_a=0.01, geometry=geo, photons=photons,
                    seed=seed, batch_size=min(photons, 20_000))


def _time(photons, use_numba, repeat):
    best, result = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = trace(_config(photons, seed=1), use_numba=use_numba)
        best = min(best, time.perf_counter() - t0)
    return best, result


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--photons", type=int, default=20_000)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)

    trace(_config(100, seed=0), use_numba=True)  # compile outside the timed region
    t_jit, r_jit = _time(args.photons, True, args.repeat)
    t_np, r_np = _time(args.photons, False, args.repeat)

    print(f"photons per run: {args.photons}")
    print(f"{'path':<8}{'seconds':>10}{'photons/s':>14}")
    for name, t in (("numba", t_jit), ("numpy", t_np)):
        print(f"{name:<8}{t:>10.3f}{args.photons / t:>14.0f}")
    print(f"speedup: {t_np / t_jit:.1f}x")

    for field in ("transmitted_weight", "reflected_weight", "absorbed_weight"):
        a = getattr(r_jit.counters, field) / args.photons
        b = getattr(r_np.counters, field) / args.photons
        print(f"{field:<20} numba {a:.5f}  numpy {b:.5f}")
    ha = r_jit.measurement.data.sum(axis=(0, 1))
    hb = r_np.measurement.data.sum(axis=(0, 1))
    peak = max(ha.max(), hb.max())
    if peak > 0:
        print(f"histogram max abs difference / peak: {np.abs(ha - hb).max() / peak:.3f}")


if __name__ == "__main__":
    main()
