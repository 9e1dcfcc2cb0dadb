"""Time the compiled and numpy SOD batch kernels on training-sized inputs.

Run with ``python benchmarks/bench_kernels.py``. Both backends are checked
for agreement before timing.
"""

import argparse
import timeit

import numpy as np

from atlasground.kernels import get_backend


def make_batch(rng, batch, organs, points):
    pred = rng.uniform(-1, 1, size=(batch, 3))
    pts = rng.uniform(-1, 1, size=(batch, organs, points, 3))
    n_organs = rng.integers(1, organs + 1, size=batch).astype(np.int64)
    return pred, pts, n_organs


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    try:
        backends = {"cython": get_backend("cython"), "python": get_backend("python")}
    except ImportError:
        print("compiled extension not built; only the numpy backend is available")
        return 1

    rng = np.random.default_rng(0)
    print(f"{'batch':>5} {'organs':>6} {'points':>6} {'cython ms':>10} {'python ms':>10} {'speedup':>8}")
    for batch, organs, points in ((1, 1, 100), (32, 3, 100), (32, 3, 1000), (128, 3, 1000)):
        pred, pts, n_organs = make_batch(rng, batch, organs, points)
        ref = backends["python"].sod_batch(pred, pts, n_organs, 0.1, 1.0)
        got = backends["cython"].sod_batch(pred, pts, n_organs, 0.1, 1.0)
        for a, b in zip(ref, got):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
        ms = {}
        for name, mod in backends.items():
            n = max(1, int(2000 / (batch * organs * points / 100)))
            t = min(timeit.repeat(lambda: mod.sod_batch(pred, pts, n_organs, 0.1, 1.0), number=n, repeat=args.repeat))
            ms[name] = 1e3 * t / n
        print(f"{batch:>5} {organs:>6} {points:>6} {ms['cython']:>10.3f} {ms['python']:>10.3f} {ms['python'] / ms['cython']:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
