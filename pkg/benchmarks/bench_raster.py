"""Forward + backward rasterization timings, numba kernels vs the numpy fallback.

    python3 benchmarks/bench_raster.py --sizes 200 1000 4000 --res 64 128
"""

import argparse
import time

import numpy as np

from fifsplat.camera import Camera
from fifsplat.core import GaussianSet, GlobalThresholds, logit
from fifsplat.render import Upstream, rasterize_backward, rasterize_forward


def random_scene(n, rng):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(
        rng.uniform(-1, 1, (n, 3)) * [1, 1, 0.3], rng.uniform(0.02, 0.08, (n, 2)), q,
        logit(rng.uniform(0.2, 0.95, n)), rng.uniform(0, 1, (n, 3)), rng.uniform(0, 0.2, n))


def timed(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", type=int, nargs="+", default=[200, 1000, 4000])
    ap.add_argument("--res", type=int, nargs="+", default=[64, 128])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    th = GlobalThresholds(0.01)
    print(f"{'N':>6} {'res':>5} {'backend':>7} {'entries':>9} {'fwd ms':>9} {'bwd ms':>9}")
    for res in args.res:
        cam = Camera.look_at([0, -3, 2], [0, 0, 0], [0, 0, 1], res, res, 45)
        for n in args.sizes:
            g = random_scene(n, rng)
            for backend in ("numba", "numpy"):
                buf = rasterize_forward(g, th, cam, backend=backend)  # warm-up / JIT
                up = Upstream(color=rng.normal(size=buf.color.shape))
                rasterize_backward(g, th, cam, buf, up, backend=backend)
                tf = timed(lambda: rasterize_forward(g, th, cam, backend=backend), args.repeat)
                tb = timed(lambda: rasterize_backward(g, th, cam, buf, up, backend=backend), args.repeat)
                print(f"{n:>6} {res:>5} {backend:>7} {buf.n_entries:>9} {tf * 1e3:>9.2f} {tb * 1e3:>9.2f}")


if __name__ == "__main__":
    main()
