"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py --videos 50 --frames 100 --objects 19
"""
import argparse
import time

import numpy as np

from depthrisk import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--videos", type=int, default=50)
    ap.add_argument("--frames", type=int, default=100)
    ap.add_argument("--objects", type=int, default=19)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    pts = rng.uniform(0, 200, (args.videos, args.frames, args.objects, 3))
    mask = rng.random((args.videos, args.frames, args.objects)) < 0.7
    scores = rng.random((args.videos * 20, args.frames))
    grid = np.round(np.arange(1, 100) / 100, 2)

    backends = ["python"] + (["compiled"] if kernels.BACKEND == "compiled" else [])
    if len(backends) == 1:
        print("compiled kernels not built; timing the fallback only")
    results = {}
    for b in backends:
        edge = best_of(lambda: [kernels.video_edge_weights(p, m, backend=b) for p, m in zip(pts, mask)],
                       args.repeat)
        cross = best_of(lambda: kernels.first_crossings(scores, grid, backend=b), args.repeat)
        results[b] = (edge, cross)
        print(f"{b:>9}  edge weights {edge * 1e3:9.1f} ms   first crossings {cross * 1e3:8.1f} ms")
    if len(results) == 2:
        (pe, pc), (ce, cc) = results["python"], results["compiled"]
        print(f"  speedup  edge weights {pe / ce:8.1f}x     first crossings {pc / cc:7.1f}x")
        a = kernels.video_edge_weights(pts[0], mask[0], backend="python")
        c = kernels.video_edge_weights(pts[0], mask[0], backend="compiled")
        print(f"max |python - compiled| {np.abs(a - c).max():.1e}")


if __name__ == "__main__":
    main()
