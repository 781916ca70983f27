"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly, so the comparison works regardless of
which one the package selected at import time.
"""
import argparse
import timeit

import numpy as np

from densecorr.kernels import _fallback

try:
    from densecorr.kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    # a 32x32 feature grid at the default 1% candidate fraction
    scores = rng.normal(size=(1024, 1024))
    labels = rng.integers(0, 4, (256, 256)).astype(np.int32)
    # smoother label map, closer to a quantized photo
    blocky = np.kron(rng.integers(0, 8, (32, 32)), np.ones((8, 8))).astype(np.int32)
    values = rng.random((256, 256, 2))
    points = rng.uniform(0, 255, (20000, 2))
    return {
        "topk_indices 1024x1024, n=11": lambda m: m.topk_indices(scores, 11),
        "label_components 256x256 noisy": lambda m: m.label_components(labels),
        "label_components 256x256 blocky": lambda m: m.label_components(blocky),
        "sample_points 20k on 256x256x2": lambda m: m.sample_points(values, points),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = [("python", _fallback)] + ([("cython", _ckernels)] if _ckernels else [])
    if _ckernels is None:
        print("compiled kernels are not built; timing the fallback only")
    rng = np.random.default_rng(0)
    print(f"{'case':34s}" + "".join(f"{name:>12s}" for name, _ in backends) + ("     speedup" if _ckernels else ""))
    for label, fn in cases(rng).items():
        times = [min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) for _, mod in backends]
        row = f"{label:34s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
