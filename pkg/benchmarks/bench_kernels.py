"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from maskkv import _kernels_py, kernels
from maskkv.scoring import mask_attention

try:
    from maskkv import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    n_m, n = 64, 1088
    attn = mask_attention(rng.standard_normal((n_m, 32)), rng.standard_normal((n, 32))).A
    scores = rng.random(4096)
    a, b = rng.standard_normal((512, 256)), rng.standard_normal((512, 256))
    cols = np.arange(0, 1024, dtype=np.int64)
    return {
        "column_vote 64x1088": lambda m: m.column_vote(attn, 0, n_m, 1024),
        "mass_over 64x1024": lambda m: m.mass_over(attn, cols),
        "topk 4096 k=256": lambda m: m.topk_indices(scores, 256),
        "row_cosine 512x256": lambda m: m.row_cosine(a, b),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    impls = {"python": _kernels_py}
    if _ckernels is not None:
        impls["cython"] = _ckernels
    else:
        print("compiled kernels not built; timing the fallback only")
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'kernel':24s}" + "".join(f"{k:>12s}" for k in impls) + ("   speedup" if len(impls) > 1 else ""))
    for name, fn in cases(rng).items():
        times = {k: min(timeit.repeat(lambda: fn(m), number=args.repeat, repeat=3)) / args.repeat
                 for k, m in impls.items()}
        row = f"{name:24s}" + "".join(f"{t * 1e6:10.1f}us" for t in times.values())
        if len(times) > 1:
            row += f"   {times['python'] / times['cython']:6.2f}x"
        print(row)


if __name__ == "__main__":
    main()
