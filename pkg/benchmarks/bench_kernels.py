"""Compare the numba-compiled kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel is run once to trigger compilation, then timed ``repeat`` times;
the best wall time is reported. Outputs of both paths are checked for
agreement before timing.
"""

import argparse
import time

import numpy as np

from lexforge import kernels as K


def best_of(fn, args, repeat):
    fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    x = rng.standard_normal((64, 130, 512)).astype(np.float32)
    y, cdf = K.gelu_forward_numpy(x)
    dy = rng.standard_normal(x.shape).astype(np.float32)
    em = rng.standard_normal((128, 7))
    tr = rng.standard_normal((7, 7))
    st, en = rng.standard_normal(7), rng.standard_normal(7)
    ranks = np.arange(2, 26, 2, dtype=np.int64)  # n = 12
    off = np.cumsum(rng.integers(1, 8, size=(20000, 2)), axis=0).astype(np.int64)
    off[:, 1] = off[:, 0] + 3
    spans = np.sort(rng.integers(0, int(off[-1, 1]), size=(40, 2)), axis=1).astype(np.int64)
    return [
        ("gelu_forward", K.gelu_forward_loops, K.gelu_forward_numpy, (x,)),
        ("gelu_backward", K.gelu_backward_loops, K.gelu_backward_numpy, (dy, x, cdf)),
        ("crf_forward", K.crf_forward_loops, K.crf_forward_numpy, (em, tr, st, en)),
        ("crf_backward", K.crf_backward_loops, K.crf_backward_numpy, (em, tr, en)),
        ("crf_viterbi", K.crf_viterbi_loops, K.crf_viterbi_numpy, (em, tr, st, en)),
        ("signed_rank_null", K.signed_rank_null_loops, K.signed_rank_null_numpy, (ranks,)),
        ("span_flags", K.span_flags_loops, K.span_flags_numpy, (off, spans)),
    ]


def agree(a, b):
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), rtol=1e-5, atol=1e-6)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K._accel.HAVE_NUMBA:
        print("numba is not importable; only the numpy path can run")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'ratio':>8}  agree")
    for name, fast, slow, a in cases(rng):
        ok = agree(fast(*a), slow(*a))
        tf, ts = best_of(fast, a, args.repeat), best_of(slow, a, args.repeat)
        print(f"{name:<18}{tf * 1e3:>10.2f}{ts * 1e3:>10.2f}{ts / tf:>8.1f}  {'yes' if ok else 'NO'}")


if __name__ == "__main__":
    main()
