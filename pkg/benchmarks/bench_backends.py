"""Time the compiled and numpy kernels on the same paged pool.

    python3 benchmarks/bench_backends.py [--context 32768] [--k 655] [--repeats 10]

Prints one markdown row per (kernel, backend) with the median wall time and
the compiled/python speedup.
"""
import argparse
import statistics
import time

import numpy as np

from sparsedecode.kernels import backends


def median_ms(fn, repeats):
    fn()
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(out)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--context", type=int, default=32768)
    ap.add_argument("--head-dim", type=int, default=128)
    ap.add_argument("--kv-heads", type=int, default=8)
    ap.add_argument("--group", type=int, default=4)
    ap.add_argument("--page-size", type=int, default=16)
    ap.add_argument("--k", type=int, default=None, help="rows per sparse attend (default N/50)")
    ap.add_argument("--dtype", choices=("f16", "f32"), default="f16")
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    n, D, H, ps = args.context, args.head_dim, args.kv_heads, args.page_size
    dtype = np.float16 if args.dtype == "f16" else np.float32
    pages = -(-n // ps)
    k_pool = (rng.standard_normal((pages, ps, H, D), dtype=np.float32) / np.sqrt(D)).astype(dtype)
    v_pool = rng.standard_normal((pages, ps, H, D), dtype=np.float32).astype(dtype)
    page_ids = rng.permutation(pages).astype(np.int64)
    q = rng.standard_normal((args.group, D)) / np.sqrt(D)
    scale = 1.0 / np.sqrt(D)
    k = args.k or max(1, n // 50)
    full = np.arange(n, dtype=np.int64)
    sparse = np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64)

    cases = {
        f"attend dense (N={n}, g={args.group})": lambda m: m.attend(k_pool, v_pool, page_ids, ps, 0, full, None, q, scale),
        f"attend sparse (k={k}, g=1)": lambda m: m.attend(k_pool, v_pool, page_ids, ps, 0, sparse, None, q[:1], scale),
        f"scores (N={n}, g={args.group})": lambda m: m.scores(k_pool, page_ids, ps, 0, n, q, scale),
        f"gather (k={k})": lambda m: m.gather(k_pool, v_pool, page_ids, ps, 0, sparse),
    }
    impls = backends()
    print(f"backends available: {', '.join(impls)}")
    print("| kernel | backend | median ms | compiled speedup |")
    print("|---|---|---:|---:|")
    for name, fn in cases.items():
        times = {b: median_ms(lambda: fn(m), args.repeats) for b, m in impls.items()}
        for b, t in times.items():
            sp = f"{times['python'] / times['compiled']:.2f}x" if b == "compiled" else ""
            print(f"| {name} | {b} | {t:.3f} | {sp} |")


if __name__ == "__main__":
    main()
