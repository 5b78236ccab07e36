"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
import argparse
import json
import timeit

import numpy as np

from kflow import _pykernels
from kflow.kernels import compiled_backend

SEED = 20261014


def cases(rng):
    m = 9
    mats = rng.dirichlet(np.ones(m), size=(256, m))
    counts = rng.poisson(4.0, size=4096)
    choices = rng.integers(0, 2, size=counts.sum())
    jumps = rng.dirichlet(np.ones(2), size=(2, 2))
    K3 = rng.dirichlet(np.ones(3), size=(4096, 3))
    mu = rng.dirichlet(np.ones(17), size=(512, 9))
    idx = np.sort(rng.integers(0, 9, size=(17, 6)), axis=1)
    coords = np.linspace(0, 1, 17)
    scount = rng.integers(0, 8, size=4096)
    coins = rng.choice(np.array([-1, 1]), size=(scount.sum(), 8))
    return {
        "chain_product(256 x 9x9)": ("chain_product", (mats,)),
        "poisson_products(4096, m=2)": ("poisson_products", (counts, choices, jumps)),
        "tensor_moments(4096, m=3, n=3)": ("tensor_moments", (K3, 3)),
        "select_rows(512 x 17, J=6, tol=0.05)": ("select_rows", (mu, idx, coords, 0.05, 1)),
        "compose_site_maps(4096, m=8)": ("compose_site_maps", (scount, coins, 8)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(SEED)
    rows = []
    for label, (name, call_args) in cases(rng).items():
        py = getattr(_pykernels, name)
        t_py = min(timeit.repeat(lambda: py(*call_args), number=1, repeat=args.repeat))
        t_c = None
        if compiled_backend is not None:
            c = getattr(compiled_backend, name)
            t_c = min(timeit.repeat(lambda: c(*call_args), number=1, repeat=args.repeat))
        rows.append({"case": label, "python_s": t_py, "compiled_s": t_c,
                     "speedup": None if t_c is None else t_py / t_c})
    print(f"{'case':40s} {'python':>10s} {'compiled':>10s} {'speedup':>8s}")
    for r in rows:
        c = "n/a" if r["compiled_s"] is None else f"{r['compiled_s'] * 1e3:9.2f}ms"
        s = "n/a" if r["speedup"] is None else f"{r['speedup']:7.1f}x"
        print(f"{r['case']:40s} {r['python_s'] * 1e3:8.2f}ms {c:>10s} {s:>8s}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
