"""Compare the compiled kernels with the pure-Python fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--csv PATH]

Both backends are imported side by side, whatever TASKDB_PURE_PYTHON says,
and each kernel is timed on the same inputs. Results are also checked for
agreement so a speedup never hides a divergence.
"""

import argparse
import sys

import numpy as np

from taskdb import kernels
from taskdb.bench import bench_kernels


def check_agreement(seed: int = 0) -> list[str]:
    backends = kernels.available_backends()
    if "compiled" not in backends:
        return ["compiled backend unavailable; only the fallback was timed"]
    py, cy = backends["python"], backends["compiled"]
    rng = np.random.default_rng(seed)
    W, b, X = rng.normal(size=(16, 40)), rng.normal(size=16), rng.normal(size=(30, 40))
    data = b"the quick brown fox jumps over the lazy dog"
    notes = []
    d_aff = float(np.max(np.abs(py.affine_rows(W, b, X) - cy.affine_rows(W, b, X))))
    notes.append(f"affine_rows max abs difference: {d_aff:.3g}")
    same_hash = np.array_equal(py.hash_features(data, 32, 7),
                               cy.hash_features(np.frombuffer(data, dtype=np.uint8), 32, 7))
    notes.append(f"hash_features identical: {same_hash}")
    return notes


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", help="also write the timings as CSV")
    args = ap.parse_args(argv)

    rep = bench_kernels(repeats=args.repeats, seed=args.seed)
    rep.notes += check_agreement(args.seed)
    times = {(k, be): ms for k, be, ms in rep.rows}
    for k in sorted({k for k, _ in times}):
        if (k, "compiled") in times:
            rep.notes.append(f"{k}: fallback/compiled = {times[(k, 'python')] / times[(k, 'compiled')]:.1f}x")
    sys.stdout.write(rep.to_text())
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(rep.to_csv())
    return 0


if __name__ == "__main__":
    sys.exit(main())
