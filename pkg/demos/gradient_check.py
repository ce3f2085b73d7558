"""Finite-difference check of every differentiable operator and of the full model loss.

    python3 demos/gradient_check.py [--quick]
"""

import argparse
import time

from ics.checks import gradient_suite

ap = argparse.ArgumentParser()
ap.add_argument("--quick", action="store_true", help="skip the end-to-end check")
args = ap.parse_args()

t0 = time.perf_counter()
res = gradient_suite(seed=0, end_to_end=not args.quick)
width = max(map(len, res))
for name, (err, tol) in res.items():
    print(f"{name:<{width}}  {err:9.2e}  (tol {tol:.0e})  {'ok' if err < tol else 'FAIL'}")
print(f"{sum(e < t for e, t in res.values())}/{len(res)} passed in {time.perf_counter() - t0:.1f}s")
