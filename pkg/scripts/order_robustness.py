"""LBS and DBS (Min-Guar) plus Random under all four curriculum orders."""

from pathlib import Path

import numpy as np

from _common import benchmarks, parser, report, run_all
from dilvpr import synthbench

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    out = Path(args.out) / "order_robustness"
    benches = benchmarks(args.seeds)
    spread = {}
    for method in ("LBS", "DBS", "RANDOM"):
        meds = []
        for order in synthbench.ORDER_KINDS:
            ms = run_all(benches, order, out, args.iterations, method=method)
            meds.append(np.median([m["c3"] for m in ms]))
        spread[method] = (max(meds) - min(meds), meds)
    report(out)
    for method, (rng, meds) in spread.items():
        print(f"{method:<7} median C3 per order {np.round(meds, 3).tolist()}  range {rng:.3f}")
