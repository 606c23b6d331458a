"""Replay budget sweep for the buffer-based methods."""

from pathlib import Path

from _common import benchmarks, parser, report, run_all

BUDGETS = (10, 20, 40, 80, 160)

if __name__ == "__main__":
    ap = parser(__doc__)
    ap.add_argument("--budgets", type=int, nargs="+", default=list(BUDGETS))
    args = ap.parse_args()
    out = Path(args.out) / "buffer_sensitivity"
    benches = benchmarks(args.seeds)
    for B in args.budgets:
        for method in ("RANDOM", "LBS", "DBS"):
            run_all(benches, "forward", out, args.iterations, method=method, budget=B)
        print("done B =", B, flush=True)
    report(out)
