"""All nine methods on the Forward order; the layout of the main comparison table."""

from pathlib import Path

from _common import benchmarks, parser, report, run_all
from dilvpr.lifelong import Method

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    out = Path(args.out) / "compare_methods"
    benches = benchmarks(args.seeds)
    for method in Method:
        run_all(benches, "forward", out, args.iterations, method=method)
        print("done", method.value, flush=True)
    report(out)
