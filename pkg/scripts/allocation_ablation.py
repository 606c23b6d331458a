"""Global, Round-Robin and Min-Guar allocation under both scoring functions."""

from pathlib import Path

from _common import benchmarks, parser, report, run_all
from dilvpr.memory import Allocator

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    out = Path(args.out) / "allocation_ablation"
    benches = benchmarks(args.seeds)
    for method in ("LBS", "DBS"):
        for alloc in Allocator:
            run_all(benches, "forward", out, args.iterations, method=method, allocator=alloc)
    report(out)
