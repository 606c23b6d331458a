"""Command-line entry point: generate benchmarks, run and sweep experiments, compare results.

Exit codes: 0 success, 2 usage or config error, 3 missing input, 4 invariant violation.

Config file (``--config``) is one JSON document; every section is optional::

    {
      "bench":  {"rows": 8, "cols": 8, ...},           # BenchConfig fields (generate)
      "method": {"budget": 40, "lr_head": 0.01, ...},  # MethodConfig fields (run, sweep)
      "order": "forward",
      "seeds": [0, 1, 2]
    }

Command-line flags override values from the file. The effective config is
written next to the results as ``config.json``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from dilvpr import lifelong, synthbench
from dilvpr.lifelong import BENCH_SCALED, DisposalViolation, Method, MethodConfig
from dilvpr.memory import Allocator
from dilvpr.synthbench import BenchConfig, ConfigError, ParseError, VersionError

log = logging.getLogger("dilvpr")

ENV_OUT = "DILVPR_OUT"
METRIC_COLUMNS = ("ap", "bwt", "fwt", "c1", "c2", "c3")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_INVARIANT = 0, 2, 3, 4


class UsageError(Exception):
    pass


class MissingInput(Exception):
    pass


# --- helpers ---------------------------------------------------------------


def _enum_name(text: str) -> str:
    return text.strip().upper().replace("-", "_").replace("+", "P")


def parse_method(text: str) -> Method:
    name = _enum_name(text)
    aliases = {"DIL_DER": "DIL_DERPP", "DERPP": "DIL_DERPP", "ER": "DIL_ER", "LWF": "DIL_LWF", "ICARL": "DIL_ICARL"}
    name = aliases.get(name, name)
    try:
        return Method(name)
    except ValueError:
        raise UsageError(f"unknown method {text!r}; choose from {[m.value.lower() for m in Method]}") from None


def parse_allocator(text: str) -> Allocator:
    try:
        return Allocator(_enum_name(text))
    except ValueError:
        raise UsageError(f"unknown allocator {text!r}; choose from global, round-robin, min-guar") from None


def parse_order(text: str) -> str:
    if text.lower() not in synthbench.ORDER_KINDS:
        raise UsageError(f"unknown order {text!r}; choose from {list(synthbench.ORDER_KINDS)}")
    return text.lower()


def read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {p} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config file {p} must hold a JSON object")
    unknown = set(doc) - {"bench", "method", "order", "seeds"}
    if unknown:
        raise UsageError(f"config file {p} has unknown sections {sorted(unknown)}")
    return doc


def out_root(arg) -> Path:
    return Path(arg or os.environ.get(ENV_OUT) or "results")


def load_bench(path) -> synthbench.Benchmark:
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"benchmark file not found: {p}")
    return synthbench.load(p)


def fmt(x) -> str:
    return "" if x is None else repr(float(x))


def dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def matrix_csv(result: lifelong.RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["after_step", "mission"] + [f"m{mid}" for mid in result.order])
    w.writerow([0, ""] + [fmt(v) for v in result.initial_row])
    for k, mid in enumerate(result.order):
        w.writerow([k + 1, mid] + [fmt(v) for v in result.R[k]])
    return buf.getvalue()


def method_config(args, doc: dict) -> MethodConfig:
    base = {}
    if getattr(args, "preset", "default") == "scaled":
        base.update(BENCH_SCALED)
    base.update(doc.get("method", {}))
    for flag, key in (("budget", "budget"), ("iterations", "iterations_per_mission"), ("dbs_lambda", "dbs_lambda"),
                      ("tau", "tau")):
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
    if getattr(args, "method", None):
        base["method"] = parse_method(args.method)
    if getattr(args, "allocator", None):
        base["allocator"] = parse_allocator(args.allocator)
    if base.get("budget", 1) < 1:
        raise UsageError(f"budget must be >= 1, got {base['budget']}")
    try:
        return MethodConfig.from_dict(base)
    except (ValueError, TypeError) as e:
        raise UsageError(f"bad method config: {e}") from None


def seeds_of(args, doc) -> list:
    seeds = args.seeds if args.seeds else doc.get("seeds", [0])
    if not seeds:
        raise UsageError("need at least one seed")
    return [int(s) for s in seeds]


def order_of(args, doc) -> str:
    return parse_order(args.order or doc.get("order", "forward"))


# --- run ---------------------------------------------------------------------


def run_cell(bench, bench_path, order: str, config: MethodConfig, outdir: Path, snapshots: bool):
    """One (method, order, seed) run written to ``outdir``; returns the metrics bundle."""
    result = lifelong.run_sequence(bench, order, config, keep_snapshots=snapshots)
    for n in result.buffer_sizes:
        if n > config.budget:
            raise AssertionError(f"buffer size {n} exceeds budget {config.budget}")
    outdir.mkdir(parents=True, exist_ok=True)
    m = dict(result.metrics)
    m["budget"] = config.budget
    m["tag"] = config.tag
    m["benchmark"] = str(bench_path)
    m["buffer_sizes"] = result.buffer_sizes
    m["storage"] = result.storage
    (outdir / "R.csv").write_text(matrix_csv(result))
    dump_json(m, outdir / "metrics.json")
    if snapshots:
        lines = []
        for k, snap in enumerate(result.snapshots, start=1):
            lines.extend(json.dumps({"step": k, **rec}, sort_keys=True) for rec in snap)
        (outdir / "snapshots.jsonl").write_text("".join(line + "\n" for line in lines))
    return m


def summary_line(m: dict) -> str:
    parts = []
    for k in METRIC_COLUMNS:
        v = m.get(k)
        parts.append(f"{k.upper()}={'n/a' if v is None else f'{v:.4f}'}")
    return " ".join(parts)


def cell_dir(root: Path, order: str, config: MethodConfig, seed: int, with_budget: bool = False) -> Path:
    name = config.tag.lower() + (f"-b{config.budget}" if with_budget else "")
    return root / order / name / f"seed{seed}"


def cmd_generate(args) -> int:
    doc = read_config(args.config)
    try:
        cfg = BenchConfig.from_dict(doc.get("bench", {}))
        bench = synthbench.generate(cfg, args.seed)
    except (ConfigError, TypeError) as e:
        raise UsageError(f"bad benchmark config: {e}") from None
    out = Path(args.out) if args.out else out_root(None) / f"bench_seed{args.seed}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    synthbench.save(bench, out)
    cl, uv = bench.cl_missions, bench.unvisited_missions
    print(f"wrote {out}: {bench.grid.num_classes} cells, {len(cl)} CL + {len(uv)} unvisited missions, "
          f"{len(bench.satellite)} satellite samples")
    for m in bench.missions:
        print(f"  mission {m.id:>3} {m.kind:<9} {m.modality:<3} cells={len(m.cells):>3} "
              f"train={len(m.train):>4} test={len(m.test):>4}")
    return EXIT_OK


def cmd_run(args) -> int:
    doc = read_config(args.config)
    config = method_config(args, doc)
    order = order_of(args, doc)
    seeds = seeds_of(args, doc)
    bench = load_bench(args.bench)
    root = out_root(args.out)
    for seed in seeds:
        c = MethodConfig.from_dict({**config.to_dict(), "seed": seed})
        outdir = cell_dir(root, order, c, seed)
        m = run_cell(bench, args.bench, order, c, outdir, args.snapshots)
        dump_json({"method": c.to_dict(), "order": order, "benchmark": str(args.bench)}, outdir / "config.json")
        print(f"{c.tag} {order} seed={seed}: {summary_line(m)}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    doc = read_config(args.config)
    base = method_config(args, doc)
    bench = load_bench(args.bench)
    root = out_root(args.out)
    methods = [parse_method(m) for m in args.methods]
    allocators = [parse_allocator(a) for a in args.allocators]
    orders = [parse_order(o) for o in (args.orders or [doc.get("order", "forward")])]
    budgets = args.budgets or [base.budget]
    if min(budgets) < 1:
        raise UsageError("budgets must be >= 1")
    seeds = seeds_of(args, doc)

    cells = []
    for method in methods:
        for alloc in allocators if method in (Method.LBS, Method.DBS) else [base.allocator]:
            for B in budgets:
                for order in orders:
                    for seed in seeds:
                        c = MethodConfig.from_dict({**base.to_dict(), "method": method, "allocator": alloc,
                                                    "budget": B, "seed": seed})
                        cells.append((order, c, cell_dir(root, order, c, seed, with_budget=len(budgets) > 1)))

    def work(cell):
        order, c, outdir = cell
        m = run_cell(bench, args.bench, order, c, outdir, args.snapshots)
        dump_json({"method": c.to_dict(), "order": order, "benchmark": str(args.bench)}, outdir / "config.json")
        return f"{c.tag} B={c.budget} {order} seed={c.seed}: {summary_line(m)}"

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        for line in pool.map(work, cells):
            print(line)
    return EXIT_OK


# --- compare ---------------------------------------------------------------


def _collect(results_dir: Path):
    runs = []
    for path in sorted(results_dir.rglob("metrics.json")):
        try:
            m = json.loads(path.read_text())
            if not isinstance(m, dict) or "method" not in m or "order" not in m:
                raise ValueError("missing method/order fields")
        except (ValueError, OSError) as e:
            log.warning("skipping %s: %s", path, e)
            continue
        runs.append(m)
    return runs


def _median_iqr(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    q1, med, q3 = np.percentile(vals, [25, 50, 75])
    return float(med), float(q3 - q1)


def _row_label(m: dict, with_budget: bool) -> str:
    label = m.get("tag") or (m["method"] + (f"-{m['allocator']}" if m.get("allocator") else ""))
    return f"{label} B={m.get('budget')}" if with_budget else label


def comparison_tables(runs):
    """Per order: rows of (label, n_seeds, {metric: (median, iqr)})."""
    tables = {}
    for order in sorted({m["order"] for m in runs}):
        group = [m for m in runs if m["order"] == order]
        with_budget = len({m.get("budget") for m in group}) > 1
        rows = {}
        for m in group:
            rows.setdefault(_row_label(m, with_budget), []).append(m)
        table = []
        for label in sorted(rows):
            ms = rows[label]
            table.append((label, len(ms), {k: _median_iqr([x.get(k) for x in ms]) for k in METRIC_COLUMNS}))
        tables[order] = table
    return tables


def tables_csv(tables) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["order", "method", "n"] + [f"{k}_{s}" for k in METRIC_COLUMNS for s in ("median", "iqr")])
    for order, table in tables.items():
        for label, n, cols in table:
            w.writerow([order, label, n] + [fmt(x) for k in METRIC_COLUMNS for x in cols[k]])
    return buf.getvalue()


def tables_text(tables) -> str:
    out = []
    for order, table in tables.items():
        header = ["method", "n"] + [k.upper() for k in METRIC_COLUMNS]
        body = []
        for label, n, cols in table:
            cells = []
            for k in METRIC_COLUMNS:
                med, iqr = cols[k]
                cells.append("n/a" if med is None else f"{100 * med:.2f} ± {100 * iqr:.2f}")
            body.append([label, str(n)] + cells)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        line = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        out.append(f"order: {order}  (median ± IQR over seeds, in %)")
        out.append(line(header))
        out.append("  ".join("-" * w for w in widths))
        out.extend(line(r) for r in body)
        out.append("")
    return "\n".join(out)


def traces_csv(runs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["order", "method", "budget", "seed", "step", "c1", "c3"])
    key = lambda m: (m["order"], _row_label(m, True), m.get("seed", 0))
    for m in sorted(runs, key=key):
        c1, c3 = m.get("c1_trace", []), [None] + list(m.get("c3_trace", []))
        for k in range(len(c1)):
            w.writerow([m["order"], _row_label(m, False), m.get("budget"), m.get("seed"), k, fmt(c1[k]),
                        fmt(c3[k] if k < len(c3) else None)])
    return buf.getvalue()


def cmd_compare(args) -> int:
    d = Path(args.results)
    if not d.is_dir():
        raise MissingInput(f"results directory not found: {d}")
    if not any(d.rglob("metrics.json")):
        raise MissingInput(f"no metrics.json under {d}")
    runs = _collect(d)
    tables = comparison_tables(runs)
    out = Path(args.out) if args.out else d
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(tables_csv(tables))
    text = tables_text(tables)
    (out / "comparison.txt").write_text(text)
    (out / "traces.csv").write_text(traces_csv(runs))
    print(text, end="")
    return EXIT_OK


# --- dump-buffer -------------------------------------------------------------


def cmd_dump_buffer(args) -> int:
    doc = read_config(args.config)
    config = method_config(args, doc)
    config = MethodConfig.from_dict({**config.to_dict(), "seed": seeds_of(args, doc)[0]})
    bench = load_bench(args.bench)
    result = lifelong.run_sequence(bench, order_of(args, doc), config, keep_snapshots=True)
    K = len(result.snapshots)
    step = args.step if args.step is not None else K
    if not 1 <= step <= K:
        raise UsageError(f"step must be in 1..{K}")
    lines = [json.dumps(rec, sort_keys=True) for rec in result.snapshots[step - 1]]
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"wrote {len(lines)} buffer records (step {step}) to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def _add_method_flags(p, single=True):
    if single:
        p.add_argument("--method", help="ft, ft-ex, dil-lwf, dil-er, dil-derpp, dil-icarl, random, lbs, dbs")
        p.add_argument("--allocator", help="global, round-robin or min-guar (lbs/dbs only)")
        p.add_argument("--budget", type=int, help="replay budget B")
        p.add_argument("--order", help="forward, backward, pressure or robust")
    p.add_argument("--iterations", type=int, help="SGD steps per mission")
    p.add_argument("--dbs-lambda", type=float, help="centrality weight for DBS")
    p.add_argument("--tau", type=float, help="distance tolerance in metres")
    p.add_argument("--preset", choices=["default", "scaled"], default="default",
                   help="'scaled' applies the settings sized for the default synthetic benchmark")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--config", help="JSON config file")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dilvpr", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic benchmark file")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help=f"output file (default ${ENV_OUT}/bench_seed<seed>.jsonl)")
    g.set_defaults(fn=cmd_generate)

    r = sub.add_parser("run", help="run one method on one order for each seed")
    r.add_argument("--bench", required=True)
    _add_method_flags(r)
    r.add_argument("--out", help=f"results root (default ${ENV_OUT} or ./results)")
    r.add_argument("--snapshots", action="store_true", help="write per-step buffer snapshots")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="run a method x allocator x budget x order x seed grid")
    s.add_argument("--bench", required=True)
    s.add_argument("--methods", nargs="+", default=[m.value.lower() for m in Method])
    s.add_argument("--allocators", nargs="+", default=["min-guar"])
    s.add_argument("--orders", nargs="+")
    s.add_argument("--budgets", type=int, nargs="+")
    s.add_argument("--budget", type=int, help=argparse.SUPPRESS)
    _add_method_flags(s, single=False)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out")
    s.add_argument("--snapshots", action="store_true")
    s.set_defaults(fn=cmd_sweep)

    c = sub.add_parser("compare", help="aggregate metrics.json files into tables")
    c.add_argument("results")
    c.add_argument("--out", help="directory for the tables (default: the results dir)")
    c.set_defaults(fn=cmd_compare)

    d = sub.add_parser("dump-buffer", help="write the replay buffer after a step as JSON Lines")
    d.add_argument("--bench", required=True)
    _add_method_flags(d)
    d.add_argument("--step", type=int, help="step to dump (default: last)")
    d.add_argument("--out")
    d.set_defaults(fn=cmd_dump_buffer)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"dilvpr: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingInput, FileNotFoundError) as e:
        print(f"dilvpr: error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (ParseError, VersionError) as e:
        print(f"dilvpr: error: cannot read benchmark: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (AssertionError, DisposalViolation) as e:
        print(f"dilvpr: invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
