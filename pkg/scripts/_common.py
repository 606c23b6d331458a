"""Shared helpers for the experiment scripts."""

import argparse
import json
from pathlib import Path

from dilvpr import cli, lifelong, synthbench
from dilvpr.synthbench import BenchConfig


def parser(description):
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="results/scripts")
    ap.add_argument("--iterations", type=int, default=None, help="override SGD steps per mission")
    return ap


def benchmarks(n):
    return [synthbench.generate(BenchConfig(), s) for s in range(n)]


def run_all(benches, order, out: Path, iterations=None, **method):
    """Run one configuration for every seed and write metrics.json files; returns the metric bundles."""
    bundles = []
    for seed, b in enumerate(benches):
        extra = {"iterations_per_mission": iterations} if iterations else {}
        config = lifelong.bench_config(seed=seed, **method, **extra)
        r = lifelong.run_sequence(b, order, config)
        m = dict(r.metrics, budget=config.budget, tag=config.tag)
        d = out / order / f"{config.tag.lower()}-b{config.budget}" / f"seed{seed}"
        d.mkdir(parents=True, exist_ok=True)
        cli.dump_json(m, d / "metrics.json")
        (d / "R.csv").write_text(cli.matrix_csv(r))
        bundles.append(m)
    return bundles


def report(out: Path):
    runs = cli._collect(out)
    tables = cli.comparison_tables(runs)
    (out / "comparison.csv").write_text(cli.tables_csv(tables))
    (out / "traces.csv").write_text(cli.traces_csv(runs))
    text = cli.tables_text(tables)
    (out / "comparison.txt").write_text(text)
    print(text)
