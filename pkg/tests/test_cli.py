import json

import pytest

from dilvpr import cli, synthbench
from dilvpr.synthbench import BenchConfig

SMALL = {"rows": 4, "cols": 4, "unvisited_cols": 1, "n_missions": 3, "n_unvisited": 1, "ir_positions": [3],
         "n_unvisited_ir": 0, "cells_per_mission": 4, "samples_per_mission": 20, "sat_per_cell": 3,
         "d_in": 6, "latent_dim": 6}
FAST = ["--iterations", "10"]


@pytest.fixture()
def bench_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bench": SMALL, "method": {"pretrain_multiplier": 2, "embed_dim": 6}}))
    out = tmp_path / "b.jsonl"
    assert cli.main(["generate", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    return out, cfg


def test_generate_defaults_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert cli.main(["generate", "--seed", "1", "--out", str(a)]) == 0
    assert "64 cells, 10 CL + 4 unvisited" in capsys.readouterr().out
    assert cli.main(["generate", "--seed", "1", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    bench = synthbench.load(a)
    assert len(bench.cl_missions) == 10 and bench.grid.num_classes == 64


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere.json"
    assert cli.main(["generate", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_bench_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bench": {"cells_per_mission": 1000}}))
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2


def test_run_smoke_and_determinism(bench_file, tmp_path, capsys):
    bench, cfg = bench_file
    args = ["run", "--bench", str(bench), "--config", str(cfg), "--method", "dbs", "--allocator", "min-guar",
            "--order", "forward", "--budget", "200", "--snapshots"] + FAST
    assert cli.main(args + ["--out", str(tmp_path / "r1")]) == 0
    line = capsys.readouterr().out
    assert "AP=" in line and "C3=" in line
    d = tmp_path / "r1" / "forward" / "dbs-min_guar" / "seed0"
    m = json.loads((d / "metrics.json").read_text())
    assert m["method"] == "DBS" and m["budget"] == 200
    assert (d / "R.csv").read_text().startswith("after_step,mission,")
    assert (d / "snapshots.jsonl").exists()
    assert json.loads((d / "config.json").read_text())["method"]["embed_dim"] == 6

    ft = ["run", "--bench", str(bench), "--config", str(cfg), "--method", "ft"] + FAST
    assert cli.main(ft + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(ft + ["--out", str(tmp_path / "b")]) == 0
    for name in ("R.csv", "metrics.json"):
        pa = tmp_path / "a" / "forward" / "ft" / "seed0" / name
        pb = tmp_path / "b" / "forward" / "ft" / "seed0" / name
        assert pa.read_bytes() == pb.read_bytes()


def test_env_var_output_root(bench_file, tmp_path, monkeypatch):
    bench, cfg = bench_file
    monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / "env"))
    assert cli.main(["run", "--bench", str(bench), "--config", str(cfg), "--method", "ft"] + FAST) == 0
    assert (tmp_path / "env" / "forward" / "ft" / "seed0" / "metrics.json").exists()


@pytest.mark.parametrize("extra", [["--budget", "0"], ["--method", "nope"], ["--order", "sideways"],
                                   ["--allocator", "best"]])
def test_usage_errors(bench_file, tmp_path, extra):
    bench, cfg = bench_file
    assert cli.main(["run", "--bench", str(bench), "--out", str(tmp_path)] + extra) == 2


def test_missing_bench(tmp_path):
    assert cli.main(["run", "--bench", str(tmp_path / "none.jsonl")]) == 3


def test_sweep_and_compare(bench_file, tmp_path, capsys):
    bench, cfg = bench_file
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--bench", str(bench), "--config", str(cfg), "--methods", "lbs", "random",
                     "--allocators", "global", "min-guar", "--orders", "forward", "backward",
                     "--seeds", "0", "1", "--workers", "2", "--out", str(out)] + FAST) == 0
    capsys.readouterr()
    assert cli.main(["compare", str(out)]) == 0
    text = capsys.readouterr().out
    assert "order: forward" in text and "order: backward" in text
    rows = (out / "comparison.csv").read_text().splitlines()
    assert rows[0].startswith("order,method,n,ap_median")
    assert len(rows) == 1 + 2 * 3
    assert (out / "traces.csv").read_text().startswith("order,method,budget,seed,step,c1,c3")


def test_compare_single_run_and_bad_json(bench_file, tmp_path, capsys):
    bench, cfg = bench_file
    out = tmp_path / "one"
    assert cli.main(["run", "--bench", str(bench), "--config", str(cfg), "--method", "random", "--out", str(out)]
                    + FAST) == 0
    bad = out / "forward" / "junk" / "seed0"
    bad.mkdir(parents=True)
    (bad / "metrics.json").write_text("{not json")
    capsys.readouterr()
    assert cli.main(["compare", str(out)]) == 0
    captured = capsys.readouterr()
    lines = (out / "comparison.csv").read_text().splitlines()
    assert len(lines) == 2 and ",RANDOM,1," in lines[1]
    assert "0.00" in captured.out


def test_compare_empty_dir(tmp_path):
    assert cli.main(["compare", str(tmp_path)]) == 3


def test_dump_buffer(bench_file, tmp_path):
    bench, cfg = bench_file
    out = tmp_path / "buf.jsonl"
    assert cli.main(["dump-buffer", "--bench", str(bench), "--config", str(cfg), "--method", "dbs",
                     "--budget", "5", "--step", "2", "--out", str(out)] + FAST) == 0
    recs = [json.loads(x) for x in out.read_text().splitlines()]
    assert 0 < len(recs) <= 5
    assert set(recs[0]) == {"id", "label", "mission", "domain_tag", "score", "embedding"}
    assert cli.main(["dump-buffer", "--bench", str(bench), "--config", str(cfg), "--step", "99"] + FAST) == 2
