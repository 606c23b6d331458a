import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dilvpr import lifelong, synthbench
from dilvpr.synthbench import BenchConfig, ConfigError, ParseError, VersionError, curriculum, generate

SMALL = BenchConfig(rows=4, cols=4, unvisited_cols=1, n_missions=4, n_unvisited=2, ir_positions=(4,),
                    cells_per_mission=4, samples_per_mission=20, sat_per_cell=3, d_in=6, latent_dim=6)


@pytest.fixture(scope="module")
def bench():
    return generate(BenchConfig(), seed=0)


def test_defaults(bench):
    assert bench.grid.num_classes == 64
    assert len(bench.cl_missions) == 10 and len(bench.unvisited_missions) == 4
    assert [m.modality for m in bench.cl_missions][-2:] == ["IR", "IR"]
    assert sum(m.modality == "IR" for m in bench.unvisited_missions) == 1


def test_domain_transforms_orthogonal(bench):
    for dom in bench.domains.values():
        assert np.allclose(dom.Q.T @ dom.Q, np.eye(dom.Q.shape[0]), atol=1e-10)
    sat = bench.domains["SAT"]
    assert np.array_equal(sat.Q, np.eye(sat.Q.shape[0])) and not sat.t.any()


def test_zero_noise_satellite_is_exact_centroids():
    b = generate(BenchConfig(sat_noise=0.0), seed=3)
    for s in b.satellite:
        assert np.array_equal(s.raw, b.centroids[s.label])


def test_disjoint_and_coverage(bench):
    cl = {c for m in bench.cl_missions for c in m.cells}
    uv = {c for m in bench.unvisited_missions for c in m.cells}
    assert not cl & uv
    assert {s.label for s in bench.satellite} == set(range(64))
    for m in bench.missions:
        assert {s.label for s in m.train + m.test} <= set(m.cells)


def test_splits_balanced(bench):
    for m in bench.cl_missions:
        assert abs(len(m.train) - len(m.test)) <= 1
    for m in bench.unvisited_missions:
        assert not m.train and all(s.split == "unvisited" for s in m.test)


def test_mission_cells_are_contiguous(bench):
    for m in bench.missions:
        cells = set(m.cells)
        seen, todo = set(), [m.cells[0]]
        while todo:
            c = todo.pop()
            if c in seen:
                continue
            seen.add(c)
            todo.extend(n for n in bench.grid.neighbors4(c) if n in cells)
        assert seen == cells


def test_gt_inside_labelled_cell(bench):
    for s in bench.all_samples():
        assert bench.grid.cell_of(s.gt) == s.label


def test_neighbour_correlation():
    gaps = []
    for seed in range(10):
        b = generate(BenchConfig(), seed)
        M, grid = b.centroids, b.grid
        S = M @ M.T
        adj = [S[y, n] for y in range(grid.num_classes) for n in grid.neighbors4(y)]
        off = S[~np.eye(len(M), dtype=bool)]
        gaps.append(np.mean(adj) - np.mean(off))
    assert np.mean(gaps) > 0.05
    assert min(gaps) > 0


def test_orders(bench):
    fwd = curriculum(bench, "forward")
    assert curriculum(bench, "backward") == fwd[::-1]
    pressure = curriculum(bench, "pressure")
    assert bench.mission(pressure[0]).modality == "IR"
    assert sorted(pressure) == sorted(fwd)
    assert curriculum(bench, "robust", seed=5) == curriculum(bench, "robust", seed=5)
    assert sorted(curriculum(bench, "ROBUST")) == sorted(fwd)
    with pytest.raises(ValueError):
        curriculum(bench, "sideways")


def test_infeasible_configs():
    with pytest.raises(ConfigError):
        generate(BenchConfig(cells_per_mission=100))
    with pytest.raises(ConfigError):
        generate(BenchConfig(ir_positions=(11,)))
    with pytest.raises(ConfigError):
        BenchConfig.from_dict({"nonsense": 1})


def test_mission_sizes_override():
    sizes = (10, 20, 30, 40)
    b = generate(BenchConfig(**{**SMALL.__dict__, "mission_sizes": sizes}), 0)
    assert [len(m.train) + len(m.test) for m in b.cl_missions] == list(sizes)


def test_round_trip(tmp_path):
    b = generate(SMALL, seed=2)
    path = tmp_path / "b.jsonl"
    synthbench.save(b, path)
    c = synthbench.load(path)
    assert synthbench.dumps(c) == synthbench.dumps(b)
    assert np.array_equal(c.centroids, b.centroids)
    for s, t in zip(b.all_samples(), c.all_samples()):
        assert s.id == t.id and np.array_equal(s.raw, t.raw) and s.gt == t.gt and s.split == t.split


def test_truncated_file_raises(tmp_path):
    text = synthbench.dumps(generate(SMALL, seed=2))
    lines = text.splitlines()
    with pytest.raises(ParseError) as e:
        synthbench.loads("\n".join(lines[:-3]) + "\n")
    assert "line" in str(e.value)
    with pytest.raises(ParseError):
        synthbench.loads(text[: len(text) // 2])
    with pytest.raises(ParseError):
        synthbench.loads("")


def test_version_mismatch(tmp_path):
    lines = synthbench.dumps(generate(SMALL, seed=2)).splitlines()
    header = json.loads(lines[0])
    header["version"] = 999
    with pytest.raises(VersionError):
        synthbench.loads("\n".join([json.dumps(header)] + lines[1:]))


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000))
def test_byte_determinism(seed):
    assert synthbench.dumps(generate(SMALL, seed)) == synthbench.dumps(generate(SMALL, seed))


def test_no_shift_means_little_forgetting():
    """Without any domain shift, fine-tuning should forget almost nothing."""
    cfg = BenchConfig(ir_positions=(), n_unvisited_ir=0, vis_shift=0.0, vis_jitter=0.0, vis_bias=0.0)
    bwts = [
        lifelong.run_sequence(generate(cfg, s), "forward", lifelong.bench_config(method="FT", seed=s)).metrics["bwt"]
        for s in range(5)
    ]
    assert abs(np.median(bwts)) <= 0.05
