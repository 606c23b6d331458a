"""Synthetic mission benchmark with the structure of a lifelong aerial VPR dataset.

A satellite domain covers every cell. Continual-learning (CL) missions fly
random-walk trajectories over one part of the grid under their own visual
domain; unvisited missions cover a disjoint part and are only evaluated on.
Class centroids are spatially smoothed so neighboring cells look alike.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from dilvpr.geo_grid import GridMap
from dilvpr.model import Sample

FORMAT = "dilvpr-bench"
VERSION = 1
ORDER_KINDS = ("forward", "backward", "pressure", "robust")


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class VersionError(ValueError):
    pass


@dataclass
class BenchConfig:
    rows: int = 8
    cols: int = 8
    cell_size: float = 200.0
    origin: Tuple[float, float] = (0.0, 0.0)
    d_in: int = 16
    # centroids span a random subspace of this dimension (<= d_in)
    latent_dim: int = 16
    n_missions: int = 10
    n_unvisited: int = 4
    # 1-based positions of IR missions in the forward order
    ir_positions: Tuple[int, ...] = (9, 10)
    n_unvisited_ir: int = 1
    # columns on the east edge reserved for unvisited missions
    unvisited_cols: int = 3
    cells_per_mission: int = 10
    samples_per_mission: int = 160
    # optional explicit size per CL mission (forward order), overrides samples_per_mission
    mission_sizes: Optional[Tuple[int, ...]] = None
    sat_per_cell: int = 16
    sat_noise: float = 0.1
    vis_noise: float = 0.15
    ir_noise: float = 0.15
    # strength of the rotation shared by all VIS missions, and of each mission's own perturbation
    vis_shift: float = 0.6
    vis_jitter: float = 0.2
    vis_bias: float = 0.2
    # rotation strength of the shared IR transform; 0 is identity, large values approach a uniformly random rotation
    ir_shift: float = 0.8
    ir_bias: float = 0.8

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown benchmark config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("origin", "ir_positions", "mission_sizes"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def validate(self):
        if self.rows < 1 or self.cols < 1 or self.cell_size <= 0:
            raise ConfigError("grid must be at least 1x1 with positive cell size")
        if not 0 <= self.unvisited_cols < self.cols:
            raise ConfigError("unvisited_cols must leave at least one CL column")
        if self.n_unvisited and not self.unvisited_cols:
            raise ConfigError("unvisited missions need unvisited_cols > 0")
        if self.n_missions < 1:
            raise ConfigError("need at least one CL mission")
        if any(not 1 <= p <= self.n_missions for p in self.ir_positions):
            raise ConfigError(f"ir_positions {self.ir_positions} outside 1..{self.n_missions}")
        if len(set(self.ir_positions)) != len(self.ir_positions):
            raise ConfigError("duplicate ir_positions")
        if self.n_unvisited_ir > self.n_unvisited:
            raise ConfigError("more unvisited IR missions than unvisited missions")
        cl_cells = self.rows * (self.cols - self.unvisited_cols)
        uv_cells = self.rows * self.unvisited_cols
        if self.cells_per_mission > cl_cells or (self.n_unvisited and self.cells_per_mission > uv_cells):
            raise ConfigError(
                f"cells_per_mission={self.cells_per_mission} exceeds the cell budget "
                f"(CL {cl_cells}, unvisited {uv_cells})"
            )
        if self.mission_sizes is not None and len(self.mission_sizes) != self.n_missions:
            raise ConfigError("mission_sizes must list one size per CL mission")
        sizes = self.mission_sizes or (self.samples_per_mission,)
        if min(sizes) < 2:
            raise ConfigError("each mission needs at least 2 samples for a train/test split")
        if self.sat_per_cell < 1 or self.d_in < 1:
            raise ConfigError("sat_per_cell and d_in must be positive")
        if not 1 <= self.latent_dim <= self.d_in:
            raise ConfigError(f"latent_dim must be in 1..d_in, got {self.latent_dim}")


@dataclass
class DomainTransform:
    Q: np.ndarray
    t: np.ndarray
    noise_sigma: float
    modality: str

    def apply(self, mu: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.Q @ mu + self.t + rng.normal(0.0, 1.0, size=mu.shape) * self.noise_sigma

    def to_dict(self):
        return {"Q": self.Q.tolist(), "t": self.t.tolist(), "noise_sigma": self.noise_sigma, "modality": self.modality}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["Q"], dtype=np.float64), np.asarray(d["t"], dtype=np.float64),
                   float(d["noise_sigma"]), d["modality"])


@dataclass
class Mission:
    id: int
    kind: str  # "cl" or "unvisited"
    domain: str
    modality: str
    cells: List[int]
    train: List[Sample] = field(default_factory=list)
    test: List[Sample] = field(default_factory=list)

    def meta(self):
        return {"id": self.id, "kind": self.kind, "domain": self.domain, "modality": self.modality, "cells": self.cells}


@dataclass
class Benchmark:
    grid: GridMap
    centroids: np.ndarray
    satellite: List[Sample]
    missions: List[Mission]  # CL missions then unvisited missions
    domains: Dict[str, DomainTransform]
    orders: Dict[str, List[int]]
    config: dict
    seed: int

    @property
    def cl_missions(self) -> List[Mission]:
        return [m for m in self.missions if m.kind == "cl"]

    @property
    def unvisited_missions(self) -> List[Mission]:
        return [m for m in self.missions if m.kind == "unvisited"]

    @property
    def unvisited(self) -> List[Sample]:
        return [s for m in self.unvisited_missions for s in m.test]

    def mission(self, mission_id: int) -> Mission:
        for m in self.missions:
            if m.id == mission_id:
                return m
        raise KeyError(f"no mission {mission_id}")

    def all_samples(self) -> List[Sample]:
        out = list(self.satellite)
        for m in self.missions:
            out.extend(m.train)
            out.extend(m.test)
        return sorted(out, key=lambda s: s.id)


def _orthogonal(M: np.ndarray) -> np.ndarray:
    Q, R = np.linalg.qr(M)
    return Q * np.where(np.diag(R) < 0, -1.0, 1.0)


def _smoothed_centroids(grid: GridMap, d: int, latent: int, rng: np.random.Generator) -> np.ndarray:
    G = rng.normal(size=(grid.num_classes, latent))
    mu = np.empty_like(G)
    for y in range(grid.num_classes):
        nbrs = [y, *grid.neighbors4(y)]
        mu[y] = G[nbrs].mean(axis=0)
    basis = _orthogonal(rng.normal(size=(d, d)))[:, :latent]
    mu = mu @ basis.T
    return mu / np.linalg.norm(mu, axis=1, keepdims=True)


def _random_walk(grid: GridMap, allowed: Sequence[int], n_cells: int, rng: np.random.Generator) -> List[int]:
    allowed_set = set(allowed)
    cur = int(rng.choice(sorted(allowed_set)))
    visited = [cur]
    for _ in range(1000 * n_cells):
        if len(visited) == n_cells:
            break
        options = sorted(c for c in grid.neighbors4(cur) if c in allowed_set)
        cur = int(rng.choice(options))
        if cur not in visited:
            visited.append(cur)
    if len(visited) < n_cells:
        raise ConfigError("random walk could not reach enough distinct cells")
    return visited


def _point_in_cell(grid: GridMap, label: int, rng: np.random.Generator) -> Tuple[float, float]:
    row, col = grid.row_col(label)
    u = rng.uniform(0.05, 0.95, size=2)
    return (
        grid.origin[0] + (col + u[0]) * grid.cell_size,
        grid.origin[1] + (row + u[1]) * grid.cell_size,
    )


def make_orders(missions: Sequence[Mission], seed: int) -> Dict[str, List[int]]:
    cl = [m for m in missions if m.kind == "cl"]
    vis = [m.id for m in cl if m.modality != "IR"]
    ir = [m.id for m in cl if m.modality == "IR"]
    forward = vis + ir
    # hardest IR mission: the largest, latest one in forward order
    sizes = {m.id: len(m.train) + len(m.test) for m in cl}
    hardest = max(ir, key=lambda i: (sizes[i], forward.index(i))) if ir else forward[-1]
    robust = list(np.random.default_rng([seed, 7]).permutation(forward).tolist())
    return {
        "forward": forward,
        "backward": forward[::-1],
        "pressure": [hardest] + [i for i in forward if i != hardest],
        "robust": robust,
    }


def curriculum(benchmark: Benchmark, kind: str, seed: Optional[int] = None) -> List[int]:
    """Mission id sequence for one of the four curriculum orders.

    ``robust`` uses the benchmark's stored shuffle unless an explicit ``seed`` is given.
    """
    kind = kind.lower()
    if kind not in ORDER_KINDS:
        raise ValueError(f"unknown order {kind!r}; expected one of {ORDER_KINDS}")
    if kind == "robust" and seed is not None:
        return list(np.random.default_rng([seed, 7]).permutation(benchmark.orders["forward"]).tolist())
    return list(benchmark.orders[kind])


def generate(config: BenchConfig = None, seed: int = 0) -> Benchmark:
    config = config or BenchConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.d_in
    grid = GridMap(config.origin, config.cell_size, config.rows, config.cols)
    centroids = _smoothed_centroids(grid, d, config.latent_dim, rng)

    cl_cells = [y for y in range(grid.num_classes) if grid.row_col(y)[1] < config.cols - config.unvisited_cols]
    uv_cells = [y for y in range(grid.num_classes) if grid.row_col(y)[1] >= config.cols - config.unvisited_cols]

    domains = {"SAT": DomainTransform(np.eye(d), np.zeros(d), config.sat_noise, "SAT")}
    domains["IR"] = DomainTransform(
        _orthogonal(np.eye(d) + config.ir_shift * rng.normal(size=(d, d)) / np.sqrt(d)),
        rng.normal(size=d) * config.ir_bias / np.sqrt(d),
        config.ir_noise,
        "IR",
    )

    vis_common = _orthogonal(np.eye(d) + config.vis_shift * rng.normal(size=(d, d)) / np.sqrt(d))
    vis_bias = rng.normal(size=d) * config.vis_bias / np.sqrt(d)

    def vis_domain(name):
        Q = _orthogonal(vis_common + config.vis_jitter * rng.normal(size=(d, d)) / np.sqrt(d))
        t = vis_bias + rng.normal(size=d) * config.vis_jitter * config.vis_bias / np.sqrt(d)
        domains[name] = DomainTransform(Q, t, config.vis_noise, "VIS")
        return name

    missions: List[Mission] = []
    for k in range(1, config.n_missions + 1):
        is_ir = k in config.ir_positions
        dom = "IR" if is_ir else vis_domain(f"VIS-{k:02d}")
        cells = _random_walk(grid, cl_cells, config.cells_per_mission, rng)
        missions.append(Mission(k, "cl", dom, "IR" if is_ir else "VIS", cells))
    for u in range(config.n_unvisited):
        mid = config.n_missions + 1 + u
        is_ir = u >= config.n_unvisited - config.n_unvisited_ir
        dom = "IR" if is_ir else vis_domain(f"VIS-{mid:02d}")
        cells = _random_walk(grid, uv_cells, config.cells_per_mission, rng)
        missions.append(Mission(mid, "unvisited", dom, "IR" if is_ir else "VIS", cells))

    next_id = 0

    def draw(label, mission, domain, split):
        nonlocal next_id
        gt = _point_in_cell(grid, label, rng)
        assert grid.cell_of(gt) == label
        raw = domains[domain].apply(centroids[label], rng)
        s = Sample(next_id, raw, int(label), gt, mission, domains[domain].modality, split)
        next_id += 1
        return s

    satellite = [draw(y, 0, "SAT", "train") for y in range(grid.num_classes) for _ in range(config.sat_per_cell)]
    for i, m in enumerate(missions):
        if m.kind == "cl" and config.mission_sizes is not None:
            n = config.mission_sizes[i]
        else:
            n = config.samples_per_mission
        labels = rng.choice(m.cells, size=n)
        split = rng.permutation(n) < (n + 1) // 2
        if m.kind == "cl":
            for y, tr in zip(labels, split):
                s = draw(y, m.id, m.domain, "train" if tr else "test")
                (m.train if tr else m.test).append(s)
        else:
            m.test.extend(draw(y, m.id, m.domain, "unvisited") for y in labels)

    cfg = json.loads(json.dumps(asdict(config)))
    return Benchmark(grid, centroids, satellite, missions, domains, make_orders(missions, seed), cfg, seed)


# --- file format ---------------------------------------------------------


def _sample_record(s: Sample) -> dict:
    return {
        "id": s.id,
        "mission": s.mission,
        "split": s.split,
        "label": s.label,
        "gt": [float(s.gt[0]), float(s.gt[1])],
        "domain_tag": s.domain_tag,
        "raw": s.raw.tolist(),
    }


def dumps(benchmark: Benchmark) -> str:
    samples = benchmark.all_samples()
    header = {
        "format": FORMAT,
        "version": VERSION,
        "seed": benchmark.seed,
        "config": benchmark.config,
        "grid": benchmark.grid.to_dict(),
        "d_in": int(benchmark.centroids.shape[1]),
        "centroids": benchmark.centroids.tolist(),
        "domains": {k: v.to_dict() for k, v in benchmark.domains.items()},
        "missions": [m.meta() for m in benchmark.missions],
        "orders": benchmark.orders,
        "n_samples": len(samples),
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(_sample_record(s), sort_keys=True) for s in samples)
    return "\n".join(lines) + "\n"


def save(benchmark: Benchmark, path) -> None:
    Path(path).write_text(dumps(benchmark))


def load(path) -> Benchmark:
    with open(path) as fh:
        return loads(fh.read())


def loads(text: str) -> Benchmark:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(1, "empty benchmark file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(1, f"bad header: {e}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise ParseError(1, "not a benchmark file")
    if header.get("version") != VERSION:
        raise VersionError(f"benchmark version {header.get('version')!r}, this reader supports {VERSION}")
    try:
        grid = GridMap.from_dict(header["grid"])
        d_in = int(header["d_in"])
        n_samples = int(header["n_samples"])
        missions = [
            Mission(int(m["id"]), m["kind"], m["domain"], m["modality"], [int(c) for c in m["cells"]])
            for m in header["missions"]
        ]
        domains = {k: DomainTransform.from_dict(v) for k, v in header["domains"].items()}
        centroids = np.asarray(header["centroids"], dtype=np.float64)
        orders = {k: [int(i) for i in v] for k, v in header["orders"].items()}
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(1, f"bad header field: {e!r}") from None

    by_id = {m.id: m for m in missions}
    satellite = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            r = json.loads(line)
            raw = np.asarray(r["raw"], dtype=np.float64)
            if raw.shape != (d_in,):
                raise ValueError(f"raw has shape {raw.shape}, expected ({d_in},)")
            s = Sample(int(r["id"]), raw, int(r["label"]), (float(r["gt"][0]), float(r["gt"][1])),
                       int(r["mission"]), r["domain_tag"], r["split"])
            if not 0 <= s.label < grid.num_classes:
                raise ValueError(f"label {s.label} out of range")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as e:
            raise ParseError(lineno, str(e)) from None
        if s.mission == 0:
            satellite.append(s)
        elif s.mission in by_id:
            m = by_id[s.mission]
            (m.train if s.split == "train" else m.test).append(s)
        else:
            raise ParseError(lineno, f"unknown mission {s.mission}")
    if len(lines) - 1 != n_samples:
        raise ParseError(len(lines) + 1, f"expected {n_samples} samples, found {len(lines) - 1} (truncated file?)")
    return Benchmark(grid, centroids, satellite, missions, domains, orders, header["config"], int(header["seed"]))
