"""Heterogeneous memory: herding-built satellite anchors and the budgeted replay buffer.

Every selection here is deterministic; ties on score or distance always go to
the smallest sample id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from dilvpr.model import ModelParams, Sample, ce_loss, embed, logits, stack_labels, stack_raw

log = logging.getLogger(__name__)


class Allocator(str, Enum):
    GLOBAL = "GLOBAL"
    ROUND_ROBIN = "ROUND_ROBIN"
    MIN_GUAR = "MIN_GUAR"


@dataclass(frozen=True)
class AnchorSet:
    samples: Tuple[Sample, ...]
    per_class_cap: int = 12

    def __len__(self):
        return len(self.samples)


@dataclass
class ReplayBuffer:
    budget: int
    samples: List[Sample] = field(default_factory=list)
    stored_logits: Optional[Dict[int, np.ndarray]] = None
    # utility scores aligned with ``samples`` (scored policies only)
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        self.check()

    def check(self):
        if len(self.samples) > self.budget:
            raise AssertionError(f"buffer holds {len(self.samples)} samples, budget is {self.budget}")
        if self.stored_logits is not None:
            ids = {s.id for s in self.samples}
            stray = set(self.stored_logits) - ids
            if stray:
                raise AssertionError(f"stored logits for absent samples {sorted(stray)[:5]}")

    def __len__(self):
        return len(self.samples)

    def logits_matrix(self) -> Optional[np.ndarray]:
        if self.stored_logits is None or not self.samples:
            return None
        return np.stack([self.stored_logits[s.id] for s in self.samples])


@dataclass
class ScoredPool:
    pool: List[Sample]
    scores: np.ndarray
    # optional precomputed label array, saves a pass over the pool
    labels: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.pool) != len(self.scores):
            raise ValueError("pool and scores differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        self._ids = np.fromiter((s.id for s in self.pool), dtype=np.int64, count=len(self.pool))
        self._labels = stack_labels(self.pool) if self.labels is None else np.asarray(self.labels)

    def ranking(self, indices=None) -> List[int]:
        """Indices ordered by descending score, then ascending id."""
        if indices is None:
            idx = np.arange(len(self.pool))
        else:
            idx = np.fromiter(indices, dtype=np.intp)
        if not len(idx):
            return []
        return idx[np.lexsort((self._ids[idx], -self.scores[idx]))].tolist()


# --- herding -------------------------------------------------------------


def herding_select(embeddings_by_class: Mapping[int, Tuple[Sequence[int], np.ndarray]], cap: int) -> Dict[int, List[int]]:
    """Greedy herding per class.

    ``embeddings_by_class`` maps label -> (sample ids, embedding rows). Each pick is
    the sample whose inclusion brings the running mean closest to the class mean.
    Returns label -> selected ids in selection order.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    out = {}
    for label, (ids, Z) in embeddings_by_class.items():
        ids = np.asarray(ids)
        Z = np.asarray(Z, dtype=np.float64)
        if len(ids) == 0:
            log.warning("herding: class %s has no samples, skipped", label)
            continue
        out[label] = [int(ids[i]) for i in _herd(ids, Z, min(cap, len(ids)))]
    return out


def _herd(ids: np.ndarray, Z: np.ndarray, k: int) -> List[int]:
    mu = Z.mean(axis=0)
    running = np.zeros_like(mu)
    free = np.ones(len(ids), dtype=bool)
    chosen = []
    for t in range(1, k + 1):
        dist = np.linalg.norm(mu - (running + Z) / t, axis=1)
        dist[~free] = np.inf
        i = int(np.lexsort((ids, dist))[0])
        chosen.append(i)
        free[i] = False
        running = running + Z[i]
    return chosen


def group_by_class(samples: Sequence[Sample], Z: np.ndarray):
    groups: Dict[int, List[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.label, []).append(i)
    return {c: ([samples[i].id for i in idx], Z[idx]) for c, idx in sorted(groups.items())}


def build_anchor_set(params: ModelParams, satellite: Sequence[Sample], cap: int = 12) -> AnchorSet:
    Z = embed(params, stack_raw(satellite))
    picked = herding_select(group_by_class(satellite, Z), cap)
    by_id = {s.id: s for s in satellite}
    return AnchorSet(tuple(by_id[i] for c in sorted(picked) for i in picked[c]), cap)


# --- scoring -------------------------------------------------------------


def score_lbs(params: ModelParams, pool: Sequence[Sample]) -> np.ndarray:
    """Loss-based utility: cross-entropy of each sample under ``params``."""
    if not pool:
        raise ValueError("empty pool")
    return _lbs(params, stack_raw(pool), stack_labels(pool))


def _lbs(params, X, y):
    return ce_loss(logits(params, embed(params, X)), y)


def _unit_rows(M: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", M, M))[:, None]
    # zero vectors get cosine 0 with everything
    return np.divide(M, norms, out=np.zeros_like(M), where=norms > 0)


def score_dbs(params: ModelParams, pool: Sequence[Sample], lam: float = 1.0) -> np.ndarray:
    """Diversity-based utility ``-R``: pool density plus ``lam`` times prototype centrality."""
    if not pool:
        raise ValueError("empty pool")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return _dbs(params, stack_raw(pool), stack_labels(pool), lam)


def _dbs(params, X, y, lam):
    U = _unit_rows(embed(params, X))
    # sum over j != i of cos(z_i, z_j) = u_i . (sum_{j != i} u_j), linear in pool size
    density = np.einsum("ij,ij->i", U, U.sum(axis=0) - U)
    protos = _unit_rows(params.W)[y]
    centrality = np.einsum("ij,ij->i", U, protos)
    return -(density + lam * centrality)


# --- allocation ----------------------------------------------------------


def _pick(scored: ScoredPool, idx: Sequence[int]) -> List[Sample]:
    return [scored.pool[i] for i in idx]


def class_representatives(scored: ScoredPool) -> List[int]:
    best: Dict[int, int] = {}
    for i in scored.ranking():
        best.setdefault(scored.pool[i].label, i)
    return [best[c] for c in sorted(best)]


def allocate_min_guar(scored: ScoredPool, B: int) -> List[Sample]:
    if B < 1:
        raise ValueError("budget must be >= 1")
    if len(scored.pool) <= B:
        return list(scored.pool)
    full = np.array(scored.ranking())
    # first position of each label in the ranking is that class's best sample
    _, first = np.unique(scored._labels[full], return_index=True)
    is_rep = np.zeros(len(full), dtype=bool)
    is_rep[np.sort(first)] = True
    reps = full[is_rep]
    if B < len(reps):
        return _pick(scored, reps[:B])
    residual = full[~is_rep]
    return _pick(scored, np.concatenate([reps, residual[: B - len(reps)]]))


def allocate_global(scored: ScoredPool, B: int) -> List[Sample]:
    if B < 1:
        raise ValueError("budget must be >= 1")
    return _pick(scored, scored.ranking()[:B])


def allocate_round_robin(scored: ScoredPool, B: int) -> List[Sample]:
    if B < 1:
        raise ValueError("budget must be >= 1")
    queues: Dict[int, List[int]] = {}
    for i in scored.ranking():
        queues.setdefault(scored.pool[i].label, []).append(i)
    order = sorted(queues)
    chosen: List[int] = []
    depth = 0
    while len(chosen) < B and len(chosen) < len(scored.pool):
        for c in order:
            if depth < len(queues[c]):
                chosen.append(queues[c][depth])
                if len(chosen) == B:
                    break
        depth += 1
    return _pick(scored, chosen)


ALLOCATORS = {
    Allocator.GLOBAL: allocate_global,
    Allocator.ROUND_ROBIN: allocate_round_robin,
    Allocator.MIN_GUAR: allocate_min_guar,
}


def reservoir_update(pool: Sequence[Sample], B: int, rng: np.random.Generator) -> List[Sample]:
    """Uniform subset of size ``min(|pool|, B)`` drawn without replacement."""
    if B < 1:
        raise ValueError("budget must be >= 1")
    if len(pool) <= B:
        return list(pool)
    idx = np.sort(rng.choice(len(pool), size=B, replace=False))
    return [pool[i] for i in idx]


def herding_quotas(class_sizes: Mapping[int, int], B: int) -> Dict[int, int]:
    """Per-class slots ``floor(B / #classes)``, leftovers handed out one at a time to the largest classes."""
    if not class_sizes:
        return {}
    q = B // len(class_sizes)
    alloc = {c: min(q, n) for c, n in class_sizes.items()}
    left = B - sum(alloc.values())
    by_size = sorted(class_sizes, key=lambda c: (-class_sizes[c], c))
    while left > 0:
        progressed = False
        for c in by_size:
            if left == 0:
                break
            if alloc[c] < class_sizes[c]:
                alloc[c] += 1
                left -= 1
                progressed = True
        if not progressed:
            break
    return alloc


def herding_buffer(params: ModelParams, pool: Sequence[Sample], B: int) -> List[Sample]:
    if len(pool) <= B:
        return list(pool)
    Z = embed(params, stack_raw(pool))
    groups = group_by_class(pool, Z)
    quotas = herding_quotas({c: len(ids) for c, (ids, _) in groups.items()}, B)
    by_id = {s.id: s for s in pool}
    out = []
    for c, (ids, Zc) in groups.items():
        if quotas[c]:
            out.extend(by_id[i] for i in herding_select({c: (ids, Zc)}, quotas[c])[c])
    return out


def update_buffer(
    policy: str,
    params: ModelParams,
    current: Sequence[Sample],
    old: ReplayBuffer,
    B: int,
    rng: np.random.Generator,
    allocator: Allocator = Allocator.MIN_GUAR,
    dbs_lambda: float = 1.0,
    keep_logits: bool = False,
) -> ReplayBuffer:
    """Form ``P_k = current + old buffer`` and select the next buffer.

    ``policy`` is ``"lbs"``, ``"dbs"``, ``"reservoir"`` or ``"herding"``. Scored
    policies attach the retained samples' scores to the returned buffer. With ``keep_logits`` newly inserted samples get their logits under ``params``;
    surviving samples keep the logits recorded when they first entered.
    """
    pool = list(old.samples) + list(current)
    scores = None
    if policy in ("lbs", "dbs"):
        if dbs_lambda < 0:
            raise ValueError("lambda must be >= 0")
        X, y = stack_raw(pool), stack_labels(pool)
        raw_scores = _lbs(params, X, y) if policy == "lbs" else _dbs(params, X, y, dbs_lambda)
        scored = ScoredPool(pool, raw_scores, y)
        chosen = ALLOCATORS[Allocator(allocator)](scored, B)
        pos = {s.id: i for i, s in enumerate(pool)}
        scores = raw_scores[[pos[s.id] for s in chosen]]
    elif policy == "reservoir":
        chosen = reservoir_update(pool, B, rng)
    elif policy == "herding":
        chosen = herding_buffer(params, pool, B)
    else:
        raise ValueError(f"unknown buffer policy {policy!r}")

    stored = None
    if keep_logits:
        stored = {}
        old_logits = old.stored_logits or {}
        fresh = [s for s in chosen if s.id not in old_logits]
        if fresh:
            V = logits(params, embed(params, stack_raw(fresh)))
            stored.update({s.id: v for s, v in zip(fresh, V)})
        stored.update({s.id: old_logits[s.id] for s in chosen if s.id in old_logits})
    return ReplayBuffer(B, list(chosen), stored, scores)
