"""Desk-scale place-recognition model: tanh-affine extractor plus a linear softmax head.

All gradients are written out by hand; there is no autodiff dependency.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


SPLITS = ("train", "test", "anchor", "unvisited")


@dataclass(frozen=True, eq=False)
class Sample:
    id: int
    raw: np.ndarray
    label: int
    gt: Tuple[float, float]
    mission: int
    domain_tag: str
    split: str

    def __repr__(self):
        return f"Sample(id={self.id}, label={self.label}, mission={self.mission}, split={self.split!r})"


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Extractor ``z = tanh(A x + a)`` and head ``v = W z + b``; row ``W[y]`` is the class prototype."""

    A: np.ndarray
    a: np.ndarray
    W: np.ndarray
    b: np.ndarray

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, d_in: int, dim: int, num_classes: int, rng: np.random.Generator) -> "ModelParams":
        A = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(dim, d_in))
        W = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_classes, dim))
        return cls(A, np.zeros(dim), W, np.zeros(num_classes))

    def arrays(self):
        return (self.A, self.a, self.W, self.b)

    def copy(self) -> "ModelParams":
        return ModelParams(*(x.copy() for x in self.arrays()))

    def equals(self, other: "ModelParams") -> bool:
        return all(np.array_equal(x, y) for x, y in zip(self.arrays(), other.arrays()))

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in zip("A a W b".split(), self.arrays())}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in "A a W b".split()))


def stack_raw(samples: Sequence[Sample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, 0))
    try:
        X = np.array([s.raw for s in samples], dtype=np.float64)
    except ValueError as e:
        raise ShapeError("samples have differing raw dimensions") from e
    if X.ndim != 2:
        raise ShapeError("raw vectors must be 1-d")
    return X


def stack_labels(samples: Sequence[Sample]) -> np.ndarray:
    return np.fromiter((s.label for s in samples), dtype=np.int64, count=len(samples))


def embed(params: ModelParams, raw: np.ndarray) -> np.ndarray:
    """Embed one raw vector (``d_in``) or a batch of rows (``n x d_in``)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != params.d_in:
        raise ShapeError(f"raw has dimension {raw.shape[-1]}, expected {params.d_in}")
    return np.tanh(raw @ params.A.T + params.a)


def logits(params: ModelParams, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != params.dim:
        raise ShapeError(f"embedding has dimension {z.shape[-1]}, expected {params.dim}")
    return z @ params.W.T + params.b


def predict(params: ModelParams, raw: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the smallest label on ties
    return np.argmax(logits(params, embed(params, raw)), axis=-1)


def log_softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - np.max(v, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(v: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(v))


def ce_loss(v: np.ndarray, label) -> np.ndarray:
    """Cross-entropy ``-log softmax(v)[label]``; vectorized over leading axes."""
    lp = log_softmax(np.asarray(v, dtype=np.float64))
    label = np.asarray(label)
    if lp.ndim == 1:
        return max(-lp[int(label)], 0.0)
    return np.maximum(-np.take_along_axis(lp, label[:, None], axis=1)[:, 0], 0.0)


@dataclass
class MixedBatch:
    current: list
    anchors: list = field(default_factory=list)
    replay: list = field(default_factory=list)
    replay_logits: Optional[np.ndarray] = None

    def sizes(self):
        return len(self.current), len(self.anchors), len(self.replay)


@dataclass(frozen=True)
class LossExtras:
    """Method-specific regularizer added on top of the three cross-entropy terms.

    ``kind`` is one of ``None``, ``"lwf"`` (KL to the teacher on the current part),
    ``"icarl"`` (KL to the teacher on every part) or ``"derpp"`` (MSE between
    replay logits and the logits stored with them).
    """

    kind: Optional[str] = None
    weight: float = 0.0
    teacher: Optional[ModelParams] = None


def total_loss_and_grads(
    params: ModelParams,
    batch: MixedBatch,
    lambda_ex: float = 1.0,
    lambda_er: float = 1.0,
    extras: LossExtras = LossExtras(),
) -> Tuple[float, ModelParams]:
    """Total mixed-batch loss and its exact gradient (returned as a ``ModelParams``)."""
    n_cur, n_ex, n_er = batch.sizes()
    if n_cur == 0:
        raise EmptyBatch("current part of the batch is empty")
    samples = list(batch.current) + list(batch.anchors) + list(batch.replay)
    X = stack_raw(samples)
    y = stack_labels(samples)
    n = len(samples)

    Z = embed(params, X)
    V = logits(params, Z)
    lp = log_softmax(V)
    P = np.exp(lp)

    # per-row weight of each cross-entropy term
    row_w = np.empty(n)
    row_w[:n_cur] = 1.0 / n_cur
    if n_ex:
        row_w[n_cur:n_cur + n_ex] = lambda_ex / n_ex
    if n_er:
        row_w[n_cur + n_ex:] = lambda_er / n_er
    rows = np.arange(n)
    loss = float(np.sum(row_w * -lp[rows, y]))
    dV = P * row_w[:, None]
    dV[rows, y] -= row_w

    if extras.kind in ("lwf", "icarl") and extras.weight:
        if extras.teacher is None:
            raise ValueError(f"{extras.kind} needs a teacher model")
        m = n_cur if extras.kind == "lwf" else n
        teacher_lp = log_softmax(logits(extras.teacher, embed(extras.teacher, X[:m])))
        teacher_p = np.exp(teacher_lp)
        kl = np.sum(teacher_p * (teacher_lp - lp[:m]), axis=1)
        loss += extras.weight * float(np.mean(kl))
        dV[:m] += (extras.weight / m) * (P[:m] - teacher_p)
    elif extras.kind == "derpp" and extras.weight and n_er:
        if batch.replay_logits is None:
            raise ValueError("derpp needs stored replay logits")
        diff = V[n_cur + n_ex:] - batch.replay_logits
        loss += extras.weight * float(np.mean(diff ** 2))
        dV[n_cur + n_ex:] += extras.weight * 2.0 * diff / diff.size
    elif extras.kind not in (None, "lwf", "icarl", "derpp"):
        raise ValueError(f"unknown loss extra {extras.kind!r}")

    dW = dV.T @ Z
    db = dV.sum(axis=0)
    dH = (dV @ params.W) * (1.0 - Z ** 2)
    dA = dH.T @ X
    da = dH.sum(axis=0)
    return loss, ModelParams(dA, da, dW, db)


def sgd_step(params: ModelParams, grads: ModelParams, lr_extractor: float, lr_head: float) -> ModelParams:
    if not (lr_extractor > 0 and lr_head > 0):
        raise ValueError("learning rates must be positive")
    return ModelParams(
        params.A - lr_extractor * grads.A,
        params.a - lr_extractor * grads.a,
        params.W - lr_head * grads.W,
        params.b - lr_head * grads.b,
    )


def build_mixed_batch(current, anchors, replay, quotas, rng: np.random.Generator, replay_logits=None) -> MixedBatch:
    """Draw each part uniformly with replacement up to its quota; an empty source gives an empty part."""
    if not current:
        raise EmptyBatch("current mission has no training samples")
    parts = []
    picks = []
    for source, quota in zip((current, anchors, replay), quotas):
        if not source or quota <= 0:
            idx = np.zeros(0, dtype=np.int64)
        else:
            idx = rng.integers(0, len(source), size=quota)
        picks.append(idx)
        parts.append([source[i] for i in idx])
    stored = None
    if replay_logits is not None and len(picks[2]):
        stored = np.asarray(replay_logits)[picks[2]]
    return MixedBatch(parts[0], parts[1], parts[2], stored)
