"""Contrastive losses with analytic gradients.

``infonce_loss`` is the voxel-wise appearance loss (sum over positive pairs).
``prototypical_supcon_loss`` contrasts every sample against class prototypes
(class-mean embeddings), which costs n*K similarities instead of the n*(n-1)
of pairwise SupCon (``supcon_reference_loss``).

Inputs are expected to be unit-normalized; the losses do not normalize.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .similarity import exact_scores

_NORM_TOL = 1e-4


class SimilarityCounter:
    """Tallies embedding inner products evaluated by a loss."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)


def _check_unit(name: str, x: np.ndarray) -> None:
    if x.size == 0:
        return
    norms = np.linalg.norm(x, axis=-1)
    if np.abs(norms - 1.0).max() > _NORM_TOL:
        raise ValueError(f"{name} rows must be unit-norm (tolerance {_NORM_TOL})")


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")


@dataclass
class PairBatch:
    """Positive pairs (pos_a[i], pos_b[i]) and per-anchor negatives (n_pos, n_neg, C)."""

    pos_a: np.ndarray
    pos_b: np.ndarray
    negatives: np.ndarray
    tau: float = 0.5

    def __post_init__(self):
        self.pos_a = np.asarray(self.pos_a, dtype=np.float64)
        self.pos_b = np.asarray(self.pos_b, dtype=np.float64)
        neg = np.asarray(self.negatives, dtype=np.float64)
        if neg.size == 0 and self.pos_a.ndim == 2:
            neg = neg.reshape(self.pos_a.shape[0], 0, self.pos_a.shape[1])
        self.negatives = neg
        if self.pos_a.ndim != 2 or self.pos_a.shape[0] < 1:
            raise ValueError("pos_a must be an (n_pos >= 1, C) matrix")
        if self.pos_b.shape != self.pos_a.shape:
            raise ValueError(f"pos_b shape {self.pos_b.shape} != pos_a shape {self.pos_a.shape}")
        n, c = self.pos_a.shape
        if neg.ndim != 3 or neg.shape[0] != n or neg.shape[2] != c:
            raise ValueError(f"negatives must be (n_pos={n}, n_neg, C={c}), got {neg.shape}")
        _check_tau(self.tau)
        for name in ("pos_a", "pos_b", "negatives"):
            _check_unit(name, getattr(self, name))


@dataclass
class LabeledBatch:
    embeddings: np.ndarray
    labels: np.ndarray
    num_classes: int | None = None
    tau: float = 0.5

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValueError("embeddings must be an (n >= 1, C) matrix")
        if len(self.labels) != self.embeddings.shape[0]:
            raise ValueError(f"{len(self.labels)} labels for {self.embeddings.shape[0]} embeddings")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        _check_tau(self.tau)
        _check_unit("embeddings", self.embeddings)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def infonce_loss(batch: PairBatch, counter: SimilarityCounter | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Sum over anchors of -log softmax of the positive logit; grads keyed like the batch fields."""
    a, b, neg, tau = batch.pos_a, batch.pos_b, batch.negatives, batch.tau
    pos = np.einsum("ic,ic->i", a, b)
    negs = np.einsum("ic,ijc->ij", a, neg)
    logits = np.concatenate([pos[:, None], negs], axis=1) / tau
    if counter is not None:
        counter.add(logits.size)
    loss = float((logsumexp(logits, axis=1) - logits[:, 0]).sum())

    g = softmax(logits, axis=1)
    g[:, 0] -= 1.0
    grad_a = (g[:, :1] * b + np.einsum("ij,ijc->ic", g[:, 1:], neg)) / tau
    grad_b = g[:, :1] * a / tau
    grad_neg = g[:, 1:, None] * a[:, None, :] / tau
    return loss, {"pos_a": grad_a, "pos_b": grad_b, "negatives": grad_neg}


def _membership(batch: LabeledBatch) -> np.ndarray:
    counts = batch.class_counts
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"classes {missing} have no members in the batch")
    m = np.zeros((batch.num_classes, len(batch.labels)))
    m[batch.labels, np.arange(len(batch.labels))] = 1.0
    return m / counts[:, None]


def prototypes(batch: LabeledBatch) -> np.ndarray:
    """(K, C) class means; not re-normalized."""
    return _membership(batch) @ batch.embeddings


def prototypical_supcon_loss(batch: LabeledBatch, counter: SimilarityCounter | None = None) -> tuple[float, np.ndarray]:
    """Loss and (n, C) gradient, differentiating through the prototypes.

    Each class-p anchor is scored against its own prototype c_p, normalized
    over c_p's similarity to every sample in the batch.
    """
    x, y, tau = batch.embeddings, batch.labels, batch.tau
    member = _membership(batch)
    protos = member @ x
    logits = protos @ x.T / tau  # (K, n)
    if counter is not None:
        counter.add(logits.size)
    lse = logsumexp(logits, axis=1)
    loss = float(-(member * (logits - lse[:, None])).sum())

    g = softmax(logits, axis=1) - member  # dL/dlogits
    grad = (g.T @ protos + member.T @ (g @ x)) / tau
    return loss, grad


def supcon_reference_loss(batch: LabeledBatch, counter: SimilarityCounter | None = None) -> float:
    """Pairwise supervised contrastive loss (self excluded), summed over anchors with positives."""
    x, y, tau = batch.embeddings, batch.labels, batch.tau
    n = len(y)
    if n < 2:
        raise ValueError("pairwise SupCon needs at least two samples")
    loss = 0.0
    idx = np.arange(n)
    for i in range(n):
        others = idx != i
        logits = x[others] @ x[i] / tau
        if counter is not None:
            counter.add(n - 1)
        pos = y[others] == y[i]
        if not pos.any():
            continue
        loss -= float((logits[pos] - logsumexp(logits)).mean())
    return loss


def select_hard_negatives(anchor, candidates, n_hard: int, n_random: int, seed=None) -> np.ndarray:
    """Top ``n_hard`` candidates by similarity (ties: lowest index), then ``n_random``
    drawn without replacement from the rest, returned in ascending order."""
    cand = np.asarray(candidates, dtype=np.float64)
    m = cand.shape[0]
    if n_hard < 0 or n_random < 0 or n_hard + n_random > m:
        raise ValueError(f"cannot select {n_hard} hard + {n_random} random from {m} candidates")
    v = np.asarray(anchor, dtype=np.float64).reshape(1, -1)
    sims = exact_scores(v, np.zeros(m, dtype=np.intp), cand, np.arange(m))
    order = np.lexsort((np.arange(m), -sims))
    hard = order[:n_hard]
    rest = np.sort(order[n_hard:])
    rng = np.random.default_rng(seed)
    rand = np.sort(rng.choice(rest, size=n_random, replace=False)) if n_random else rest[:0]
    return np.concatenate([hard, rand]).astype(np.intp)
