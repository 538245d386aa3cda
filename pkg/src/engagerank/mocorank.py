"""Momentum-queue ranking loss and the baseline losses it is compared against.

The ranking mechanism keeps a slowly updated copy of the model (the momentum
encoder) and a FIFO pool of (label, score, embedding) triplets it produced.
Each training batch is ranked against every pool entry with a hinge whose
margin grows with the label gap and adapts to the cosine similarity of the
two embeddings.  Pool entries are constants: gradients reach only the batch
scores and, through the margin cosine, the batch embeddings.

Baselines: MSE to bin midpoints, softmax cross-entropy, class-balanced focal
loss, and a center-loss regularizer with the usual mean-shift center update.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import model as model_mod
from .featurepipe import Dataset, N_CLASSES

SCORE_TOL = 1e-9
MIDPOINTS = np.array([-0.75, -0.25, 0.25, 0.75])


@dataclass
class ScorePoolEntry:
    label: int
    score: float
    embedding: np.ndarray

    def __post_init__(self):
        if not 0 <= int(self.label) < N_CLASSES:
            raise ValueError(f"label must be 0..{N_CLASSES - 1}, got {self.label}")
        if abs(self.score) > 1.0 + SCORE_TOL:
            raise ValueError("score out of range")
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if not np.all(np.isfinite(self.embedding)):
            raise ValueError("pool embedding must be finite")


class ScorePool:
    """Fixed-capacity FIFO of scored samples, stored as flat arrays."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("pool capacity must be positive")
        self.capacity = capacity
        self._labels = np.zeros(capacity, dtype=np.int64)
        self._scores = np.zeros(capacity)
        self._embeddings: Optional[np.ndarray] = None
        self._count = 0
        self._next = 0

    def __len__(self) -> int:
        return self._count

    @property
    def full(self) -> bool:
        return self._count == self.capacity

    @property
    def labels(self) -> np.ndarray:
        return self._labels[:self._count] if not self.full else self._labels

    @property
    def scores(self) -> np.ndarray:
        return self._scores[:self._count] if not self.full else self._scores

    @property
    def embeddings(self) -> np.ndarray:
        if self._embeddings is None:
            raise ValueError("empty pool")
        return self._embeddings[:self._count] if not self.full else self._embeddings

    def push(self, labels, scores, embeddings) -> "ScorePool":
        """Append a batch, evicting the same number of oldest entries if full."""
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        embeddings = np.asarray(embeddings, dtype=np.float64)
        b = labels.size
        if b == 0:
            return self
        if b > self.capacity:
            raise ValueError(
                f"cannot push {b} entries into a pool of capacity {self.capacity}")
        if scores.shape != (b,) or embeddings.shape[0] != b or embeddings.ndim != 2:
            raise ValueError("labels, scores, and embeddings must agree in batch size")
        if np.any((labels < 0) | (labels >= N_CLASSES)):
            raise ValueError(f"label must be 0..{N_CLASSES - 1}")
        if np.any(np.abs(scores) > 1.0 + SCORE_TOL):
            raise ValueError("score out of range")
        if not np.all(np.isfinite(embeddings)):
            raise ValueError("pool embedding must be finite")
        if self._embeddings is None:
            self._embeddings = np.zeros((self.capacity, embeddings.shape[1]))
        elif embeddings.shape[1] != self._embeddings.shape[1]:
            raise ValueError("pool embedding length changed")
        # ring write: position _next is always the oldest slot once full
        idx = (self._next + np.arange(b)) % self.capacity
        self._labels[idx] = labels
        self._scores[idx] = scores
        self._embeddings[idx] = embeddings
        self._next = int((self._next + b) % self.capacity)
        self._count = min(self._count + b, self.capacity)
        return self

    def push_entries(self, entries: list[ScorePoolEntry]) -> "ScorePool":
        return self.push(np.array([e.label for e in entries]),
                         np.array([e.score for e in entries]),
                         np.stack([e.embedding for e in entries]))

    def entries(self) -> list[ScorePoolEntry]:
        """Current contents, oldest first."""
        if self._count == 0:
            return []
        if self.full:
            order = (self._next + np.arange(self.capacity)) % self.capacity
        else:
            order = np.arange(self._count)
        return [ScorePoolEntry(int(self._labels[i]), float(self._scores[i]),
                               self._embeddings[i].copy()) for i in order]

    def state(self) -> dict:
        """Raw ring-buffer arrays for bit-exact checkpointing.

        The internal slot order is part of the state: restoring entries in a
        rotated order would change floating-point reduction order in the loss.
        """
        return {
            "labels": self._labels.copy(),
            "scores": self._scores.copy(),
            "embeddings": (self._embeddings.copy() if self._embeddings is not None
                           else np.zeros((0, 0))),
            "count": self._count,
            "next": self._next,
            "capacity": self.capacity,
        }

    @classmethod
    def from_state(cls, state: dict) -> "ScorePool":
        pool = cls(int(state["capacity"]))
        pool._labels[...] = np.asarray(state["labels"], dtype=np.int64)
        pool._scores[...] = np.asarray(state["scores"], dtype=np.float64)
        emb = np.asarray(state["embeddings"], dtype=np.float64)
        if emb.size:
            pool._embeddings = emb.copy()
        pool._count = int(state["count"])
        pool._next = int(state["next"])
        return pool


@dataclass
class MomentumEncoder:
    """Slowly trailing copy of the model, used to score pool entries."""

    params: model_mod.ModelParams
    momentum: float = 0.999

    @classmethod
    def from_model(cls, params: model_mod.ModelParams, momentum: float = 0.999):
        return cls(params=params.copy(), momentum=momentum)

    def score_records(self, records, use_audio: bool = False):
        """Eval-mode scores and pre-head embeddings for a list of records."""
        chunks, gfeat, speech, meta, has_speech = model_mod.prepare_batch(
            records, self.params.config)
        trace = model_mod.forward_batch(chunks, gfeat, self.params, mode="eval",
                                        use_audio=use_audio, speech=speech,
                                        meta=meta, has_speech=has_speech)
        if trace.embedding is None:
            raise ValueError("cannot pool a mixed visual/audio batch")
        return trace.score, trace.embedding


def momentum_update(enc: MomentumEncoder, model_params: model_mod.ModelParams,
                    m: float = 0.999) -> MomentumEncoder:
    """In-place w_m <- m*w_m + (1-m)*w for every tensor; returns enc."""
    if list(enc.params.keys()) != list(model_params.keys()):
        raise ValueError("momentum encoder parameters do not match the model")
    for k, wm in enc.params.items():
        w = model_params[k]
        if wm.shape != w.shape:
            raise ValueError("momentum encoder parameters do not match the model")
        wm *= m
        wm += (1.0 - m) * w
    return enc


def pool_init(dataset: Dataset, enc: MomentumEncoder, capacity: int, seed: int,
              use_audio: bool = False) -> ScorePool:
    """Fill a fresh pool with ceil(capacity/4) records per class, shuffled.

    Classes short on records are sampled with replacement.  Scores and
    embeddings come from the momentum encoder in eval mode.
    """
    rng = np.random.default_rng(seed)
    per_class = math.ceil(capacity / N_CLASSES)
    labels = dataset.labels()
    picked: list[int] = []
    for cls in range(N_CLASSES):
        cls_idx = np.flatnonzero(labels == cls)
        if cls_idx.size == 0:
            raise ValueError(f"class {cls} missing; score pool needs every class")
        picked.extend(rng.choice(cls_idx, size=per_class,
                                 replace=cls_idx.size < per_class).tolist())
    picked = picked[:capacity]
    order = rng.permutation(len(picked))
    records = [dataset.records[picked[i]] for i in order]
    scores, embeddings = enc.score_records(records, use_audio=use_audio)
    pool = ScorePool(capacity)
    pool.push(np.array([r.label for r in records]), scores, embeddings)
    return pool


def pool_push(pool: ScorePool, entries: list[ScorePoolEntry]) -> ScorePool:
    """FIFO batch insert; the oldest len(entries) items leave a full pool."""
    return pool.push_entries(entries)


# ---------------------------------------------------------------------------
# Ranking loss
# ---------------------------------------------------------------------------

def _cosine_rows(a: np.ndarray, b: np.ndarray):
    """Cosine of every row of a against every row of b, zero rows scored 0."""
    an = np.linalg.norm(a, axis=1)
    bn = np.linalg.norm(b, axis=1)
    dead_a, dead_b = an == 0.0, bn == 0.0
    if dead_a.any() or dead_b.any():
        warnings.warn("zero-norm embedding; cosine taken as 0", RuntimeWarning,
                      stacklevel=3)
    safe_an = np.where(dead_a, 1.0, an)
    safe_bn = np.where(dead_b, 1.0, bn)
    cos = (a @ b.T) / np.outer(safe_an, safe_bn)
    cos[dead_a, :] = 0.0
    cos[:, dead_b] = 0.0
    return cos, safe_an, dead_a


def margin(diff: int, e1: np.ndarray, e2: np.ndarray) -> float:
    """Margin for a label gap of diff, adapted to the embeddings' cosine.

    With c = (cos+1)/2 the margins are 0.5c, 0.5 + 0.5c, and 1.0 + 0.5c for
    gaps of 1, 2, and 3.
    """
    if diff not in (1, 2, 3):
        raise ValueError("label difference must be 1, 2, or 3")
    e1 = np.asarray(e1, dtype=np.float64).reshape(1, -1)
    e2 = np.asarray(e2, dtype=np.float64).reshape(1, -1)
    cos, _, _ = _cosine_rows(e1, e2)
    c = (float(cos[0, 0]) + 1.0) / 2.0
    return 0.5 * (diff - 1) + 0.5 * c


def pairwise_term(l1: int, s1: float, e1: np.ndarray, entry: ScorePoolEntry) -> float:
    """Raw (un-hinged) ranking residual of one sample against one pool entry."""
    l2, s2 = int(entry.label), entry.score
    if l1 == l2:
        return abs(s1 - s2)
    m = margin(abs(l1 - l2), e1, entry.embedding)
    if l1 > l2:
        return m - (s1 - s2)
    return m - (s2 - s1)


def pairwise_matrix(scores: np.ndarray, labels: np.ndarray,
                    embeddings: np.ndarray, pool: ScorePool) -> dict:
    """All intermediate (batch x pool) quantities of the ranking loss.

    Returned keys: f (raw residuals), same (label-match mask), diff (score
    differences), k (signed label gaps), cos, e_norms, e_dead, active
    (hinge-live mask).  Shared by the loss itself and by kink-signature
    collection in gradient checks.
    """
    if len(pool) == 0:
        raise ValueError("empty pool")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    b = scores.size
    if labels.shape != (b,) or embeddings.shape[0] != b:
        raise ValueError("scores, labels, and embeddings must agree in batch size")

    pl, ps, pe = pool.labels, pool.scores, pool.embeddings
    cos, e_norms, e_dead = _cosine_rows(embeddings, pe)
    k = labels[:, None] - pl[None, :]                      # signed label gap (B, P)
    same = k == 0
    diff = scores[:, None] - ps[None, :]
    m = 0.5 * (np.abs(k) - 1) + 0.5 * (cos + 1.0) / 2.0
    f = np.where(same, np.abs(diff), m - np.sign(k) * diff)
    return {"f": f, "same": same, "diff": diff, "k": k, "cos": cos,
            "e_norms": e_norms, "e_dead": e_dead, "active": f > 0.0}


def multi_margin_loss(scores: np.ndarray, labels: np.ndarray,
                      embeddings: np.ndarray, pool: ScorePool,
                      detach_margin: bool = False):
    """Mean hinge over every (batch sample, pool entry) pair.

    Same-label pairs pay the absolute score difference; cross-label pairs pay
    the shortfall of the score gap against a margin that widens with the
    label gap and with the cosine similarity of the embeddings.  Returns
    (loss, d_scores, d_embeddings); pool entries receive no gradient, and
    ``detach_margin`` stops the gradient that flows through the cosine.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    pairs = pairwise_matrix(scores, labels, embeddings, pool)
    f, same, diff, k = pairs["f"], pairs["same"], pairs["diff"], pairs["k"]
    cos, e_norms, e_dead = pairs["cos"], pairs["e_norms"], pairs["e_dead"]
    active = pairs["active"]                               # subgradient 0 at f == 0
    b, p = f.shape
    scale = 1.0 / (b * p)
    loss = float(np.sum(np.maximum(f, 0.0)) * scale)

    d_pair = np.where(same, np.sign(diff), -np.sign(k).astype(np.float64))
    d_scores = (active * d_pair).sum(axis=1) * scale

    d_embeddings = np.zeros_like(embeddings)
    if not detach_margin:
        # df/dcos = 0.25 on active cross-label pairs
        pe = pool.embeddings
        w = 0.25 * scale * (active & ~same)
        pn = np.linalg.norm(pe, axis=1)
        p_hat = np.divide(pe, np.where(pn == 0.0, 1.0, pn)[:, None])
        e_hat = embeddings / e_norms[:, None]
        d_embeddings = (w @ p_hat - ((w * cos).sum(axis=1))[:, None] * e_hat)
        d_embeddings /= e_norms[:, None]
        d_embeddings[e_dead] = 0.0
    return loss, d_scores, d_embeddings


# ---------------------------------------------------------------------------
# Baseline losses
# ---------------------------------------------------------------------------

def mse_loss(scores: np.ndarray, labels: np.ndarray):
    """Mean squared error of scores against per-class bin midpoints."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    targets = MIDPOINTS[labels]
    resid = scores - targets
    loss = float(np.mean(resid ** 2))
    return loss, 2.0 * resid / scores.size


def _log_softmax(logits: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def ce_loss(logits: np.ndarray, labels: np.ndarray):
    """Softmax cross-entropy, mean over the batch."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b = labels.size
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(b), labels].mean())
    d = np.exp(logp)
    d[np.arange(b), labels] -= 1.0
    return loss, d / b


def cb_focal_loss(logits: np.ndarray, labels: np.ndarray, class_counts,
                  beta: float = 0.9999, gamma: float = 2.0):
    """Class-balanced focal loss: effective-number weights times a focal term.

    The weight for class y is (1-beta)/(1-beta^n_y) and the focal term is
    (1-p_y)^gamma * (-log p_y).  beta=0 and gamma=0 reduce to cross-entropy.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must be in [0, 1)")
    counts = np.asarray(class_counts, dtype=np.float64).reshape(-1)
    if counts.size != N_CLASSES or np.any(counts <= 0):
        raise ValueError("class counts must be positive for all classes")
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b = labels.size

    if beta == 0.0:
        class_w = np.ones(N_CLASSES)
    else:
        class_w = (1.0 - beta) / (1.0 - beta ** counts)
    w = class_w[labels]

    logp = _log_softmax(logits)
    p = np.exp(logp)
    idx = np.arange(b)
    py = p[idx, labels]
    log_py = logp[idx, labels]
    one_minus = np.maximum(1.0 - py, 0.0)
    focal = one_minus ** gamma * (-log_py)
    loss = float(np.mean(w * focal))

    # dF/dp_y, with the gamma=0 branch avoiding 0^(gamma-1)
    if gamma == 0.0:
        df_dpy = -1.0 / py
    else:
        df_dpy = gamma * one_minus ** (gamma - 1.0) * log_py - one_minus ** gamma / py
    chain = w * df_dpy * py / b                            # (B,)
    d = -chain[:, None] * p
    d[idx, labels] += chain
    return loss, d


@dataclass
class ClassCenters:
    """One feature-space anchor per class, moved toward its class mean."""

    values: np.ndarray
    alpha: float = 0.5

    @classmethod
    def zeros(cls, embed_dim: int, alpha: float = 0.5) -> "ClassCenters":
        return cls(values=np.zeros((N_CLASSES, embed_dim)), alpha=alpha)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != N_CLASSES:
            raise ValueError(f"centers must be {N_CLASSES} x embed_dim")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("centers must be finite")


def center_loss(embeddings: np.ndarray, labels: np.ndarray,
                centers: ClassCenters, weight: float = 0.2):
    """Pull embeddings toward their class centers.

    Loss is weight * mean of half squared distances.  Gradients go to the
    embeddings only; the returned centers are a new object moved toward each
    class's batch mean by the mean-shift rule delta = sum(c - e)/(1 + n),
    scaled by the center update rate.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b = labels.size
    c_y = centers.values[labels]
    resid = embeddings - c_y
    loss = float(weight * 0.5 * np.sum(resid ** 2) / b)
    d_embeddings = weight * resid / b

    new_values = centers.values.copy()
    for cls in np.unique(labels):
        mask = labels == cls
        n = int(mask.sum())
        delta = (centers.values[cls] - embeddings[mask]).sum(axis=0) / (1.0 + n)
        new_values[cls] = centers.values[cls] - centers.alpha * delta
    return loss, d_embeddings, ClassCenters(values=new_values, alpha=centers.alpha)
