"""Factorization-machine scorer with pairwise ranking updates.

Scoring is bilinear over node embeddings: an item (or attribute) target is
scored against a context vector built from the user embedding plus the
embeddings of the user's accepted attributes. Training takes plain SGD
steps on the pairwise log-sigmoid ranking loss, with L2 applied only to
embeddings touched by the batch. Scoring never mutates the model.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .checkpoint import load_arrays, save_arrays

FORMAT_VERSION = 1


class FmError(Exception):
    pass


class UnknownIdError(FmError):
    pass


class EmptyCandidatesError(FmError):
    pass


class UndefinedMetricError(FmError):
    pass


@dataclass(frozen=True)
class FmHyper:
    dim: int = 64
    lr: float = 0.01
    l2: float = 1e-4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")


@dataclass(frozen=True)
class PreferenceContext:
    """A user plus the ordered attributes they have accepted so far."""

    user: int
    attrs: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if len(set(self.attrs)) != len(self.attrs):
            raise ValueError("accepted attribute list contains duplicates")

    def with_attr(self, attr: int) -> "PreferenceContext":
        return PreferenceContext(self.user, self.attrs + (attr,))


def sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-x))


class FmModel:
    """Embedding table over every graph node plus pure scoring functions."""

    def __init__(self, emb: np.ndarray, hyper: FmHyper):
        if emb.ndim != 2:
            raise ValueError("embedding table must be 2-D")
        self.emb = emb
        self.hyper = hyper

    @classmethod
    def init(cls, n_nodes: int, hyper: FmHyper) -> "FmModel":
        rng = np.random.default_rng(hyper.seed)
        emb = rng.normal(0.0, 0.01, size=(n_nodes, hyper.dim))
        return cls(emb, hyper)

    @property
    def n_rows(self) -> int:
        return self.emb.shape[0]

    def clone(self) -> "FmModel":
        return FmModel(self.emb.copy(), self.hyper)

    def add_user(self) -> int:
        """Append a zero-initialized row for a cold-start user; returns its id."""
        self.emb = np.vstack([self.emb, np.zeros((1, self.emb.shape[1]))])
        return self.n_rows - 1

    def snapshot(self) -> np.ndarray:
        return self.emb.copy()

    def restore(self, snap: np.ndarray) -> None:
        self.emb = snap.copy()

    def _check(self, *ids: int) -> None:
        for node in ids:
            if not 0 <= node < self.n_rows:
                raise UnknownIdError(f"unknown node id {node}")

    def context_vector(self, ctx: PreferenceContext) -> np.ndarray:
        self._check(ctx.user, *ctx.attrs)
        vec = self.emb[ctx.user].copy()
        for attr in ctx.attrs:
            vec += self.emb[attr]
        return vec

    # -- scoring -----------------------------------------------------------

    def score_item(self, ctx: PreferenceContext, item: int) -> float:
        self._check(item)
        return float(self.emb[item] @ self.context_vector(ctx))

    def score_items(self, ctx: PreferenceContext, items: np.ndarray) -> np.ndarray:
        if len(items):
            self._check(int(items.min()), int(items.max()))
        return self.emb[items] @ self.context_vector(ctx)

    def score_attribute(self, ctx: PreferenceContext, attr: int) -> float:
        self._check(attr)
        return float(self.emb[attr] @ self.context_vector(ctx))

    def score_attributes(self, ctx: PreferenceContext, attrs: np.ndarray) -> np.ndarray:
        if len(attrs):
            self._check(int(attrs.min()), int(attrs.max()))
        return self.emb[attrs] @ self.context_vector(ctx)

    def attr_probability(self, ctx: PreferenceContext, attr: int) -> float:
        return float(sigmoid(self.score_attribute(ctx, attr)))

    def attr_probabilities(self, ctx: PreferenceContext, attrs: np.ndarray) -> np.ndarray:
        return sigmoid(self.score_attributes(ctx, attrs))

    def rank_items(self, ctx: PreferenceContext, candidates: np.ndarray, k: int) -> list[int]:
        """Top-k candidates by score, ties broken by ascending id."""
        if len(candidates) == 0:
            raise EmptyCandidatesError("rank_items requires a nonempty candidate set")
        candidates = np.asarray(candidates, dtype=np.int64)
        scores = self.score_items(ctx, candidates)
        order = np.lexsort((candidates, -scores))
        return candidates[order][: min(k, len(candidates))].tolist()

    # -- pairwise training -------------------------------------------------

    def pairwise_loss_items(
        self,
        batch: Sequence[tuple[PreferenceContext, int, int]],
    ) -> float:
        return self._pairwise_loss(batch)

    def pairwise_loss_attrs(
        self,
        batch: Sequence[tuple[PreferenceContext, int, int]],
    ) -> float:
        return self._pairwise_loss(batch)

    def _pairwise_loss(self, batch: Sequence[tuple[PreferenceContext, int, int]]) -> float:
        loss = 0.0
        touched: set[int] = set()
        for ctx, pos, neg in batch:
            delta = self._target_score(ctx, pos) - self._target_score(ctx, neg)
            loss += -float(np.log(sigmoid(delta)))
            touched.update((ctx.user, pos, neg))
            touched.update(ctx.attrs)
        loss += self.hyper.l2 * sum(float(self.emb[t] @ self.emb[t]) for t in touched)
        return loss

    def _target_score(self, ctx: PreferenceContext, target: int) -> float:
        self._check(target)
        return float(self.emb[target] @ self.context_vector(ctx))

    def pairwise_gradients(
        self,
        batch: Sequence[tuple[PreferenceContext, int, int]],
    ) -> tuple[float, dict[int, np.ndarray]]:
        """Pre-step loss plus per-row gradients of the pairwise loss.

        Gradients are accumulated term by term, so repeated ids (e.g. the
        positive attribute also sitting in the context) stay exact.
        """
        grads: dict[int, np.ndarray] = {}
        touched: set[int] = set()
        loss = 0.0

        def acc(node: int, vec: np.ndarray) -> None:
            if node in grads:
                grads[node] += vec
            else:
                grads[node] = vec.copy()

        for ctx, pos, neg in batch:
            self._check(ctx.user, pos, neg, *ctx.attrs)
            u = self.emb[ctx.user]
            e_pos = self.emb[pos]
            e_neg = self.emb[neg]
            delta = float(u @ e_pos) - float(u @ e_neg)
            for attr in ctx.attrs:
                p = self.emb[attr]
                delta += float(e_pos @ p) - float(e_neg @ p)
            sig = float(sigmoid(delta))
            loss += -float(np.log(sig))
            g = sig - 1.0
            # d/d(theta) of -ln sigma(delta), term by term.
            acc(ctx.user, g * (e_pos - e_neg))
            acc(pos, g * u)
            acc(neg, -g * u)
            for attr in ctx.attrs:
                p = self.emb[attr]
                acc(pos, g * p)
                acc(neg, -g * p)
                acc(attr, g * (e_pos - e_neg))
            touched.update((ctx.user, pos, neg))
            touched.update(ctx.attrs)

        for node in touched:
            loss += self.hyper.l2 * float(self.emb[node] @ self.emb[node])
            acc(node, 2.0 * self.hyper.l2 * self.emb[node])
        return loss, grads

    def bpr_step_items(
        self,
        batch: Sequence[tuple[PreferenceContext, int, int]],
        lr: Optional[float] = None,
    ) -> float:
        """One SGD step on the item ranking loss; returns the pre-step loss."""
        return self._bpr_step(batch, lr)

    def bpr_step_attrs(
        self,
        batch: Sequence[tuple[PreferenceContext, int, int]],
        lr: Optional[float] = None,
    ) -> float:
        """One SGD step on the attribute ranking loss; returns the pre-step loss."""
        return self._bpr_step(batch, lr)

    def _bpr_step(
        self,
        batch: Sequence[tuple[PreferenceContext, int, int]],
        lr: Optional[float],
    ) -> float:
        if not batch:
            return 0.0
        loss, grads = self.pairwise_gradients(batch)
        step = self.hyper.lr if lr is None else lr
        for node, grad in grads.items():
            self.emb[node] -= step * grad
        return loss

    # -- evaluation ----------------------------------------------------------

    def auc(
        self,
        ctx: PreferenceContext,
        positives: Sequence[int],
        negatives: Sequence[int],
        attribute_targets: bool = False,
    ) -> float:
        """Probability a random positive outscores a random negative; ties count half.

        Computed from average ranks, which matches pairwise counting exactly.
        """
        if len(positives) == 0 or len(negatives) == 0:
            raise UndefinedMetricError("auc needs at least one positive and one negative")
        pos = np.asarray(positives, dtype=np.int64)
        neg = np.asarray(negatives, dtype=np.int64)
        if attribute_targets:
            scores = self.score_attributes(ctx, np.concatenate([pos, neg]))
        else:
            scores = self.score_items(ctx, np.concatenate([pos, neg]))
        return auc_from_scores(scores[: len(pos)], scores[len(pos) :])

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path, extra_meta: Optional[dict] = None) -> None:
        meta = {
            "format_version": FORMAT_VERSION,
            "kind": "fm",
            "dim": self.hyper.dim,
            "lr": self.hyper.lr,
            "l2": self.hyper.l2,
            "seed": self.hyper.seed,
        }
        if extra_meta:
            meta.update(extra_meta)
        save_arrays(path, {"emb": self.emb}, meta)

    @classmethod
    def load(cls, path: str | Path) -> "FmModel":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "fm":
            raise FmError(f"{path}: not an FM checkpoint")
        hyper = FmHyper(
            dim=int(meta["dim"]), lr=float(meta["lr"]), l2=float(meta["l2"]),
            seed=int(meta["seed"]),
        )
        return cls(arrays["emb"], hyper)


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their group's average rank."""
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    lower = upper - counts + 1
    return ((lower + upper) / 2.0)[inverse]


def auc_from_scores(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    n_pos, n_neg = len(pos_scores), len(neg_scores)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc needs at least one positive and one negative")
    ranks = average_ranks(np.concatenate([pos_scores, neg_scores]))
    return float((ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
