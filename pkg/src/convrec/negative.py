"""Hard-negative item mining over the graph neighborhood of a positive item.

Candidates are the two-hop items of the session's positive anchor (minus the
user's known positives). A one-layer graph convolution over the candidates'
local subgraph (with recommender embeddings as input features) feeds a
two-layer attention scorer conditioned on the user and anchor; softmax
weights drive batch selection. Pretraining uses REINFORCE with a
similarity-to-(user, positive) reward, so selected negatives sit close to
the decision boundary and yield large ranking-update gradients.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .data import ItemTriple
from .fm import FmModel, PreferenceContext
from .graph import HeteroGraph, NodeKind

logger = logging.getLogger(__name__)


class NegativeSamplerError(Exception):
    pass


@dataclass(frozen=True)
class NegHyper:
    gcn_dim: int = 16
    att_dim: int = 16
    batch_size: int = 10
    traversal_steps: int = 2
    seed: int = 0


def build_pool(
    graph: HeteroGraph,
    user_pos: set[int],
    i_pos: int,
    consumed: set[int],
) -> np.ndarray:
    """Two-hop items of the anchor, minus the user's positives and consumed ids."""
    pool = graph.two_hop_items(i_pos)
    pool -= user_pos
    pool -= consumed
    return np.array(sorted(pool), dtype=np.int64)


def fallback_pool(
    graph: HeteroGraph,
    user_pos: set[int],
    consumed: set[int],
) -> np.ndarray:
    """All non-positive items; used when the two-hop pool is exhausted."""
    items = graph.items
    mask = ~np.isin(items, sorted(user_pos | consumed))
    return items[mask]


@dataclass
class _NegForwardCache:
    nodes: np.ndarray
    pool_rows: np.ndarray
    propagated: np.ndarray
    pre_hidden: np.ndarray
    hidden: np.ndarray
    att_input: np.ndarray
    att_pre: np.ndarray
    att_hidden: np.ndarray
    scores: np.ndarray
    user_row: int
    anchor_row: int


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


class NegPolicy:
    """GCN encoder + two-layer attention scorer over a candidate pool."""

    def __init__(
        self,
        wg: np.ndarray,
        bg: np.ndarray,
        w1: np.ndarray,
        b1: np.ndarray,
        w2: np.ndarray,
        b2: float,
    ):
        self.wg, self.bg = wg, bg
        self.w1, self.b1, self.w2 = w1, b1, w2
        self.b2 = float(b2)

    @classmethod
    def init(cls, emb_dim: int, hyper: NegHyper) -> "NegPolicy":
        rng = np.random.default_rng(hyper.seed)
        wg = rng.normal(0.0, 0.1, size=(emb_dim, hyper.gcn_dim))
        w1 = rng.normal(0.0, 0.1, size=(3 * hyper.gcn_dim, hyper.att_dim))
        w2 = rng.normal(0.0, 0.1, size=hyper.att_dim)
        return cls(wg, np.zeros(hyper.gcn_dim), w1, np.zeros(hyper.att_dim), w2, 0.0)

    def params(self) -> dict[str, np.ndarray]:
        return {
            "wg": self.wg, "bg": self.bg,
            "w1": self.w1, "b1": self.b1,
            "w2": self.w2, "b2": np.array([self.b2]),
        }

    def apply_gradients(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.wg += lr * grads["wg"]
        self.bg += lr * grads["bg"]
        self.w1 += lr * grads["w1"]
        self.b1 += lr * grads["b1"]
        self.w2 += lr * grads["w2"]
        self.b2 += lr * float(grads["b2"][0])

    def save(self, path: str | Path, extra_meta: Optional[dict] = None) -> None:
        meta = {"format_version": 1, "kind": "negative_policy"}
        if extra_meta:
            meta.update(extra_meta)
        save_arrays(path, self.params(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "NegPolicy":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "negative_policy":
            raise ValueError(f"{path}: not a negative-policy checkpoint")
        return cls(
            arrays["wg"], arrays["bg"], arrays["w1"], arrays["b1"],
            arrays["w2"], float(arrays["b2"][0]),
        )

    def forward(
        self,
        fm: FmModel,
        graph: HeteroGraph,
        user: int,
        i_pos: int,
        pool: np.ndarray,
    ) -> _NegForwardCache:
        if len(pool) == 0:
            raise NegativeSamplerError("candidate pool is empty")
        node_set: set[int] = {user, i_pos}
        node_set.update(int(j) for j in pool)
        for item in pool:
            node_set.update(int(a) for a in graph.item_attributes(int(item)))
        node_set.update(int(a) for a in graph.item_attributes(i_pos))
        nodes = np.array(sorted(node_set), dtype=np.int64)
        index = {int(n): j for j, n in enumerate(nodes)}

        n = len(nodes)
        adj = np.eye(n)
        for j, node in enumerate(nodes):
            nbrs = graph.neighbors(int(node))
            if len(nbrs) == 0:
                continue
            pos = np.searchsorted(nodes, nbrs)
            valid = (pos < n) & (nodes[np.minimum(pos, n - 1)] == nbrs)
            adj[j, pos[valid]] = 1.0
        inv_sqrt = 1.0 / np.sqrt(adj.sum(axis=1))
        norm_adj = adj * inv_sqrt[:, None] * inv_sqrt[None, :]

        features = fm.emb[nodes]
        propagated = norm_adj @ features
        pre_hidden = propagated @ self.wg + self.bg
        hidden = np.maximum(pre_hidden, 0.0)

        pool_rows = np.array([index[int(j)] for j in pool], dtype=np.int64)
        user_row, anchor_row = index[user], index[i_pos]
        h_dim = hidden.shape[1]
        att_input = np.empty((len(pool), 3 * h_dim))
        att_input[:, :h_dim] = hidden[pool_rows]
        att_input[:, h_dim : 2 * h_dim] = hidden[user_row]
        att_input[:, 2 * h_dim :] = hidden[anchor_row]
        att_pre = att_input @ self.w1 + self.b1
        att_hidden = np.maximum(att_pre, 0.0)
        scores = att_hidden @ self.w2 + self.b2
        return _NegForwardCache(
            nodes, pool_rows, propagated, pre_hidden, hidden,
            att_input, att_pre, att_hidden, scores, user_row, anchor_row,
        )


def score_pool(
    policy: NegPolicy,
    fm: FmModel,
    graph: HeteroGraph,
    user: int,
    i_pos: int,
    pool: np.ndarray,
) -> tuple[np.ndarray, _NegForwardCache]:
    """Normalized candidate weights (softmax over attention scores)."""
    cache = policy.forward(fm, graph, user, i_pos, pool)
    return _softmax(cache.scores), cache


@dataclass
class BatchSelection:
    items: list[int]
    indices: list[int]
    log_prob: float


def select_batch(
    pool: np.ndarray,
    weights: np.ndarray,
    batch_size: int,
    mode: str,
    rng: Optional[np.random.Generator] = None,
) -> BatchSelection:
    """Top-B by weight (argmax) or weighted sampling without replacement (sample).

    Ties break by ascending id; the batch truncates to the pool size.
    """
    b = min(batch_size, len(pool))
    if mode == "argmax":
        order = np.lexsort((pool, -weights))
        indices = order[:b].tolist()
        return BatchSelection([int(pool[j]) for j in indices], indices, 0.0)
    if mode != "sample":
        raise ValueError(f"unknown selection mode {mode!r}")
    if rng is None:
        raise ValueError("sample mode requires an rng")
    remaining = weights.copy()
    indices: list[int] = []
    log_prob = 0.0
    for _ in range(b):
        probs = remaining / remaining.sum()
        choice = int(rng.choice(len(pool), p=probs))
        log_prob += float(np.log(probs[choice]))
        indices.append(choice)
        remaining[choice] = 0.0
    return BatchSelection([int(pool[j]) for j in indices], indices, log_prob)


def grad_log_prob(
    policy: NegPolicy, cache: _NegForwardCache, indices: Sequence[int]
) -> dict[str, np.ndarray]:
    """Gradient of the sampled batch's log-probability w.r.t. policy weights."""
    m = len(cache.scores)
    d_scores = np.zeros(m)
    remaining = np.ones(m, dtype=bool)
    for choice in indices:
        masked = np.where(remaining, cache.scores, -np.inf)
        probs = _softmax(masked)
        d_scores[choice] += 1.0
        d_scores -= probs
        remaining[choice] = False

    d_w2 = cache.att_hidden.T @ d_scores
    d_b2 = float(d_scores.sum())
    d_att_hidden = d_scores[:, None] * policy.w2[None, :]
    d_att_pre = d_att_hidden * (cache.att_pre > 0.0)
    d_w1 = cache.att_input.T @ d_att_pre
    d_b1 = d_att_pre.sum(axis=0)

    h_dim = cache.hidden.shape[1]
    d_att_input = d_att_pre @ policy.w1.T
    d_hidden = np.zeros_like(cache.hidden)
    np.add.at(d_hidden, cache.pool_rows, d_att_input[:, :h_dim])
    d_hidden[cache.user_row] += d_att_input[:, h_dim : 2 * h_dim].sum(axis=0)
    d_hidden[cache.anchor_row] += d_att_input[:, 2 * h_dim :].sum(axis=0)
    d_pre_hidden = d_hidden * (cache.pre_hidden > 0.0)
    d_wg = cache.propagated.T @ d_pre_hidden
    d_bg = d_pre_hidden.sum(axis=0)
    return {
        "wg": d_wg, "bg": d_bg,
        "w1": d_w1, "b1": d_b1,
        "w2": d_w2, "b2": np.array([d_b2]),
    }


def compute_reward(
    fm: FmModel,
    user: int,
    i_pos: int,
    batch: Sequence[int],
    normalize: bool = False,
) -> float:
    """Mean similarity of batch members to the user and the positive anchor."""
    if len(batch) == 0:
        logger.warning("empty negative batch, reward 0")
        return 0.0
    vecs = fm.emb[np.asarray(batch, dtype=np.int64)]
    e_u = fm.emb[user]
    e_i = fm.emb[i_pos]
    if normalize:
        def unit(v: np.ndarray) -> np.ndarray:
            norm = np.linalg.norm(v, axis=-1, keepdims=True)
            return np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)

        vecs, e_u, e_i = unit(vecs), unit(e_u), unit(e_i)
    return float(np.mean(vecs @ e_u + vecs @ e_i))


def discounted_returns(rewards: Sequence[float], decay: float) -> list[float]:
    out = [0.0] * len(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc += decay**t * rewards[t]
        out[t] = acc
    return out


@dataclass
class NegPretrainConfig:
    episodes: int = 200
    steps: int = 2
    batch_size: int = 10
    lr: float = 0.05
    decay: float = 0.95
    online_lr: float = 0.02
    seed: int = 0
    use_baseline: bool = True


@dataclass
class NegEpisodeLog:
    episode: int
    episode_return: float
    rewards: list[float]


def pretrain_negative(
    policy: NegPolicy,
    oi_train: Sequence[ItemTriple],
    fm: FmModel,
    graph: HeteroGraph,
    user_pos: dict[int, set[int]],
    config: NegPretrainConfig,
    log_path: Optional[str | Path] = None,
) -> list[NegEpisodeLog]:
    """REINFORCE pretraining over anchored graph traversals.

    Each episode grows the candidate pool from the anchor's two-hop
    neighborhood, selects negative batches, takes item ranking steps on
    them, and credits the similarity reward; the FM snapshot is restored
    afterwards so pretraining leaves the recommender unchanged.
    """
    if not oi_train:
        raise NegativeSamplerError("cannot pretrain on an empty item pair set")
    order_rng = np.random.default_rng(config.seed)
    order = order_rng.permutation(len(oi_train))
    baselines: dict[int, tuple[float, int]] = {}
    logs: list[NegEpisodeLog] = []

    for episode in range(config.episodes):
        row = oi_train[int(order[episode % len(oi_train)])]
        policy_rng = np.random.default_rng([config.seed, episode, 1])
        positives = user_pos.get(row.user, set())
        snapshot = fm.snapshot()
        ctx = PreferenceContext(
            row.user, tuple(int(a) for a in graph.item_attributes(row.pos_item))
        )
        anchor = row.pos_item
        consumed: set[int] = set()
        pool: set[int] = set()
        rewards: list[float] = []
        step_grads: list[dict[str, np.ndarray]] = []
        for _ in range(config.steps):
            pool |= graph.two_hop_items(anchor) - positives - consumed
            pool_arr = np.array(sorted(pool), dtype=np.int64)
            if len(pool_arr) == 0:
                break
            weights, cache = score_pool(policy, fm, graph, row.user, row.pos_item, pool_arr)
            sel = select_batch(pool_arr, weights, config.batch_size, "sample", policy_rng)
            step_grads.append(grad_log_prob(policy, cache, sel.indices))
            rewards.append(compute_reward(fm, row.user, row.pos_item, sel.items))
            fm.bpr_step_items(
                [(ctx, row.pos_item, j) for j in sel.items], lr=config.online_lr
            )
            consumed.update(sel.items)
            pool -= set(sel.items)
            anchor = sel.items[0]

        returns = discounted_returns(rewards, config.decay)
        total: dict[str, np.ndarray] = {}
        for t, grads in enumerate(step_grads):
            baseline = 0.0
            if config.use_baseline:
                mean, count = baselines.get(t, (0.0, 0))
                baseline = mean
                baselines[t] = ((mean * count + returns[t]) / (count + 1), count + 1)
            weight = returns[t] - baseline
            for name, grad in grads.items():
                if name in total:
                    total[name] += weight * grad
                else:
                    total[name] = weight * grad
        if total:
            policy.apply_gradients(total, config.lr)
        fm.restore(snapshot)
        logs.append(NegEpisodeLog(episode, returns[0] if returns else 0.0, rewards))

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for entry in logs:
                fh.write(
                    json.dumps(
                        {
                            "episode": entry.episode,
                            "return": entry.episode_return,
                            "mean_reward": (
                                sum(entry.rewards) / len(entry.rewards)
                                if entry.rewards else 0.0
                            ),
                        }
                    )
                    + "\n"
                )
    return logs
