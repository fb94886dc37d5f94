"""Uncertainty-driven attribute asking.

Each ask turn the sampler featurizes every unasked attribute (prediction
entropy, clipped degree centrality, symmetric KL against co-occurring
attributes, asked flag), runs a one-layer graph convolution over the pool's
co-occurrence subgraph, and turns the scores into a softmax distribution.
Training samples from it; inference takes the top-k. The policy is
pretrained with REINFORCE where the per-step reward is the gain in the
recommender's validation AUC after incorporating the simulated label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .data import AttrTriple
from .fm import FmModel, PreferenceContext
from .graph import HeteroGraph

PROB_CLAMP = 1e-6
FEATURE_DIM = 4


class ActiveSamplerError(Exception):
    pass


@dataclass(frozen=True)
class ActiveHyper:
    hidden: int = 16
    seed: int = 0


@dataclass
class ActiveState:
    """Per-candidate features over the current attribute pool.

    ``adjacency`` holds pool-index neighbor lists of the co-occurrence
    projection (two attributes linked iff they share an item).
    """

    pool: np.ndarray
    entropy: np.ndarray
    degree: np.ndarray
    kl: np.ndarray
    selected: np.ndarray
    adjacency: list[np.ndarray]

    def features(self) -> np.ndarray:
        return np.column_stack([self.entropy, self.degree, self.kl, self.selected])


def bernoulli_entropy(y: np.ndarray) -> np.ndarray:
    y = np.clip(y, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(y * np.log(y) + (1.0 - y) * np.log(1.0 - y))


def bernoulli_kl(a: float, b: float) -> float:
    a = min(max(a, PROB_CLAMP), 1.0 - PROB_CLAMP)
    b = min(max(b, PROB_CLAMP), 1.0 - PROB_CLAMP)
    return a * np.log(a / b) + (1.0 - a) * np.log((1.0 - a) / (1.0 - b))


def build_state(
    graph: HeteroGraph,
    fm: FmModel,
    ctx: PreferenceContext,
    pool: np.ndarray,
    asked: Optional[set[int]] = None,
    degree_scale: float = 20.0,
) -> ActiveState:
    if len(pool) == 0:
        raise ActiveSamplerError("attribute pool is empty")
    pool = np.sort(np.asarray(pool, dtype=np.int64))
    asked = asked or set()

    probs = fm.attr_probabilities(ctx, pool)
    entropy = bernoulli_entropy(probs)
    degree = np.array(
        [min(graph.degree(int(p)) / degree_scale, 1.0) for p in pool]
    )
    selected = np.array([1.0 if int(p) in asked else 0.0 for p in pool])

    index_of = {int(p): j for j, p in enumerate(pool)}
    adjacency: list[np.ndarray] = []
    for p in pool:
        nbrs = [index_of[int(q)] for q in graph.attribute_neighbors(int(p)) if int(q) in index_of]
        adjacency.append(np.asarray(nbrs, dtype=np.int64))

    clamped = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    kl = np.zeros(len(pool))
    for j in range(len(pool)):
        nbrs = adjacency[j]
        if len(nbrs) == 0:
            continue
        a = clamped[j]
        b = clamped[nbrs]
        forward = a * np.log(a / b) + (1.0 - a) * np.log((1.0 - a) / (1.0 - b))
        backward = b * np.log(b / a) + (1.0 - b) * np.log((1.0 - b) / (1.0 - a))
        kl[j] = float(np.mean(forward + backward))

    return ActiveState(pool, entropy, degree, kl, selected, adjacency)


def normalized_adjacency(adjacency: list[np.ndarray]) -> np.ndarray:
    """Dense symmetric-normalized adjacency with self-loops."""
    n = len(adjacency)
    mat = np.eye(n)
    for j, nbrs in enumerate(adjacency):
        mat[j, nbrs] = 1.0
    inv_sqrt = 1.0 / np.sqrt(mat.sum(axis=1))
    return mat * inv_sqrt[:, None] * inv_sqrt[None, :]


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


@dataclass
class _ForwardCache:
    propagated: np.ndarray
    pre_hidden: np.ndarray
    hidden: np.ndarray
    scores: np.ndarray


class ActivePolicy:
    """One-layer GCN plus linear head scoring every pool candidate."""

    def __init__(self, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: float):
        self.w1, self.b1, self.w2 = w1, b1, w2
        self.b2 = float(b2)

    @classmethod
    def init(cls, hyper: ActiveHyper) -> "ActivePolicy":
        rng = np.random.default_rng(hyper.seed)
        w1 = rng.normal(0.0, 0.1, size=(FEATURE_DIM, hyper.hidden))
        w2 = rng.normal(0.0, 0.1, size=hyper.hidden)
        return cls(w1, np.zeros(hyper.hidden), w2, 0.0)

    def forward(self, state: ActiveState) -> _ForwardCache:
        propagated = normalized_adjacency(state.adjacency) @ state.features()
        pre_hidden = propagated @ self.w1 + self.b1
        hidden = np.maximum(pre_hidden, 0.0)
        scores = hidden @ self.w2 + self.b2
        return _ForwardCache(propagated, pre_hidden, hidden, scores)

    def distribution(self, state: ActiveState) -> np.ndarray:
        return softmax(self.forward(state).scores)

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": np.array([self.b2])}

    def apply_gradients(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.w1 += lr * grads["w1"]
        self.b1 += lr * grads["b1"]
        self.w2 += lr * grads["w2"]
        self.b2 += lr * float(grads["b2"][0])

    def save(self, path: str | Path, extra_meta: Optional[dict] = None) -> None:
        meta = {"format_version": 1, "kind": "active_policy"}
        if extra_meta:
            meta.update(extra_meta)
        save_arrays(path, self.params(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "ActivePolicy":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "active_policy":
            raise ValueError(f"{path}: not an active-policy checkpoint")
        return cls(arrays["w1"], arrays["b1"], arrays["w2"], float(arrays["b2"][0]))


@dataclass
class Selection:
    attrs: list[int]
    indices: list[int]
    log_prob: float
    cache: _ForwardCache


def select_attributes(
    policy: ActivePolicy,
    state: ActiveState,
    k_ask: int,
    mode: str,
    rng: Optional[np.random.Generator] = None,
) -> Selection:
    """Pick ``k_ask`` attributes: softmax sampling without replacement when
    ``mode == "sample"``, top-k (ties ascending id) when ``mode == "argmax"``.
    Truncates to the pool size."""
    if k_ask < 1:
        raise ValueError("k_ask must be >= 1")
    cache = policy.forward(state)
    n = len(state.pool)
    k = min(k_ask, n)
    if mode == "argmax":
        probs = softmax(cache.scores)
        order = np.lexsort((state.pool, -probs))
        indices = order[:k].tolist()
        return Selection([int(state.pool[j]) for j in indices], indices, 0.0, cache)
    if mode != "sample":
        raise ValueError(f"unknown selection mode {mode!r}")
    if rng is None:
        raise ValueError("sample mode requires an rng")
    remaining = np.ones(n, dtype=bool)
    indices: list[int] = []
    log_prob = 0.0
    for _ in range(k):
        masked = np.where(remaining, cache.scores, -np.inf)
        probs = softmax(masked)
        choice = int(rng.choice(n, p=probs))
        log_prob += float(np.log(probs[choice]))
        indices.append(choice)
        remaining[choice] = False
    return Selection([int(state.pool[j]) for j in indices], indices, log_prob, cache)


def grad_log_prob(
    policy: ActivePolicy, state: ActiveState, cache: _ForwardCache, indices: Sequence[int]
) -> dict[str, np.ndarray]:
    """Gradient of the (without-replacement) selection log-probability."""
    n = len(state.pool)
    d_scores = np.zeros(n)
    remaining = np.ones(n, dtype=bool)
    for choice in indices:
        masked = np.where(remaining, cache.scores, -np.inf)
        probs = softmax(masked)
        d_scores[choice] += 1.0
        d_scores -= probs
        remaining[choice] = False
    d_w2 = cache.hidden.T @ d_scores
    d_b2 = float(d_scores.sum())
    d_hidden = d_scores[:, None] * policy.w2[None, :]
    d_pre = d_hidden * (cache.pre_hidden > 0.0)
    d_w1 = cache.propagated.T @ d_pre
    d_b1 = d_pre.sum(axis=0)
    return {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": np.array([d_b2])}


def auc_gain(auc_before: float, auc_after: float) -> float:
    """Reward for one labeled attribute: the recommender's AUC improvement."""
    return auc_after - auc_before


def discounted_returns(rewards: Sequence[float], decay: float) -> list[float]:
    """Returns-to-go of the decay-weighted reward sum: G_t = sum_{t'>=t} decay^{t'-1} r_t'."""
    out = [0.0] * len(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc += decay**t * rewards[t]
        out[t] = acc
    return out


@dataclass
class ActivePretrainConfig:
    episodes: int = 200
    horizon: int = 8
    lr: float = 0.05
    decay: float = 0.95
    k_ask: int = 1
    online_lr: float = 0.02
    seed: int = 0
    use_baseline: bool = True


@dataclass
class EpisodeLog:
    episode: int
    episode_return: float
    rewards: list[float]
    auc_trajectory: list[float]


@dataclass
class ActiveEnvironment:
    """Per-user labeling environment for pretraining rollouts.

    Labels come from the user's positive-attribute set; each label triggers
    one FM attribute update, and reward is the validation-AUC gain.
    """

    graph: HeteroGraph
    fm: FmModel
    user: int
    pos_attrs: set[int]
    valid_pos: list[int]
    valid_neg: list[int]
    online_lr: float
    rng: np.random.Generator
    ctx: PreferenceContext = field(init=False)
    asked: set[int] = field(init=False, default_factory=set)

    def __post_init__(self) -> None:
        self.ctx = PreferenceContext(self.user)
        self.all_attrs = self.graph.attributes
        neg_pool = [int(a) for a in self.all_attrs if int(a) not in self.pos_attrs]
        self.neg_attr_pool = neg_pool

    def current_auc(self) -> float:
        return self.fm.auc(self.ctx, self.valid_pos, self.valid_neg, attribute_targets=True)

    def label_and_update(self, attr: int) -> bool:
        """Simulate the user's label for ``attr`` and fold it into the FM."""
        accepted = attr in self.pos_attrs
        if accepted:
            if self.neg_attr_pool:
                p_neg = int(self.rng.choice(np.asarray(self.neg_attr_pool)))
                self.fm.bpr_step_attrs([(self.ctx, attr, p_neg)], lr=self.online_lr)
        else:
            pos_pool = sorted(self.pos_attrs)
            if pos_pool:
                p_pos = int(self.rng.choice(np.asarray(pos_pool)))
                self.fm.bpr_step_attrs([(self.ctx, p_pos, attr)], lr=self.online_lr)
        self.asked.add(attr)
        if accepted:
            self.ctx = self.ctx.with_attr(attr)
        return accepted


def group_valid_attr_rows(oa_valid: Sequence[AttrTriple]) -> dict[int, tuple[list[int], list[int]]]:
    grouped: dict[int, tuple[list[int], list[int]]] = {}
    for row in oa_valid:
        pos, neg = grouped.setdefault(row.user, ([], []))
        pos.append(row.pos_attr)
        neg.append(row.neg_attr)
    return grouped


def pretrain_active(
    policy: ActivePolicy,
    oa_train: Sequence[AttrTriple],
    oa_valid: Sequence[AttrTriple],
    fm: FmModel,
    graph: HeteroGraph,
    user_pos_attrs: dict[int, set[int]],
    config: ActivePretrainConfig,
    log_path: Optional[str | Path] = None,
) -> list[EpisodeLog]:
    """REINFORCE pretraining per the labeling-rollout scheme.

    Each episode rolls a fresh horizon of ask decisions for one training
    user, collects AUC-gain rewards, applies one policy-gradient ascent
    step on the decayed returns, and restores the FM snapshot.
    """
    if not oa_train:
        raise ActiveSamplerError("cannot pretrain on an empty attribute pair set")
    valid_by_user = group_valid_attr_rows(oa_valid)
    usable = [row for row in oa_train if row.user in valid_by_user]
    if not usable:
        raise ActiveSamplerError("no training rows have validation rows for their user")

    order_rng = np.random.default_rng(config.seed)
    order = order_rng.permutation(len(usable))
    baselines: dict[int, tuple[float, int]] = {}
    logs: list[EpisodeLog] = []

    for episode in range(config.episodes):
        row = usable[int(order[episode % len(usable)])]
        env_rng = np.random.default_rng([config.seed, episode, 0])
        policy_rng = np.random.default_rng([config.seed, episode, 1])
        valid_pos, valid_neg = valid_by_user[row.user]
        snapshot = fm.snapshot()
        env = ActiveEnvironment(
            graph, fm, row.user, user_pos_attrs.get(row.user, set()),
            valid_pos, valid_neg, config.online_lr, env_rng,
        )
        pool = np.array(sorted(int(a) for a in graph.attributes), dtype=np.int64)
        auc_prev = env.current_auc()
        auc_traj = [auc_prev]
        rewards: list[float] = []
        step_grads: list[dict[str, np.ndarray]] = []
        for _ in range(config.horizon):
            if len(pool) == 0:
                break
            state = build_state(graph, fm, env.ctx, pool, env.asked)
            sel = select_attributes(policy, state, config.k_ask, "sample", policy_rng)
            step_grads.append(grad_log_prob(policy, state, sel.cache, sel.indices))
            for attr in sel.attrs:
                env.label_and_update(attr)
            pool = pool[~np.isin(pool, sel.attrs)]
            auc_now = env.current_auc()
            rewards.append(auc_gain(auc_prev, auc_now))
            auc_prev = auc_now
            auc_traj.append(auc_now)

        returns = discounted_returns(rewards, config.decay)
        total: dict[str, np.ndarray] = {}
        for t, grads in enumerate(step_grads):
            baseline = 0.0
            if config.use_baseline:
                mean, count = baselines.get(t, (0.0, 0))
                baseline = mean
                baselines[t] = (
                    (mean * count + returns[t]) / (count + 1),
                    count + 1,
                )
            weight = returns[t] - baseline
            for name, grad in grads.items():
                if name in total:
                    total[name] += weight * grad
                else:
                    total[name] = weight * grad
        if total:
            policy.apply_gradients(total, config.lr)
        fm.restore(snapshot)
        logs.append(
            EpisodeLog(episode, returns[0] if returns else 0.0, rewards, auc_traj)
        )

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for entry in logs:
                fh.write(
                    json.dumps(
                        {
                            "episode": entry.episode,
                            "return": entry.episode_return,
                            "auc_trajectory": entry.auc_trajectory,
                        }
                    )
                    + "\n"
                )
    return logs
