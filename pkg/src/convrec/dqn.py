"""Two-action conversational controller: ask vs. recommend.

A two-layer feed-forward Q-network over the encoded session state, trained
with standard deep Q-learning (replay buffer, target network, epsilon-greedy
exploration). Reward values come from selectable preset tables.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_arrays, save_arrays

ASK = 0
REC = 1

EVENTS = ("ask_suc", "ask_fail", "rec_suc", "rec_fail", "reach_max_turn")

# Per-turn outcome slots in the state encoding.
OUTCOME_EMPTY = 0
OUTCOME_ASK_ACCEPT = 1
OUTCOME_ASK_REJECT = 2
OUTCOME_REC_REJECT = 3
_N_OUTCOMES = 4


@dataclass(frozen=True)
class RewardTable:
    ask_suc: float
    ask_fail: float
    rec_suc: float
    rec_fail: float
    reach_max_turn: float


REWARD_PRESETS: dict[str, RewardTable] = {
    "r_cpr": RewardTable(0.01, -0.1, 1.0, -0.1, -0.3),
    "r_ask_more": RewardTable(0.1, -0.1, 1.0, -1.0, -0.3),
    "r_rec_more": RewardTable(0.01, -0.1, 1.0, -0.01, -0.3),
    "r_ear": RewardTable(0.01 + 0.1, 0.01 + 0.0, 0.01 + 1.0, 0.01 + 0.0, -0.3),
}


def reward_of(table: RewardTable, event: str) -> float:
    if event not in EVENTS:
        raise ValueError(f"unknown reward event {event!r}")
    return float(getattr(table, event))


def encode_state(
    outcomes: Sequence[int],
    turn: int,
    n_candidates: int,
    max_turns: int,
    n_items: int,
) -> np.ndarray:
    """Fixed-length session encoding: outcome one-hots, turn index, candidate mass.

    ``outcomes`` holds one OUTCOME_* code per completed turn; ``turn`` is the
    upcoming 1-based turn number.
    """
    if len(outcomes) > max_turns:
        raise ValueError("more recorded outcomes than turn slots")
    state = np.zeros(_N_OUTCOMES * max_turns + 2)
    for slot in range(max_turns):
        outcome = outcomes[slot] if slot < len(outcomes) else OUTCOME_EMPTY
        state[slot * _N_OUTCOMES + outcome] = 1.0
    state[-2] = turn / max_turns
    state[-1] = math.log1p(n_candidates) / math.log1p(n_items) if n_items > 0 else 0.0
    return state


def state_dim(max_turns: int) -> int:
    return _N_OUTCOMES * max_turns + 2


@dataclass(frozen=True)
class DqnHyper:
    hidden: int = 64
    discount: float = 0.99
    lr: float = 0.01
    eps_start: float = 1.0
    eps_end: float = 0.05
    buffer_capacity: int = 10_000
    batch_size: int = 128
    target_sync_every: int = 20
    seed: int = 0


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Bounded FIFO transition store."""

    def __init__(self, capacity: int):
        self._items: deque[Transition] = deque(maxlen=capacity)
        self.capacity = capacity

    def push(self, transition: Transition) -> None:
        self._items.append(transition)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[int(j)] for j in idx]

    def __len__(self) -> int:
        return len(self._items)


class QNet:
    """state -> hidden (ReLU) -> 2 action values."""

    def __init__(self, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator) -> "QNet":
        scale1 = 1.0 / math.sqrt(input_dim)
        scale2 = 1.0 / math.sqrt(hidden)
        return cls(
            rng.normal(0.0, scale1, size=(input_dim, hidden)),
            np.zeros(hidden),
            rng.normal(0.0, scale2, size=(hidden, 2)),
            np.zeros(2),
        )

    def q_values(self, state: np.ndarray) -> np.ndarray:
        hidden = np.maximum(state @ self.w1 + self.b1, 0.0)
        return hidden @ self.w2 + self.b2

    def q_batch(self, states: np.ndarray) -> np.ndarray:
        hidden = np.maximum(states @ self.w1 + self.b1, 0.0)
        return hidden @ self.w2 + self.b2

    def copy(self) -> "QNet":
        return QNet(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def save(self, path: str | Path, extra_meta: Optional[dict] = None) -> None:
        meta = {"format_version": 1, "kind": "qnet"}
        if extra_meta:
            meta.update(extra_meta)
        save_arrays(path, self.params(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "QNet":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "qnet":
            raise ValueError(f"{path}: not a q-network checkpoint")
        return cls(arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"])


def choose_action(q: QNet, state: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy action; exact ties resolve to ask."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must be in [0, 1]")
    if eps > 0.0 and rng.random() < eps:
        return int(rng.integers(2))
    values = q.q_values(state)
    return REC if values[REC] > values[ASK] else ASK


def td_targets(
    target_net: QNet, batch: Sequence[Transition], discount: float
) -> np.ndarray:
    next_states = np.stack([t.next_state for t in batch])
    next_q = target_net.q_batch(next_states).max(axis=1)
    rewards = np.array([t.reward for t in batch])
    terminal = np.array([t.terminal for t in batch])
    return rewards + discount * next_q * (~terminal)


def td_loss(q: QNet, target_net: QNet, batch: Sequence[Transition], discount: float) -> float:
    """Mean squared TD error of the batch under frozen targets."""
    states = np.stack([t.state for t in batch])
    actions = np.array([t.action for t in batch])
    predictions = q.q_batch(states)[np.arange(len(batch)), actions]
    errors = predictions - td_targets(target_net, batch, discount)
    return float(np.mean(errors**2))


def td_loss_gradients(
    q: QNet, target_net: QNet, batch: Sequence[Transition], discount: float
) -> tuple[float, dict[str, np.ndarray]]:
    states = np.stack([t.state for t in batch])
    actions = np.array([t.action for t in batch])
    n = len(batch)

    pre_hidden = states @ q.w1 + q.b1
    hidden = np.maximum(pre_hidden, 0.0)
    q_all = hidden @ q.w2 + q.b2
    predictions = q_all[np.arange(n), actions]
    errors = predictions - td_targets(target_net, batch, discount)
    loss = float(np.mean(errors**2))

    d_pred = 2.0 * errors / n
    d_q = np.zeros_like(q_all)
    d_q[np.arange(n), actions] = d_pred
    d_w2 = hidden.T @ d_q
    d_b2 = d_q.sum(axis=0)
    d_hidden = d_q @ q.w2.T
    d_pre = d_hidden * (pre_hidden > 0.0)
    d_w1 = states.T @ d_pre
    d_b1 = d_pre.sum(axis=0)
    return loss, {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2}


class DqnLearner:
    """Owns the online net, target net and replay buffer."""

    def __init__(self, input_dim: int, hyper: DqnHyper):
        self.hyper = hyper
        rng = np.random.default_rng(hyper.seed)
        self.qnet = QNet.init(input_dim, hyper.hidden, rng)
        self.target = self.qnet.copy()
        self.buffer = ReplayBuffer(hyper.buffer_capacity)
        self.rng = rng
        self.updates = 0

    def observe(self, transition: Transition) -> None:
        self.buffer.push(transition)

    def update(self) -> Optional[float]:
        """One TD step if the buffer holds a full batch; returns pre-step loss."""
        if len(self.buffer) < self.hyper.batch_size:
            return None
        batch = self.buffer.sample(self.hyper.batch_size, self.rng)
        loss, grads = td_loss_gradients(self.qnet, self.target, batch, self.hyper.discount)
        for name, grad in grads.items():
            param = getattr(self.qnet, name)
            param -= self.hyper.lr * grad
        self.updates += 1
        if self.updates % self.hyper.target_sync_every == 0:
            self.target = self.qnet.copy()
        return loss

    def epsilon(self, session_idx: int, total_sessions: int) -> float:
        if total_sessions <= 1:
            return self.hyper.eps_end
        frac = min(session_idx / (total_sessions - 1), 1.0)
        return self.hyper.eps_start + frac * (self.hyper.eps_end - self.hyper.eps_start)
