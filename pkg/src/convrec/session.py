"""Conversational session orchestration.

One session = one user, a shrinking candidate item set, and a turn loop
where the controller asks about an attribute or recommends a top-K list.
Accepted attributes filter the candidates; rejected recommendations become
explicit negatives. Every non-terminal turn ends with a bounded online
update of the session's private recommender copy using the accepted /
rejected attributes and the mined negative batch.

Sessions can be driven by the simulator (training and batch evaluation) or
externally one feedback at a time (the service).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from . import active as active_mod
from . import negative as negative_mod
from .active import ActivePolicy, bernoulli_entropy, build_state, select_attributes
from .dqn import (
    ASK,
    OUTCOME_ASK_ACCEPT,
    OUTCOME_ASK_REJECT,
    OUTCOME_REC_REJECT,
    QNet,
    REC,
    RewardTable,
    Transition,
    choose_action,
    encode_state,
    reward_of,
)
from .fm import FmModel, PreferenceContext
from .graph import HeteroGraph
from .negative import NegPolicy, build_pool, fallback_pool, score_pool, select_batch
from .simulator import SimulatedUser, respond_attribute, respond_recommendation, seed_attribute

STATUS_ACTIVE = "active"
STATUS_SUCCESS = "success"
STATUS_MAX_TURN_FAIL = "max_turn_fail"
STATUS_ABORTED = "aborted"


class SessionError(Exception):
    pass


@dataclass(frozen=True)
class SessionConfig:
    max_turns: int = 15
    top_k: int = 10
    neg_batch_size: int = 10
    online_lr: float = 0.02
    max_attr_triples_per_turn: int = 16
    ask_mode: str = "argmax"


# -- strategy hooks ----------------------------------------------------------


class AskSelector(Protocol):
    def select(
        self,
        graph: HeteroGraph,
        fm: FmModel,
        ctx: PreferenceContext,
        pool: np.ndarray,
        asked: set[int],
        candidates: np.ndarray,
        rng: np.random.Generator,
    ) -> int: ...


class ActiveAskSelector:
    """Asks the attribute chosen by the trained uncertainty policy."""

    def __init__(self, policy: ActivePolicy, mode: str = "argmax"):
        self.policy = policy
        self.mode = mode

    def select(self, graph, fm, ctx, pool, asked, candidates, rng) -> int:
        state = build_state(graph, fm, ctx, pool, asked)
        sel = select_attributes(self.policy, state, 1, self.mode, rng)
        return sel.attrs[0]


class MaxScoreAskSelector:
    """Ablation: ask the highest-scoring attribute (no uncertainty weighting)."""

    def select(self, graph, fm, ctx, pool, asked, candidates, rng) -> int:
        pool = np.sort(pool)
        scores = fm.score_attributes(ctx, pool)
        return int(pool[np.lexsort((pool, -scores))[0]])


class MaxEntropyAskSelector:
    """Baseline: ask the attribute with maximal frequency entropy among candidates."""

    def select(self, graph, fm, ctx, pool, asked, candidates, rng) -> int:
        pool = np.sort(pool)
        entropies = candidate_attribute_entropy(graph, candidates, pool)
        return int(pool[np.lexsort((pool, -entropies))[0]])


def candidate_attribute_entropy(
    graph: HeteroGraph, candidates: np.ndarray, pool: np.ndarray
) -> np.ndarray:
    """Binary entropy of each pool attribute's frequency among the candidates."""
    if len(candidates) == 0:
        return np.zeros(len(pool))
    freq = np.empty(len(pool))
    for j, attr in enumerate(pool):
        having = graph.items_with_attribute(int(attr))
        freq[j] = len(np.intersect1d(having, candidates, assume_unique=True))
    return bernoulli_entropy(freq / len(candidates))


class NegativeSource(Protocol):
    def batch(
        self,
        graph: HeteroGraph,
        fm: FmModel,
        user: int,
        anchor: Optional[int],
        user_pos: set[int],
        consumed: set[int],
        batch_size: int,
        rng: np.random.Generator,
    ) -> list[int]: ...


class HardNegativeSource:
    """Two-hop pool scored by the trained mining policy; uniform fallback."""

    def __init__(self, policy: NegPolicy, mode: str = "argmax"):
        self.policy = policy
        self.mode = mode

    def batch(self, graph, fm, user, anchor, user_pos, consumed, batch_size, rng) -> list[int]:
        if anchor is None:
            return []
        pool = build_pool(graph, user_pos, anchor, consumed)
        if len(pool) == 0:
            pool = fallback_pool(graph, user_pos, consumed)
            if len(pool) == 0:
                return []
            idx = rng.choice(len(pool), size=min(batch_size, len(pool)), replace=False)
            return sorted(int(pool[j]) for j in idx)
        weights, _ = score_pool(self.policy, fm, graph, user, anchor, pool)
        sel = select_batch(pool, weights, batch_size, self.mode, rng)
        return sel.items


class UniformNegativeSource:
    """Ablation: uniform random non-interacted items."""

    def batch(self, graph, fm, user, anchor, user_pos, consumed, batch_size, rng) -> list[int]:
        pool = fallback_pool(graph, user_pos, consumed)
        if len(pool) == 0:
            return []
        idx = rng.choice(len(pool), size=min(batch_size, len(pool)), replace=False)
        return sorted(int(pool[j]) for j in idx)


class ActionPolicy(Protocol):
    def choose(self, session: "ConversationSession") -> int: ...


class DqnActionPolicy:
    def __init__(self, qnet: QNet, eps: float = 0.0):
        self.qnet = qnet
        self.eps = eps

    def choose(self, session: "ConversationSession") -> int:
        return choose_action(self.qnet, session.encoded_state(), self.eps, session.rng)


class AlwaysRecommend:
    """Abs-greedy baseline: recommend every turn."""

    def choose(self, session: "ConversationSession") -> int:
        return REC


class RecommendWhenNarrow:
    """Ask until the candidate set fits the recommendation list."""

    def __init__(self, threshold: int):
        self.threshold = threshold

    def choose(self, session: "ConversationSession") -> int:
        return REC if len(session.candidates) <= self.threshold else ASK


# -- session -----------------------------------------------------------------


@dataclass
class Prompt:
    kind: str  # "ask" | "rec"
    turn: int
    attribute: Optional[int] = None
    items: Optional[list[int]] = None


@dataclass
class TurnRecord:
    turn: int
    action: str
    payload: dict
    response: str
    reward: float
    fm_loss: float
    n_triples: int


@dataclass
class SessionComponents:
    action_policy: ActionPolicy
    ask_selector: AskSelector
    negative_source: NegativeSource
    reward_table: RewardTable


class ConversationSession:
    """Owns one conversation's state; the caller supplies responses."""

    def __init__(
        self,
        graph: HeteroGraph,
        fm: FmModel,
        components: SessionComponents,
        user: int,
        config: SessionConfig,
        rng: np.random.Generator,
        train_positives: Optional[set[int]] = None,
        seed_attr: Optional[int] = None,
    ):
        self.graph = graph
        self.fm = fm
        self.components = components
        self.user = user
        self.config = config
        self.rng = rng
        self.train_positives = train_positives or set()
        self.anchor: Optional[int] = None
        if self.train_positives:
            self.anchor = int(rng.choice(sorted(self.train_positives)))

        self.p_pos: list[int] = []
        self.p_neg: list[int] = []
        self.asked: set[int] = set()
        self.rejected_items: set[int] = set()
        self.consumed_negatives: set[int] = set()
        self.candidates = graph.items.copy()
        self.pool = graph.attributes.copy()
        self.outcomes: list[int] = []
        self.transcript: list[TurnRecord] = []
        self.transitions: list[Transition] = []
        self.turn = 1
        self.status = STATUS_ACTIVE
        self._pending: Optional[Prompt] = None

        if seed_attr is not None:
            self._accept_attribute(seed_attr, record=False)

    # -- state views --------------------------------------------------------

    @property
    def ctx(self) -> PreferenceContext:
        return PreferenceContext(self.user, tuple(self.p_pos))

    def encoded_state(self) -> np.ndarray:
        return encode_state(
            self.outcomes,
            self.turn,
            len(self.candidates),
            self.config.max_turns,
            len(self.graph.items),
        )

    # -- turn machinery -------------------------------------------------------

    def next_prompt(self) -> Optional[Prompt]:
        """Compute the current turn's prompt (idempotent until responded)."""
        if self.status != STATUS_ACTIVE:
            return None
        if self._pending is not None:
            return self._pending
        if len(self.candidates) == 0:
            self.status = STATUS_ABORTED
            return None
        action = self.components.action_policy.choose(self)
        if len(self.pool) == 0:
            action = REC  # nothing left to ask about
        if action == ASK:
            attr = self.components.ask_selector.select(
                self.graph, self.fm, self.ctx, self.pool, self.asked,
                self.candidates, self.rng,
            )
            self._pending = Prompt("ask", self.turn, attribute=attr)
        else:
            items = self.fm.rank_items(self.ctx, self.candidates, self.config.top_k)
            self._pending = Prompt("rec", self.turn, items=items)
        return self._pending

    def respond(self, accept: bool) -> None:
        """Apply the user's feedback to the pending prompt and advance one turn."""
        if self.status != STATUS_ACTIVE:
            raise SessionError(f"session is {self.status}")
        if self._pending is None:
            raise SessionError("no pending prompt; call next_prompt() first")
        prompt = self._pending
        self._pending = None
        state_before = self.encoded_state()

        # The negative batch is mined every turn, before the outcome is known.
        neg_batch = self.components.negative_source.batch(
            self.graph, self.fm, self.user, self.anchor, self.train_positives,
            self.consumed_negatives, self.config.neg_batch_size, self.rng,
        )

        if prompt.kind == "ask":
            attr = prompt.attribute
            assert attr is not None
            if accept:
                self._accept_attribute(attr, record=True)
                event, outcome = "ask_suc", OUTCOME_ASK_ACCEPT
            else:
                self.p_neg.append(attr)
                self.asked.add(attr)
                self.pool = self.pool[self.pool != attr]
                event, outcome = "ask_fail", OUTCOME_ASK_REJECT
            payload = {"attribute": attr}
            success = False
        else:
            items = prompt.items or []
            payload = {"items": items}
            if accept:
                event, outcome, success = "rec_suc", None, True
            else:
                self.rejected_items.update(items)
                self.candidates = np.setdiff1d(
                    self.candidates, np.asarray(items, dtype=np.int64), assume_unique=True
                )
                neg_batch = neg_batch + [j for j in items if j not in neg_batch]
                event, outcome, success = "rec_fail", OUTCOME_REC_REJECT, False

        terminal = success or self.turn >= self.config.max_turns
        if success:
            reward = reward_of(self.components.reward_table, "rec_suc")
            self.status = STATUS_SUCCESS
            fm_loss, n_triples = 0.0, 0
        else:
            if terminal:
                reward = reward_of(self.components.reward_table, "reach_max_turn")
                self.status = STATUS_MAX_TURN_FAIL
            else:
                reward = reward_of(self.components.reward_table, event)
            self.consumed_negatives.update(neg_batch)
            fm_loss, n_triples = self.online_update(neg_batch)
        if outcome is not None:
            self.outcomes.append(outcome)
        elif not success:
            self.outcomes.append(OUTCOME_ASK_REJECT)

        self.transcript.append(
            TurnRecord(
                self.turn, prompt.kind, payload,
                "accept" if accept else "reject", reward, fm_loss, n_triples,
            )
        )
        completed_turn = self.turn
        self.turn += 1
        state_after = encode_state(
            self.outcomes,
            min(self.turn, self.config.max_turns),
            len(self.candidates),
            self.config.max_turns,
            len(self.graph.items),
        )
        self.transitions.append(
            Transition(state_before, ASK if prompt.kind == "ask" else REC,
                       reward, state_after, terminal)
        )
        if self.status == STATUS_ACTIVE and completed_turn >= self.config.max_turns:
            self.status = STATUS_MAX_TURN_FAIL

    def _accept_attribute(self, attr: int, record: bool) -> None:
        self.p_pos.append(attr)
        self.asked.add(attr)
        self.pool = self.pool[self.pool != attr]
        self.candidates = np.intersect1d(
            self.candidates, self.graph.items_with_attribute(attr), assume_unique=True
        )
        if record:
            pass  # transcript entry is written by respond()

    def online_update(self, neg_batch: list[int]) -> tuple[float, int]:
        """Bounded pairwise updates from session feedback and the mined batch."""
        ctx = self.ctx
        attr_triples: list[tuple[PreferenceContext, int, int]] = []
        neg_attr_pool = list(dict.fromkeys(self.p_neg))
        batch_attr_negs = sorted(
            {
                int(a)
                for j in neg_batch
                for a in self.graph.item_attributes(j)
                if int(a) not in self.p_pos
            }
        )
        neg_attr_pool += [a for a in batch_attr_negs if a not in neg_attr_pool]
        if neg_attr_pool:
            for p_pos in self.p_pos:
                p_neg = int(self.rng.choice(np.asarray(neg_attr_pool)))
                attr_triples.append((ctx, p_pos, p_neg))
        attr_triples = attr_triples[: self.config.max_attr_triples_per_turn]

        item_triples: list[tuple[PreferenceContext, int, int]] = []
        if self.anchor is not None:
            item_triples = [(ctx, self.anchor, j) for j in neg_batch]

        loss = 0.0
        if attr_triples:
            loss += self.fm.bpr_step_attrs(attr_triples, lr=self.config.online_lr)
        if item_triples:
            loss += self.fm.bpr_step_items(item_triples, lr=self.config.online_lr)
        return loss, len(attr_triples) + len(item_triples)


def run_session(
    sim: SimulatedUser,
    graph: HeteroGraph,
    fm: FmModel,
    components: SessionComponents,
    config: SessionConfig,
    rng: np.random.Generator,
    train_positives: Optional[set[int]] = None,
) -> ConversationSession:
    """Drive a full session against the simulator until it terminates."""
    session = ConversationSession(
        graph, fm, components, sim.user, config, rng,
        train_positives=train_positives,
        seed_attr=seed_attribute(sim, rng),
    )
    while session.status == STATUS_ACTIVE:
        prompt = session.next_prompt()
        if prompt is None:
            break
        if prompt.kind == "ask":
            assert prompt.attribute is not None
            session.respond(respond_attribute(sim, prompt.attribute))
        else:
            session.respond(respond_recommendation(sim, prompt.items or []))
    return session


# -- transcript export --------------------------------------------------------


def transcript_lines(session: ConversationSession, meta: Optional[dict] = None) -> list[str]:
    header = {
        "record": "session",
        "user": session.user,
        "status": session.status,
        "end_turn": len(session.transcript),
        "max_turns": session.config.max_turns,
        "top_k": session.config.top_k,
    }
    if meta:
        header.update(meta)
    lines = [json.dumps(header, sort_keys=True)]
    for rec in session.transcript:
        lines.append(
            json.dumps(
                {
                    "record": "turn",
                    "turn": rec.turn,
                    "action": rec.action,
                    "payload": rec.payload,
                    "response": rec.response,
                    "reward": rec.reward,
                    "fm_loss": rec.fm_loss,
                    "n_triples": rec.n_triples,
                },
                sort_keys=True,
            )
        )
    return lines


@dataclass
class SessionSummary:
    """What the evaluation harness needs from one finished session."""

    success: bool
    end_turn: int
    actions: list[str]
    user: int = -1
    status: str = ""


def summarize_session(session: ConversationSession) -> SessionSummary:
    return SessionSummary(
        success=session.status == STATUS_SUCCESS,
        end_turn=len(session.transcript),
        actions=[rec.action for rec in session.transcript],
        user=session.user,
        status=session.status,
    )


def parse_transcript(lines: Sequence[str]) -> SessionSummary:
    header = json.loads(lines[0])
    if header.get("record") != "session":
        raise SessionError("transcript must start with a session record")
    actions = []
    for line in lines[1:]:
        rec = json.loads(line)
        if rec.get("record") == "turn":
            actions.append(rec["action"])
    return SessionSummary(
        success=header["status"] == STATUS_SUCCESS,
        end_turn=header["end_turn"],
        actions=actions,
        user=header.get("user", -1),
        status=header["status"],
    )
