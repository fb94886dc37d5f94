"""Deterministic rule-based user stand-in for training and evaluation.

The simulated user has one target item per session and answers attribute
questions by target-attribute membership, recommendation lists by whether
they contain the target.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import HeteroGraph, NodeKind, SchemaError


@dataclass(frozen=True)
class SimulatedUser:
    user: int
    target: int
    target_attrs: frozenset[int]
    attr_universe: frozenset[int]


def make_simulated_user(graph: HeteroGraph, user: int, target: int) -> SimulatedUser:
    if graph.kind(target) != NodeKind.ITEM:
        raise SchemaError(f"target {target} is {graph.kind(target).name}, expected ITEM")
    return SimulatedUser(
        user=user,
        target=target,
        target_attrs=frozenset(int(a) for a in graph.item_attributes(target)),
        attr_universe=frozenset(int(a) for a in graph.attributes),
    )


def respond_attribute(sim: SimulatedUser, attr: int) -> bool:
    """Accept iff the asked attribute belongs to the target item."""
    if attr not in sim.attr_universe:
        raise SchemaError(f"node {attr} is not an attribute")
    return attr in sim.target_attrs


def respond_recommendation(sim: SimulatedUser, items: Sequence[int]) -> bool:
    """Accept iff the target item appears in the recommended list."""
    if len(items) == 0:
        raise ValueError("recommendation list is empty")
    return sim.target in items


def seed_attribute(sim: SimulatedUser, rng: np.random.Generator) -> int:
    """The preferred attribute the user states when the session opens."""
    if not sim.target_attrs:
        raise ValueError(f"target item {sim.target} has no attributes to seed from")
    return int(rng.choice(sorted(sim.target_attrs)))
