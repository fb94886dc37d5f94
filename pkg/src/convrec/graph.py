"""Heterogeneous interaction/knowledge graph, sealed after load.

The graph mixes four node kinds (users, items, attributes, external
entities) and three edge kinds. It is built once from descriptor streams
and then serves read-only adjacency, degree and two-hop queries to the
samplers. All neighbor lists are sorted ascending so downstream RL
training is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Optional, Sequence

import numpy as np


class GraphError(Exception):
    """Base error for graph construction and queries."""


class SchemaError(GraphError):
    """An edge violates the kind rules or references a missing node."""


class NodeNotFoundError(GraphError):
    """A query referenced an unknown node id."""


class NodeKind(IntEnum):
    USER = 0
    ITEM = 1
    ATTRIBUTE = 2
    ENTITY = 3


class EdgeKind(IntEnum):
    INTERACT = 0
    HAS_ATTRIBUTE = 1
    EXTERNAL = 2


@dataclass(frozen=True)
class NodeDescriptor:
    node_id: int
    kind: NodeKind


@dataclass(frozen=True)
class EdgeDescriptor:
    head: int
    kind: EdgeKind
    tail: int
    label: Optional[str] = None


# Kind pairs allowed per edge kind (unordered).
_INTERACT_KINDS = {NodeKind.USER, NodeKind.ITEM}
_HAS_ATTR_KINDS = {NodeKind.ITEM, NodeKind.ATTRIBUTE}


def _check_edge_kinds(edge: EdgeDescriptor, head_kind: NodeKind, tail_kind: NodeKind) -> None:
    pair = {head_kind, tail_kind}
    if edge.kind == EdgeKind.INTERACT:
        if pair != _INTERACT_KINDS:
            raise SchemaError(
                f"interact edge {edge.head}->{edge.tail} must connect a user and an item, "
                f"got {head_kind.name}/{tail_kind.name}"
            )
    elif edge.kind == EdgeKind.HAS_ATTRIBUTE:
        if pair != _HAS_ATTR_KINDS:
            raise SchemaError(
                f"has-attribute edge {edge.head}->{edge.tail} must connect an item and an "
                f"attribute, got {head_kind.name}/{tail_kind.name}"
            )
    else:
        # External relations must touch at least one entity or attribute endpoint.
        if NodeKind.ENTITY not in pair and NodeKind.ATTRIBUTE not in pair:
            raise SchemaError(
                f"external edge {edge.head}->{edge.tail} must touch an entity or attribute, "
                f"got {head_kind.name}/{tail_kind.name}"
            )


class HeteroGraph:
    """Immutable heterogeneous graph with per-kind adjacency indices.

    Treated as undirected for traversal: every edge is indexed on both
    endpoints. Use :func:`load_graph` to construct one.
    """

    def __init__(
        self,
        kinds: np.ndarray,
        adj: list[np.ndarray],
        adj_kinds: list[np.ndarray],
        attr_of_item: dict[int, np.ndarray],
        items_of_attr: dict[int, np.ndarray],
        attr_cooc: dict[int, np.ndarray],
    ):
        self._kinds = kinds
        self._adj = adj
        self._adj_kinds = adj_kinds
        self._attr_of_item = attr_of_item
        self._items_of_attr = items_of_attr
        self._attr_cooc = attr_cooc
        self._by_kind = {
            kind: np.flatnonzero(kinds == int(kind)) for kind in NodeKind
        }

    # -- basic queries ---------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self._kinds)

    def kind(self, node: int) -> NodeKind:
        self._check_node(node)
        return NodeKind(int(self._kinds[node]))

    def nodes_of_kind(self, kind: NodeKind) -> np.ndarray:
        return self._by_kind[kind]

    @property
    def users(self) -> np.ndarray:
        return self._by_kind[NodeKind.USER]

    @property
    def items(self) -> np.ndarray:
        return self._by_kind[NodeKind.ITEM]

    @property
    def attributes(self) -> np.ndarray:
        return self._by_kind[NodeKind.ATTRIBUTE]

    def degree(self, node: int) -> int:
        self._check_node(node)
        return int(len(self._adj[node]))

    def neighbors(self, node: int, kind: Optional[EdgeKind] = None) -> np.ndarray:
        """Neighbors of ``node`` in ascending id order, optionally edge-kind filtered."""
        self._check_node(node)
        if kind is None:
            return self._adj[node]
        mask = self._adj_kinds[node] == int(kind)
        return self._adj[node][mask]

    # -- item/attribute indices -------------------------------------------

    def item_attributes(self, item: int) -> np.ndarray:
        """P_i: sorted attribute ids of an item."""
        self._check_item(item)
        return self._attr_of_item.get(item, _EMPTY)

    def items_with_attribute(self, attr: int) -> np.ndarray:
        self._check_node(attr)
        if self.kind(attr) != NodeKind.ATTRIBUTE:
            raise SchemaError(f"node {attr} is {self.kind(attr).name}, expected ATTRIBUTE")
        return self._items_of_attr.get(attr, _EMPTY)

    def two_hop_items(self, item: int) -> set[int]:
        """Items reachable via exactly one intermediate attribute, excluding ``item``."""
        self._check_item(item)
        out: set[int] = set()
        for attr in self._attr_of_item.get(item, _EMPTY):
            out.update(self._items_of_attr[int(attr)].tolist())
        out.discard(item)
        return out

    def attribute_neighbors(self, attr: int) -> np.ndarray:
        """Attributes that co-occur with ``attr`` on at least one item (sorted)."""
        self._check_node(attr)
        if self.kind(attr) != NodeKind.ATTRIBUTE:
            raise SchemaError(f"node {attr} is {self.kind(attr).name}, expected ATTRIBUTE")
        return self._attr_cooc.get(attr, _EMPTY)

    # -- internals ---------------------------------------------------------

    def _check_node(self, node: int) -> None:
        if not 0 <= node < len(self._kinds):
            raise NodeNotFoundError(f"unknown node id {node}")

    def _check_item(self, item: int) -> None:
        self._check_node(item)
        if self.kind(item) != NodeKind.ITEM:
            raise SchemaError(f"node {item} is {self.kind(item).name}, expected ITEM")

    def equals(self, other: "HeteroGraph") -> bool:
        """Structural equality of all indices (used by reload determinism checks)."""
        if not np.array_equal(self._kinds, other._kinds):
            return False
        for a, b in zip(self._adj, other._adj):
            if not np.array_equal(a, b):
                return False
        for a, b in zip(self._adj_kinds, other._adj_kinds):
            if not np.array_equal(a, b):
                return False
        if self._attr_of_item.keys() != other._attr_of_item.keys():
            return False
        return all(
            np.array_equal(v, other._attr_of_item[k]) for k, v in self._attr_of_item.items()
        )


_EMPTY = np.empty(0, dtype=np.int64)


def load_graph(
    nodes: Iterable[NodeDescriptor],
    edges: Iterable[EdgeDescriptor],
) -> HeteroGraph:
    """Build a sealed graph from descriptor streams.

    Node ids must be dense ``0..N-1``. Edges referencing undeclared nodes or
    violating kind rules raise :class:`SchemaError`.
    """
    node_list = list(nodes)
    n = len(node_list)
    kinds = np.full(n, -1, dtype=np.int8)
    for desc in node_list:
        if not 0 <= desc.node_id < n:
            raise SchemaError(
                f"node id {desc.node_id} outside dense range 0..{n - 1}"
            )
        if kinds[desc.node_id] != -1:
            raise SchemaError(f"duplicate node id {desc.node_id}")
        kinds[desc.node_id] = int(desc.kind)

    adj_lists: list[list[int]] = [[] for _ in range(n)]
    adj_kind_lists: list[list[int]] = [[] for _ in range(n)]
    attr_sets: dict[int, set[int]] = {}
    item_sets: dict[int, set[int]] = {}

    for edge in edges:
        for endpoint in (edge.head, edge.tail):
            if not 0 <= endpoint < n:
                raise SchemaError(
                    f"edge {edge.head}-[{edge.kind.name}]->{edge.tail} references "
                    f"undeclared node {endpoint}"
                )
        head_kind = NodeKind(int(kinds[edge.head]))
        tail_kind = NodeKind(int(kinds[edge.tail]))
        _check_edge_kinds(edge, head_kind, tail_kind)
        adj_lists[edge.head].append(edge.tail)
        adj_kind_lists[edge.head].append(int(edge.kind))
        adj_lists[edge.tail].append(edge.head)
        adj_kind_lists[edge.tail].append(int(edge.kind))
        if edge.kind == EdgeKind.HAS_ATTRIBUTE:
            item, attr = (
                (edge.head, edge.tail) if head_kind == NodeKind.ITEM else (edge.tail, edge.head)
            )
            attr_sets.setdefault(item, set()).add(attr)
            item_sets.setdefault(attr, set()).add(item)

    adj: list[np.ndarray] = []
    adj_kinds_arr: list[np.ndarray] = []
    for nbrs, eks in zip(adj_lists, adj_kind_lists):
        if nbrs:
            order = np.lexsort((np.asarray(eks), np.asarray(nbrs)))
            adj.append(np.asarray(nbrs, dtype=np.int64)[order])
            adj_kinds_arr.append(np.asarray(eks, dtype=np.int8)[order])
        else:
            adj.append(_EMPTY)
            adj_kinds_arr.append(np.empty(0, dtype=np.int8))

    attr_of_item = {
        item: np.asarray(sorted(attrs), dtype=np.int64) for item, attrs in attr_sets.items()
    }
    items_of_attr = {
        attr: np.asarray(sorted(items), dtype=np.int64) for attr, items in item_sets.items()
    }

    # Attribute co-occurrence projection: attrs sharing >= 1 item are linked.
    cooc_sets: dict[int, set[int]] = {}
    for attrs in attr_of_item.values():
        attr_ids = attrs.tolist()
        for a in attr_ids:
            peers = cooc_sets.setdefault(a, set())
            peers.update(attr_ids)
    attr_cooc = {}
    for a, peers in cooc_sets.items():
        peers.discard(a)
        attr_cooc[a] = np.asarray(sorted(peers), dtype=np.int64)

    return HeteroGraph(kinds, adj, adj_kinds_arr, attr_of_item, items_of_attr, attr_cooc)
