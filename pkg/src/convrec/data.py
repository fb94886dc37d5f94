"""Dataset ingestion, splitting, pairwise-set construction, synthetic data.

File formats (UTF-8, newline-terminated, ``#`` comment lines ignored):

* interactions: ``user_id<TAB>item_id`` per line
* triplets:     ``head_id<TAB>relation_label<TAB>tail_id`` per line
* id map:       ``external_id<TAB>internal_int<TAB>kind`` per line

External string ids are remapped to dense integers at load, ordered
users < items < attributes < entities and sorted within each kind, so a
given pair of files always produces the same graph.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

from .graph import EdgeDescriptor, EdgeKind, HeteroGraph, NodeDescriptor, NodeKind, load_graph

HAS_ATTRIBUTE_RELATION = "has_attribute"

_KIND_NAMES = {k.name.lower(): k for k in NodeKind}


class IngestError(Exception):
    """Malformed dataset file or unresolvable id reference."""


@dataclass(frozen=True)
class InteractionRecord:
    user: int
    item: int


@dataclass(frozen=True)
class ItemTriple:
    """(u, i+, i-) pairwise training row for the item BPR loss."""

    user: int
    pos_item: int
    neg_item: int


@dataclass(frozen=True)
class AttrTriple:
    """(u, p+, p-) pairwise training row for the attribute BPR loss.

    ``src_item`` is the positive item the pair was derived from; scoring
    contexts during offline training condition on its remaining attributes.
    """

    user: int
    pos_attr: int
    neg_attr: int
    src_item: int


@dataclass
class DatasetSplit:
    train: list[InteractionRecord]
    valid: list[InteractionRecord]
    test: list[InteractionRecord]

    def all_records(self) -> list[InteractionRecord]:
        return self.train + self.valid + self.test


@dataclass
class LoadedDataset:
    records: list[InteractionRecord]
    nodes: list[NodeDescriptor]
    edges: list[EdgeDescriptor]
    id_map: dict[str, int]
    kinds: dict[str, NodeKind]
    warnings: list[str] = field(default_factory=list)

    def build_graph(self) -> HeteroGraph:
        return load_graph(self.nodes, self.edges)


def _read_rows(path: Path, n_fields: int) -> Iterable[tuple[int, list[str]]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != n_fields:
                raise IngestError(
                    f"{path}:{lineno}: expected {n_fields} tab-separated fields, "
                    f"got {len(fields)}"
                )
            yield lineno, fields


def load_dataset(
    interactions_path: str | Path,
    triplets_path: str | Path,
    id_map: Optional[dict[str, int]] = None,
    id_map_kinds: Optional[dict[str, NodeKind]] = None,
) -> LoadedDataset:
    """Parse interaction and triplet files into records plus graph descriptors.

    When ``id_map`` is supplied every external id must already be mapped;
    unknown references raise :class:`IngestError`. Duplicate interactions are
    dropped with a warning.
    """
    interactions_path = Path(interactions_path)
    triplets_path = Path(triplets_path)

    raw_interactions: list[tuple[str, str]] = []
    users: set[str] = set()
    items: set[str] = set()
    for _, (u, i) in _read_rows(interactions_path, 2):
        raw_interactions.append((u, i))
        users.add(u)
        items.add(i)

    raw_triplets: list[tuple[str, str, str]] = []
    attrs: set[str] = set()
    entities: set[str] = set()
    for lineno, (head, rel, tail) in _read_rows(triplets_path, 3):
        raw_triplets.append((head, rel, tail))
        if rel == HAS_ATTRIBUTE_RELATION:
            if head not in items:
                raise IngestError(
                    f"{triplets_path}:{lineno}: {HAS_ATTRIBUTE_RELATION} head {head!r} "
                    "is not an item from the interactions file"
                )
            attrs.add(tail)
        else:
            for endpoint in (head, tail):
                if endpoint not in users and endpoint not in items:
                    entities.add(endpoint)
    entities -= attrs

    kinds: dict[str, NodeKind] = {}
    for ext in users:
        kinds[ext] = NodeKind.USER
    for ext in items:
        kinds[ext] = NodeKind.ITEM
    for ext in attrs:
        kinds[ext] = NodeKind.ATTRIBUTE
    for ext in entities:
        kinds[ext] = NodeKind.ENTITY

    if id_map is None:
        id_map = {}
        next_id = 0
        for kind in (NodeKind.USER, NodeKind.ITEM, NodeKind.ATTRIBUTE, NodeKind.ENTITY):
            for ext in sorted(e for e, k in kinds.items() if k == kind):
                id_map[ext] = next_id
                next_id += 1
    else:
        missing = [e for e in kinds if e not in id_map]
        if missing:
            raise IngestError(
                f"{len(missing)} external ids missing from the supplied id map "
                f"(first: {sorted(missing)[:3]})"
            )
        if id_map_kinds:
            for ext, kind in id_map_kinds.items():
                if ext in kinds and kinds[ext] != kind:
                    raise IngestError(
                        f"external id {ext!r} is {kinds[ext].name} in the data but "
                        f"{kind.name} in the id map"
                    )

    nodes = [
        NodeDescriptor(node_id, kinds[ext])
        for ext, node_id in sorted(id_map.items(), key=lambda kv: kv[1])
        if ext in kinds
    ]

    warnings: list[str] = []
    seen: set[tuple[int, int]] = set()
    records: list[InteractionRecord] = []
    edges: list[EdgeDescriptor] = []
    for u_ext, i_ext in raw_interactions:
        u, i = id_map[u_ext], id_map[i_ext]
        if (u, i) in seen:
            warnings.append(f"duplicate interaction {u_ext}\t{i_ext} dropped")
            continue
        seen.add((u, i))
        records.append(InteractionRecord(u, i))
        edges.append(EdgeDescriptor(u, EdgeKind.INTERACT, i))

    seen_triplets: set[tuple[int, str, int]] = set()
    for head_ext, rel, tail_ext in raw_triplets:
        head, tail = id_map[head_ext], id_map[tail_ext]
        if (head, rel, tail) in seen_triplets:
            warnings.append(f"duplicate triplet {head_ext}\t{rel}\t{tail_ext} dropped")
            continue
        seen_triplets.add((head, rel, tail))
        if rel == HAS_ATTRIBUTE_RELATION:
            edges.append(EdgeDescriptor(head, EdgeKind.HAS_ATTRIBUTE, tail))
        else:
            edges.append(EdgeDescriptor(head, EdgeKind.EXTERNAL, tail, label=rel))

    return LoadedDataset(records, nodes, edges, id_map, kinds, warnings)


def write_id_map(path: str | Path, id_map: dict[str, int], kinds: dict[str, NodeKind]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ext, node_id in sorted(id_map.items(), key=lambda kv: kv[1]):
            fh.write(f"{ext}\t{node_id}\t{kinds[ext].name.lower()}\n")


def read_id_map(path: str | Path) -> tuple[dict[str, int], dict[str, NodeKind]]:
    id_map: dict[str, int] = {}
    kinds: dict[str, NodeKind] = {}
    for lineno, (ext, node_id, kind_name) in _read_rows(Path(path), 3):
        if kind_name not in _KIND_NAMES:
            raise IngestError(f"{path}:{lineno}: unknown node kind {kind_name!r}")
        id_map[ext] = int(node_id)
        kinds[ext] = _KIND_NAMES[kind_name]
    return id_map, kinds


def split_dataset(records: Sequence[InteractionRecord], seed: int) -> DatasetSplit:
    """Per-user stratified 7:1:2 split; users with < 3 records go wholly to train."""
    by_user: dict[int, list[InteractionRecord]] = {}
    for rec in records:
        by_user.setdefault(rec.user, []).append(rec)

    rng = np.random.default_rng(seed)
    train: list[InteractionRecord] = []
    valid: list[InteractionRecord] = []
    test: list[InteractionRecord] = []
    for user in sorted(by_user):
        rows = by_user[user]
        order = rng.permutation(len(rows))
        rows = [rows[j] for j in order]
        n = len(rows)
        if n < 3:
            train.extend(rows)
            continue
        n_train, n_valid, n_test = _largest_remainder(n, (0.7, 0.1, 0.2))
        train.extend(rows[:n_train])
        valid.extend(rows[n_train : n_train + n_valid])
        test.extend(rows[n_train + n_valid :])
    return DatasetSplit(train, valid, test)


def _largest_remainder(n: int, ratios: tuple[float, ...]) -> tuple[int, ...]:
    exact = [n * r for r in ratios]
    counts = [math.floor(x) for x in exact]
    shortfall = n - sum(counts)
    remainders = sorted(
        range(len(ratios)), key=lambda j: (exact[j] - counts[j], ratios[j]), reverse=True
    )
    for j in remainders[:shortfall]:
        counts[j] += 1
    return tuple(counts)


def user_positive_items(records: Sequence[InteractionRecord]) -> dict[int, set[int]]:
    """I+(u) membership map over a record list."""
    out: dict[int, set[int]] = {}
    for rec in records:
        out.setdefault(rec.user, set()).add(rec.item)
    return out


def build_pairwise_sets(
    records: Sequence[InteractionRecord],
    graph: HeteroGraph,
    neg_per_pos: int,
    seed: int,
    positive_map: Optional[dict[int, set[int]]] = None,
) -> tuple[list[ItemTriple], list[AttrTriple]]:
    """Pair every positive interaction with uniform negatives.

    ``positive_map`` defaults to the positives within ``records``; pass a
    wider map to also exclude e.g. train positives when pairing validation
    rows. Users whose positives cover the whole item set are skipped.
    One attribute pair is derived per item triple: p+ from the positive
    item's attributes, p- from the negative item's attributes outside the
    user's known positive-attribute set.
    """
    if neg_per_pos < 1:
        raise ValueError("neg_per_pos must be >= 1")
    rng = np.random.default_rng(seed)
    items = graph.items
    pos_map = positive_map if positive_map is not None else user_positive_items(records)

    pos_attrs: dict[int, set[int]] = {}
    for user, positives in pos_map.items():
        acc: set[int] = set()
        for item in positives:
            acc.update(graph.item_attributes(item).tolist())
        pos_attrs[user] = acc

    item_triples: list[ItemTriple] = []
    attr_triples: list[AttrTriple] = []
    for rec in records:
        user_pos = pos_map.get(rec.user, set())
        candidates = items[~np.isin(items, list(user_pos))]
        if len(candidates) == 0:
            logger.warning("user %d has no negative candidates, skipping", rec.user)
            continue
        negs = rng.choice(candidates, size=neg_per_pos, replace=len(candidates) < neg_per_pos)
        for neg in negs:
            neg = int(neg)
            item_triples.append(ItemTriple(rec.user, rec.item, neg))
            p_pos_pool = graph.item_attributes(rec.item)
            p_neg_pool = [
                int(a)
                for a in graph.item_attributes(neg)
                if int(a) not in pos_attrs.get(rec.user, set())
            ]
            if len(p_pos_pool) and p_neg_pool:
                p_pos = int(rng.choice(p_pos_pool))
                p_neg = int(rng.choice(np.asarray(p_neg_pool)))
                attr_triples.append(AttrTriple(rec.user, p_pos, p_neg, rec.item))
    return item_triples, attr_triples


@dataclass
class SyntheticSpec:
    n_users: int
    n_items: int
    n_attrs: int
    attrs_per_item: int
    interactions_per_user: int
    seed: int
    preferred_attrs_per_user: int = 6


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> tuple[Path, Path]:
    """Write a seeded synthetic dataset with latent user/attribute structure.

    Attribute popularity is skewed (few broadly shared attributes, many
    niche ones); each user prefers a small attribute core and interacts
    with items overlapping it, so preference signal is learnable but
    popular attributes filter weakly.
    """
    for name in ("n_users", "n_items", "n_attrs", "attrs_per_item", "interactions_per_user"):
        if getattr(spec, name) < 1:
            raise ValueError(f"{name} must be >= 1")
    if spec.attrs_per_item > spec.n_attrs:
        raise ValueError("attrs_per_item cannot exceed n_attrs")

    rng = np.random.default_rng(spec.seed)
    width = {
        "u": len(str(spec.n_users - 1)),
        "i": len(str(spec.n_items - 1)),
        "a": len(str(spec.n_attrs - 1)),
    }

    def uid(j: int) -> str:
        return f"u{j:0{width['u']}d}"

    def iid(j: int) -> str:
        return f"i{j:0{width['i']}d}"

    def aid(j: int) -> str:
        return f"a{j:0{width['a']}d}"

    # Zipf-ish attribute popularity.
    popularity = 1.0 / np.arange(1, spec.n_attrs + 1)
    popularity /= popularity.sum()

    item_attrs = np.zeros((spec.n_items, spec.attrs_per_item), dtype=np.int64)
    for j in range(spec.n_items):
        item_attrs[j] = rng.choice(
            spec.n_attrs, size=spec.attrs_per_item, replace=False, p=popularity
        )

    attr_onehot = np.zeros((spec.n_items, spec.n_attrs))
    for j in range(spec.n_items):
        attr_onehot[j, item_attrs[j]] = 1.0

    n_core = min(spec.preferred_attrs_per_user, spec.n_attrs)
    interactions: list[tuple[str, str]] = []
    for u in range(spec.n_users):
        core = rng.choice(spec.n_attrs, size=n_core, replace=False, p=popularity)
        affinity = np.full(spec.n_attrs, 0.1)
        affinity[core] = 1.0
        overlap = attr_onehot @ affinity
        probs = np.exp(2.0 * overlap)
        probs /= probs.sum()
        k = min(spec.interactions_per_user, spec.n_items)
        chosen = rng.choice(spec.n_items, size=k, replace=False, p=probs)
        for item in sorted(int(c) for c in chosen):
            interactions.append((uid(u), iid(item)))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    interactions_path = out_dir / "interactions.tsv"
    triplets_path = out_dir / "triplets.tsv"
    header = (
        f"# synthetic dataset: users={spec.n_users} items={spec.n_items} "
        f"attrs={spec.n_attrs} attrs_per_item={spec.attrs_per_item} "
        f"interactions_per_user={spec.interactions_per_user} seed={spec.seed}\n"
    )
    with open(interactions_path, "w", encoding="utf-8") as fh:
        fh.write(header)
        for u_ext, i_ext in interactions:
            fh.write(f"{u_ext}\t{i_ext}\n")
    with open(triplets_path, "w", encoding="utf-8") as fh:
        fh.write(header)
        for j in range(spec.n_items):
            for attr in sorted(item_attrs[j].tolist()):
                fh.write(f"{iid(j)}\t{HAS_ATTRIBUTE_RELATION}\t{aid(attr)}\n")
    return interactions_path, triplets_path
