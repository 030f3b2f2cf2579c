"""Position partitions of hued trees, CEG compilation and minimisation.

Subtree isomorphism is decided bottom-up with canonical signatures in the
AHU style: every vertex is assigned the interned id of a tuple made of its
colour and the sorted multiset of its edge descriptors, each descriptor
pointing at the child's interned id.  Equal ids mean isomorphic rooted
subtrees, so one pass over the vertices (leaves first) is enough.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from typing import Hashable, Mapping

from pydantic import BaseModel, ConfigDict, Field

from .models import SINK, CegGraph, Edge, EventTree, StagePartition

logger = logging.getLogger(__name__)

LEAF = "leaf"


class PositionPartition(BaseModel):
    """Position id -> situations whose rooted subtrees are isomorphic."""

    model_config = ConfigDict(frozen=True)

    blocks: dict[str, tuple[str, ...]] = Field(default_factory=dict)

    def position_of(self) -> dict[str, str]:
        return {v: pid for pid, members in self.blocks.items() for v in members}

    def is_discrete(self) -> bool:
        return all(len(m) == 1 for m in self.blocks.values())


class _Interner:
    """Maps signature tuples to small integer ids."""

    def __init__(self) -> None:
        self._ids: dict[Hashable, int] = {}

    def __call__(self, signature: Hashable) -> int:
        return self._ids.setdefault(signature, len(self._ids))


def _edge_colour(edge: Edge, clusters: Mapping[str, str]) -> str:
    cid = clusters.get(edge.id, edge.cluster_id)
    if cid is not None:
        return f"cluster:{cid}"
    return edge.holding.key() if edge.holding else "untimed"


def _edge_descriptor(edge: Edge, colour: str, child: Hashable) -> tuple:
    return (edge.label, f"{edge.probability:.12f}", colour, child)


def compute_positions(
    tree: EventTree,
    stages: StagePartition,
    clusters: Mapping[str, str] | None = None,
) -> PositionPartition:
    """Group situations whose subtrees match in structure and colouring.

    Args:
        tree: A valid, finite hued event tree.
        stages: Stage colouring; unstaged situations are their own colour.
        clusters: Optional edge id -> cluster id overrides; edges fall back
            to their own ``cluster_id`` and then to their holding spec.
    """
    clusters = clusters or {}
    stage_of = stages.stage_of()
    intern = _Interner()
    order = tree.bfs_order()

    sig: dict[str, int] = {}
    for v in reversed(order):
        edges = tree.out_edges(v)
        if not edges:
            sig[v] = intern(LEAF)
            continue
        descriptors = sorted(
            _edge_descriptor(e, _edge_colour(e, clusters), sig[e.target])
            for e in edges
        )
        colour = stage_of.get(v, f"#{v}")
        sig[v] = intern((colour, tree.is_timed(v), tuple(descriptors)))

    blocks: dict[int, list[str]] = defaultdict(list)
    for v in order:
        if tree.out_edges(v):
            blocks[sig[v]].append(v)

    # w0, w1, ... in order of first appearance.
    partition = {f"w{i}": tuple(members) for i, members in enumerate(blocks.values())}
    logger.info(
        f"Computed {len(partition)} positions from {len(tree.situations)} situations"
    )
    return PositionPartition(blocks=partition)


def compile_ceg(
    tree: EventTree,
    positions: PositionPartition,
    stages: StagePartition | None = None,
) -> CegGraph:
    """Coalesce each position into one vertex and all leaves into the sink."""
    position_of = positions.position_of()
    stage_of = stages.stage_of() if stages else {}

    edges: list[Edge] = []
    for pid, members in positions.blocks.items():
        representative = members[0]
        for e in tree.out_edges(representative):
            target = position_of.get(e.target, SINK)
            edges.append(
                e.model_copy(
                    update={"id": f"{pid}.{e.label}", "source": pid, "target": target}
                )
            )

    # Keep stage colours only where a stage spans several positions.
    by_stage: dict[str, list[str]] = defaultdict(list)
    for pid, members in positions.blocks.items():
        sid = stage_of.get(members[0])
        if sid is not None:
            by_stage[sid].append(pid)
    retained = {
        pid: sid for sid, pids in by_stage.items() if len(pids) > 1 for pid in pids
    }

    graph = CegGraph(
        root=position_of[tree.root],
        positions=tuple(positions.blocks),
        edges=tuple(edges),
        untimed=frozenset(
            pid for pid, m in positions.blocks.items() if not tree.is_timed(m[0])
        ),
        stage_of=retained,
        members=dict(positions.blocks),
    )
    logger.info(
        f"Compiled CEG: {len(graph.positions)} positions + sink, "
        f"{len(graph.edges)} edges"
    )
    return graph


def _graph_signatures(graph: CegGraph) -> dict[str, int]:
    intern = _Interner()
    cyclic = set(graph.cyclic_edges)
    sig: dict[str, int] = {graph.sink: intern(LEAF)}
    for v in reversed(graph.topological_order()):
        if v == graph.sink:
            continue
        descriptors = []
        for e in graph.out_edges(v):
            # Cyclic targets are slice roots; compare them by identity.
            child = ("cyclic", e.target) if e.id in cyclic else sig[e.target]
            descriptors.append(_edge_descriptor(e, _edge_colour(e, {}), child))
        sig[v] = intern((graph.is_timed(v), tuple(sorted(descriptors))))
    return sig


def minimize(graph: CegGraph) -> CegGraph:
    """Merge vertices whose rooted subgraphs are isomorphic.

    Stage colours are ignored here since pruning may leave a stage with a
    single surviving member.  The path count and every path probability are
    unchanged; a graph that is already minimal is returned as is.
    """
    sig = _graph_signatures(graph)
    representative: dict[int, str] = {}
    rename: dict[str, str] = {}
    for v in graph.topological_order():
        rename[v] = representative.setdefault(sig[v], v)

    merged = {v for v, r in rename.items() if v != r}
    if not merged:
        return graph

    members: dict[str, tuple[str, ...]] = defaultdict(tuple)
    for v in graph.positions:
        members[rename[v]] += graph.members.get(v, (v,))

    edges = tuple(
        e.model_copy(update={"target": rename.get(e.target, e.target)})
        for e in graph.edges
        if e.source not in merged
    )
    logger.info(f"Minimised graph: merged {sorted(merged)}")
    return graph.restrict(
        [v for v in graph.vertices if v not in merged], [e.id for e in edges]
    ).model_copy(update={"edges": edges, "members": dict(members)}).rebuilt()
