"""Transporter construction and two-pass evidence propagation.

The backward pass walks the transporter from the sink to the root and
computes, for every edge whose endpoints both survive the evidence, a
t-potential (transition probability times the downstream t-emphasis) and an
h-potential (holding density at the observed holding time).  Each vertex
aggregates them into its t-emphasis and h-emphasis.  The forward step turns
these into revised transition probabilities.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from typing import Iterable

import networkx as nx
from pydantic import BaseModel, ConfigDict, Field

from . import distributions
from .errors import (
    ContradictionError,
    IncompleteModelError,
    NonIntrinsicEvidenceError,
    StructuralError,
    ZeroSupportError,
)
from .models import CegGraph, Edge, Evidence
from .staging import minimize as minimize_graph

logger = logging.getLogger(__name__)


class OpCounts(BaseModel):
    t_potentials: int = 0
    h_potentials: int = 0
    t_emphases: int = 0
    h_emphases: int = 0
    revised: int = 0

    @property
    def total(self) -> int:
        return (
            self.t_potentials
            + self.h_potentials
            + self.t_emphases
            + self.h_emphases
            + self.revised
        )

    def summary(self) -> str:
        return (
            f"ops={self.total} ({self.t_potentials}+{self.h_potentials}+"
            f"{self.t_emphases}+{self.h_emphases}+{self.revised})"
        )


class PropagationState(BaseModel):
    """Messages of one propagation run."""

    t_potential: dict[str, float] = Field(default_factory=dict)
    h_potential: dict[str, float] = Field(default_factory=dict)
    t_emphasis: dict[str, float] = Field(default_factory=dict)
    h_emphasis: dict[str, float] = Field(default_factory=dict)
    holding_time: dict[str, float | None] = Field(default_factory=dict)
    accommodated: list[str] = Field(default_factory=list)
    pre_sink: list[str] = Field(default_factory=list)
    ops: OpCounts = Field(default_factory=OpCounts)


class RevisedModel(BaseModel):
    """Transporter with revised transition probabilities."""

    model_config = ConfigDict(frozen=True)

    transporter: CegGraph
    revised_probs: dict[str, float]

    def prob(self, edge_id: str) -> float:
        """Revised probability; zero for edges outside the transporter."""
        return self.revised_probs.get(edge_id, 0.0)

    def graph(self) -> CegGraph:
        """Transporter carrying the revised probabilities, holdings unchanged."""
        return self.transporter.with_probabilities(self.revised_probs)


# --------------------------------------------------------------------------
# transporter


def resolve_edge_ids(graph: CegGraph, ids: Iterable[str]) -> set[str]:
    """Map evidence edge ids onto graph edges.

    Ids that name a graph edge are taken as is; otherwise an id matches
    every unrolled copy ``<id>@<slice>`` of a template edge.
    """
    by_template: dict[str, list[str]] = defaultdict(list)
    for e in graph.edges:
        by_template[e.id.split("@", 1)[0]].append(e.id)
    resolved: set[str] = set()
    unknown = []
    for eid in ids:
        if graph.has_edge(eid):
            resolved.add(eid)
        elif eid in by_template:
            resolved.update(by_template[eid])
        else:
            unknown.append(eid)
    if unknown:
        raise NonIntrinsicEvidenceError(f"evidence names unknown edges {sorted(unknown)}")
    return resolved


def _length_sets(
    graph: CegGraph, edges: list[Edge], order: list[str]
) -> tuple[dict[str, set[int]], dict[str, set[int]]]:
    out: dict[str, list[Edge]] = defaultdict(list)
    for e in edges:
        out[e.source].append(e)
    fwd: dict[str, set[int]] = defaultdict(set)
    fwd[graph.root].add(0)
    for v in order:
        for e in out[v]:
            fwd[e.target] |= {n + 1 for n in fwd[v]}
    bwd: dict[str, set[int]] = defaultdict(set)
    bwd[graph.sink].add(0)
    for v in reversed(order):
        for e in out[v]:
            bwd[v] |= {n + 1 for n in bwd[e.target]}
    return fwd, bwd


def _on_root_sink_path(graph: CegGraph, edges: list[Edge]) -> list[Edge]:
    g = nx.MultiDiGraph()
    g.add_nodes_from(graph.vertices)
    for e in edges:
        g.add_edge(e.source, e.target, key=e.id)
    from_root = nx.descendants(g, graph.root) | {graph.root}
    to_sink = nx.ancestors(g, graph.sink) | {graph.sink}
    return [e for e in edges if e.source in from_root and e.target in to_sink]


def _count_paths(graph: CegGraph, edges: list[Edge], order: list[str]) -> int:
    out: dict[str, list[Edge]] = defaultdict(list)
    for e in edges:
        out[e.source].append(e)
    count: dict[str, int] = defaultdict(int)
    count[graph.sink] = 1
    for v in reversed(order):
        if v != graph.sink:
            count[v] = sum(count[e.target] for e in out[v])
    return count[graph.root]


def build_transporter(
    graph: CegGraph, evidence: Evidence, minimize: bool = False
) -> CegGraph:
    """Delete every vertex and edge that no evidence-consistent path uses.

    Raises:
        StructuralError: if the graph still has cyclic edges.
        NonIntrinsicEvidenceError: if the pruned subgraph admits paths the
            evidence does not.
        ContradictionError: if no root-to-sink path survives.
    """
    if graph.cyclic_edges:
        raise StructuralError("propagation needs an acyclic graph; unroll it first")
    order = graph.topological_order()

    keep = set(e.id for e in graph.edges)
    if evidence.retained_edges is not None:
        keep &= resolve_edge_ids(graph, evidence.retained_edges)
    paths: set[tuple[str, ...]] | None = None
    if evidence.retained_paths is not None:
        valid = {tuple(p) for p in graph.paths()}
        paths = set()
        for p in evidence.retained_paths:
            if tuple(p) not in valid:
                raise NonIntrinsicEvidenceError(
                    f"retained path {list(p)} is not a root-to-sink path"
                )
            paths.add(tuple(p))
        if evidence.length is not None:
            paths = {p for p in paths if len(p) == evidence.length}
        keep &= {eid for p in paths for eid in p}

    edges = [e for e in graph.edges if e.id in keep and e.probability > 0]
    dropped = len(graph.edges) - len(edges)
    if dropped:
        logger.debug(f"Evidence removed {dropped} edges before pruning")
    edges = _on_root_sink_path(graph, edges)

    if evidence.length is not None and edges:
        d = evidence.length
        fwd, bwd = _length_sets(graph, edges, order)
        edges = [
            e
            for e in edges
            if any((d - 1 - i) in bwd[e.target] for i in fwd[e.source])
        ]
        fwd, bwd = _length_sets(graph, edges, order)
        if edges and bwd[graph.root] != {d}:
            raise NonIntrinsicEvidenceError(
                f"paths of lengths {sorted(bwd[graph.root])} survive the "
                f"evidence but {d} transition times were given"
            )

    if not edges:
        raise ContradictionError("evidence retains no root-to-sink path")

    if paths is not None and _count_paths(graph, edges, order) != len(paths):
        raise NonIntrinsicEvidenceError(
            f"retained edges induce {_count_paths(graph, edges, order)} paths "
            f"but the evidence lists {len(paths)}"
        )

    vertices = {graph.root, graph.sink} | {e.source for e in edges} | {
        e.target for e in edges
    }
    transporter = graph.restrict(vertices, [e.id for e in edges])
    logger.info(
        f"Transporter: {len(transporter.positions)} positions, "
        f"{len(transporter.edges)} edges (from {len(graph.edges)})"
    )
    if minimize:
        transporter = minimize_graph(transporter)
    return transporter


# --------------------------------------------------------------------------
# propagation


def vertex_depths(transporter: CegGraph) -> dict[str, int]:
    """Depth of every transporter vertex; raises if a vertex has several."""
    order = transporter.topological_order()
    fwd, _ = _length_sets(transporter, list(transporter.edges), order)
    depths = {}
    for v in order:
        if len(fwd[v]) > 1:
            raise NonIntrinsicEvidenceError(
                f"{v} is reached after {sorted(fwd[v])} transitions; "
                "transition times cannot be assigned to it"
            )
        depths[v] = next(iter(fwd[v]))
    return depths


def _holding_times(
    transporter: CegGraph, evidence: Evidence
) -> dict[str, float | None]:
    holds = evidence.holding_times()
    if holds is None:
        return {v: None for v in transporter.positions}
    depths = vertex_depths(transporter)
    return {
        v: holds[depths[v]] if depths[v] < len(holds) else None
        for v in transporter.positions
    }


def _h_potential(graph: CegGraph, edge: Edge, t_w: float | None) -> float:
    if t_w is None or not graph.is_timed(edge.source):
        return 1.0
    if edge.holding is None:
        raise IncompleteModelError(
            f"edge {edge.id} leaves timed position {edge.source} "
            "but has no holding-time spec"
        )
    return distributions.density(edge.holding, t_w)


def propagate(
    graph: CegGraph,
    transporter: CegGraph,
    evidence: Evidence,
    previous: PropagationState | None = None,
) -> tuple[PropagationState, RevisedModel]:
    """Run the backward pass then the forward revision step.

    Vertices accommodated in ``previous`` whose surviving out-edges are
    unchanged keep their messages and are not counted again.

    Raises:
        ZeroSupportError: if a transporter vertex has zero h-emphasis.
    """
    in_transporter = set(transporter.vertices)
    kept_edges = {e.id for e in transporter.edges}
    state = PropagationState(holding_time=_holding_times(transporter, evidence))
    ops = state.ops

    reusable: set[str] = set()
    if previous is not None:
        live = {eid for eid, tau in previous.t_potential.items() if tau > 0}
        for v in previous.accommodated:
            if v not in in_transporter or v == transporter.sink:
                continue
            before = {e.id for e in graph.out_edges(v) if e.id in live}
            if before == {e.id for e in transporter.out_edges(v)}:
                reusable.add(v)

    for v in reversed(transporter.topological_order()):
        if v == transporter.sink:
            state.t_emphasis[v] = 1.0
            state.h_emphasis[v] = 1.0
            ops.t_emphases += 1
            ops.h_emphases += 1
            state.accommodated.append(v)
            continue
        # Kept edges come from the transporter (targets may be merged);
        # pruned graph edges into the transporter carry zero potentials.
        kept = {e.id: e for e in transporter.out_edges(v)}
        out = [
            kept.get(e.id, e)
            for e in graph.out_edges(v)
            if e.id in kept or e.target in in_transporter
        ]
        if v in reusable:
            for e in out:
                state.t_potential[e.id] = previous.t_potential.get(e.id, 0.0)
                state.h_potential[e.id] = previous.h_potential.get(e.id, 0.0)
            state.t_emphasis[v] = previous.t_emphasis[v]
            state.h_emphasis[v] = previous.h_emphasis[v]
            state.accommodated.append(v)
            continue

        t_w = state.holding_time.get(v)
        phi = phi_t = 0.0
        for e in out:
            if e.id in kept_edges:
                tau = e.probability * state.t_emphasis[e.target]
                tau_t = _h_potential(graph, e, t_w)
            else:
                tau = tau_t = 0.0
            state.t_potential[e.id] = tau
            state.h_potential[e.id] = tau_t
            ops.t_potentials += 1
            ops.h_potentials += 1
            phi += tau
            phi_t += tau * tau_t
        state.t_emphasis[v] = phi
        state.h_emphasis[v] = phi_t
        ops.t_emphases += 1
        ops.h_emphases += 1
        state.accommodated.append(v)
        logger.debug(f"{v}: t-emphasis={phi:.6g} h-emphasis={phi_t:.6g} (t={t_w})")
        if phi_t <= 0.0:
            raise ZeroSupportError(
                f"evidence has zero probability density at {v} "
                f"(holding time {t_w})"
            )

    state.pre_sink = sorted({e.source for e in transporter.in_edges(transporter.sink)})

    revised: dict[str, float] = {}
    for e in transporter.edges:
        revised[e.id] = (
            state.t_potential[e.id]
            * state.h_potential[e.id]
            / state.h_emphasis[e.source]
        )
        ops.revised += 1

    logger.info(f"Propagation finished: {ops.summary()}")
    return state, RevisedModel(transporter=transporter, revised_probs=revised)


def path_posteriors(revised: RevisedModel) -> dict[tuple[str, ...], float]:
    """Probability of each transporter path as a product of revised probabilities."""
    result = {}
    for path in revised.transporter.paths():
        p = 1.0
        for eid in path:
            p *= revised.prob(eid)
        result[path] = p
    return result


def arrival_time_path_posterior(
    graph: CegGraph,
    evidence: Evidence,
    dt: float = 0.01,
    tmax: float = 200.0,
) -> dict[tuple[str, ...], float]:
    """Posterior over the routes from the root to ``w`` given arrival at ``t*``.

    Non-temporal evidence is propagated first; each route is then weighted
    by its revised probability and the density of its summed holding times.
    """
    query = evidence.arrival_query
    if query is None:
        raise ValueError("evidence carries no arrival query")
    plain = evidence.without_times().model_copy(update={"arrival_query": None})
    transporter = build_transporter(graph, plain)
    if query.vertex not in transporter.vertices:
        raise ContradictionError(
            f"{query.vertex} is not reachable under the non-temporal evidence"
        )
    _, revised = propagate(graph, transporter, plain)

    weights: dict[tuple[str, ...], float] = {}
    for route in transporter.paths(end=query.vertex):
        p = 1.0
        specs = []
        for eid in route:
            edge = transporter.edge(eid)
            p *= revised.prob(eid)
            if transporter.is_timed(edge.source):
                if edge.holding is None:
                    raise IncompleteModelError(f"edge {eid} has no holding-time spec")
                specs.append(edge.holding)
        if specs:
            weights[route] = p * distributions.sum_density(specs, query.t_star, dt, tmax)
        else:
            weights[route] = p if query.t_star == 0 else 0.0

    total = sum(weights.values())
    if total <= 0.0:
        raise ZeroSupportError(
            f"no route to {query.vertex} has positive density at t*={query.t_star}"
        )
    return {route: w / total for route, w in weights.items()}
