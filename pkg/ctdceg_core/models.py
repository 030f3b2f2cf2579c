"""Data models for hued event trees, compiled CEG graphs and evidence."""

from __future__ import annotations

from collections import defaultdict, deque
from decimal import Decimal, InvalidOperation
from enum import Enum
from typing import Any, Iterable, Iterator

import networkx as nx
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PrivateAttr,
    field_validator,
    model_validator,
)

SINK = "w_inf"


class HoldingFamily(str, Enum):
    """Supported holding-time distribution families."""

    EXPONENTIAL = "exponential"
    NORMAL = "normal"
    WEIBULL = "weibull"
    EMPIRICAL_GRID = "empirical-grid"


# First entry of each tuple is the default convention.
CONVENTIONS: dict[HoldingFamily, tuple[str, ...]] = {
    HoldingFamily.EXPONENTIAL: ("rate", "mean"),
    HoldingFamily.NORMAL: ("mean_sd", "mean_sd_truncated"),
    HoldingFamily.WEIBULL: ("shape_scale", "scale_shape"),
    HoldingFamily.EMPIRICAL_GRID: ("knots",),
}


class HoldingTimeSpec(BaseModel):
    """Holding-time distribution attached to an edge."""

    model_config = ConfigDict(frozen=True)

    family: HoldingFamily = Field(..., description="Distribution family")
    params: tuple[float, ...] = Field(..., description="Family parameters")
    convention: str = Field(
        default="", description="Parameterization tag, e.g. rate or mean"
    )

    @field_validator("family", mode="before")
    @classmethod
    def known_family(cls, v: Any) -> Any:
        """Reject families outside the closed set with the family named."""
        values = {f.value for f in HoldingFamily}
        if isinstance(v, HoldingFamily) or v in values:
            return v
        raise ValueError(
            f"unsupported distribution family '{v}' "
            f"(expected one of: {', '.join(sorted(values))})"
        )

    @model_validator(mode="before")
    @classmethod
    def default_convention(cls, data: Any) -> Any:
        if isinstance(data, dict) and not data.get("convention"):
            family = data.get("family")
            family = getattr(family, "value", family)
            for f, conventions in CONVENTIONS.items():
                if f.value == family:
                    data = {**data, "convention": conventions[0]}
        return data

    @model_validator(mode="after")
    def check_params(self) -> "HoldingTimeSpec":
        allowed = CONVENTIONS[self.family]
        if self.convention not in allowed:
            raise ValueError(
                f"convention '{self.convention}' not valid for {self.family.value}"
            )

        p = self.params
        if self.family is HoldingFamily.EMPIRICAL_GRID:
            if len(p) < 4 or len(p) % 2:
                raise ValueError("empirical-grid needs knot pairs t0,f0,t1,f1,...")
            ts, fs = p[0::2], p[1::2]
            if ts[0] < 0 or any(b <= a for a, b in zip(ts, ts[1:])):
                raise ValueError("empirical-grid knot times must increase from >= 0")
            if any(f < 0 for f in fs):
                raise ValueError("empirical-grid densities must be nonnegative")
            area = sum(
                0.5 * (fs[i] + fs[i + 1]) * (ts[i + 1] - ts[i])
                for i in range(len(ts) - 1)
            )
            if abs(area - 1.0) > 1e-6:
                raise ValueError(f"empirical-grid integrates to {area:.8f}, not 1")
            return self

        expected = 1 if self.family is HoldingFamily.EXPONENTIAL else 2
        if len(p) != expected:
            raise ValueError(
                f"{self.family.value} takes {expected} parameter(s), got {len(p)}"
            )
        if self.family is HoldingFamily.NORMAL:
            if p[1] <= 0:
                raise ValueError("normal standard deviation must be positive")
        elif any(x <= 0 for x in p):
            raise ValueError(f"{self.family.value} parameters must be positive")
        return self

    @property
    def parameterization_tag(self) -> str:
        return self.convention

    def key(self) -> str:
        """Stable textual identity used in signatures and cluster checks."""
        return f"{self.family.value}:{self.convention}:" + ",".join(
            repr(float(x)) for x in self.params
        )


def _decimal(value: Any) -> str:
    if isinstance(value, float):
        value = repr(value)
    try:
        d = Decimal(str(value).strip())
    except InvalidOperation:
        raise ValueError(f"probability '{value}' is not a decimal number")
    if not d.is_finite() or d < 0 or d > 1:
        raise ValueError(f"probability {value} outside [0, 1]")
    return str(value).strip()


class Edge(BaseModel):
    """Directed edge with transition probability and holding-time spec."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    id: str = Field(default="", description="Edge identifier")
    source: str = Field(..., alias="from")
    target: str = Field(..., alias="to")
    label: str = Field(..., description="Edge label")
    prob: str = Field(..., description="Transition probability, decimal string")
    holding: HoldingTimeSpec | None = Field(default=None)
    cluster_id: str | None = Field(default=None, description="Cluster colour")

    @field_validator("prob", mode="before")
    @classmethod
    def as_decimal_string(cls, v: Any) -> str:
        return _decimal(v)

    @model_validator(mode="before")
    @classmethod
    def default_id(cls, data: Any) -> Any:
        if isinstance(data, dict) and not data.get("id"):
            source = data.get("from", data.get("source"))
            data = {**data, "id": f"{source}.{data.get('label')}"}
        return data

    @property
    def probability(self) -> float:
        return float(self.prob)

    @property
    def decimal(self) -> Decimal:
        return Decimal(self.prob)


class StagePartition(BaseModel):
    """Stage colouring: stage id -> situations sharing a distribution."""

    model_config = ConfigDict(frozen=True)

    blocks: dict[str, tuple[str, ...]] = Field(default_factory=dict)

    def stage_of(self) -> dict[str, str]:
        return {v: sid for sid, members in self.blocks.items() for v in members}


class _Graph(BaseModel):
    """Adjacency caches shared by trees and CEGs."""

    model_config = ConfigDict(frozen=True)

    _out: dict[str, list[Edge]] = PrivateAttr(default_factory=dict)
    _in: dict[str, list[Edge]] = PrivateAttr(default_factory=dict)
    _by_id: dict[str, Edge] = PrivateAttr(default_factory=dict)

    def model_post_init(self, __context: Any) -> None:
        out: dict[str, list[Edge]] = defaultdict(list)
        inc: dict[str, list[Edge]] = defaultdict(list)
        for e in self.edges:
            out[e.source].append(e)
            inc[e.target].append(e)
        self._out = dict(out)
        self._in = dict(inc)
        self._by_id = {e.id: e for e in self.edges}

    def out_edges(self, vertex: str) -> list[Edge]:
        return self._out.get(vertex, [])

    def in_edges(self, vertex: str) -> list[Edge]:
        return self._in.get(vertex, [])

    def edge(self, edge_id: str) -> Edge:
        return self._by_id[edge_id]

    def has_edge(self, edge_id: str) -> bool:
        return edge_id in self._by_id

    def is_timed(self, vertex: str) -> bool:
        return vertex not in self.untimed


class EventTree(_Graph):
    """Hued event tree: situations, leaves and coloured edges."""

    root: str
    vertices: tuple[str, ...]
    edges: tuple[Edge, ...]
    untimed: frozenset[str] = frozenset()

    @property
    def situations(self) -> list[str]:
        return [v for v in self.vertices if self.out_edges(v)]

    @property
    def leaves(self) -> list[str]:
        return [v for v in self.vertices if not self.out_edges(v)]

    def parent(self, vertex: str) -> str | None:
        inc = self.in_edges(vertex)
        return inc[0].source if inc else None

    def bfs_order(self) -> list[str]:
        order, queue = [], deque([self.root])
        while queue:
            v = queue.popleft()
            order.append(v)
            queue.extend(e.target for e in self.out_edges(v))
        return order


class CegGraph(_Graph):
    """Compiled CT-(D)CEG: positions, single sink and parameterised edges."""

    root: str
    sink: str = SINK
    positions: tuple[str, ...]
    edges: tuple[Edge, ...]
    cyclic_edges: tuple[str, ...] = ()
    slice_of: dict[str, int] = Field(default_factory=dict)
    untimed: frozenset[str] = frozenset()
    stage_of: dict[str, str] = Field(default_factory=dict)
    members: dict[str, tuple[str, ...]] = Field(default_factory=dict)

    @property
    def vertices(self) -> list[str]:
        return [*self.positions, self.sink]

    def acyclic_edges(self) -> list[Edge]:
        cyclic = set(self.cyclic_edges)
        return [e for e in self.edges if e.id not in cyclic]

    def to_networkx(self, include_cyclic: bool = False) -> nx.MultiDiGraph:
        g = nx.MultiDiGraph()
        g.add_nodes_from(self.vertices)
        edges = self.edges if include_cyclic else self.acyclic_edges()
        for e in edges:
            g.add_edge(e.source, e.target, key=e.id)
        return g

    def topological_order(self) -> list[str]:
        """Vertices root-first; raises StructuralError on a cycle."""
        from .errors import StructuralError

        g = self.to_networkx()
        try:
            return list(nx.topological_sort(g))
        except nx.NetworkXUnfeasible:
            raise StructuralError("graph has a directed cycle outside cyclic_edges")

    def paths(
        self, start: str | None = None, end: str | None = None
    ) -> Iterator[tuple[str, ...]]:
        """Depth-first edge-id sequences from ``start`` to ``end``.

        Defaults to root-to-sink paths; cyclic edges are never followed.
        """
        start = start or self.root
        end = end or self.sink
        if start == end:
            yield ()
            return
        for route in nx.all_simple_edge_paths(self.to_networkx(), start, end):
            yield tuple(key for _, _, key in route)

    def restrict(
        self, vertices: Iterable[str], edge_ids: Iterable[str]
    ) -> "CegGraph":
        """Subgraph on the given vertices and edges, metadata carried along."""
        keep_v = set(vertices)
        keep_e = set(edge_ids)
        edges = tuple(e for e in self.edges if e.id in keep_e)
        return self.model_copy(
            update={
                "positions": tuple(p for p in self.positions if p in keep_v),
                "edges": edges,
                "cyclic_edges": tuple(c for c in self.cyclic_edges if c in keep_e),
                "slice_of": {k: v for k, v in self.slice_of.items() if k in keep_v},
                "untimed": frozenset(u for u in self.untimed if u in keep_v),
                "stage_of": {k: v for k, v in self.stage_of.items() if k in keep_v},
                "members": {k: v for k, v in self.members.items() if k in keep_v},
            },
            deep=False,
        ).rebuilt()

    def rebuilt(self) -> "CegGraph":
        """Re-run construction so adjacency caches match the fields."""
        return CegGraph(**{name: getattr(self, name) for name in CegGraph.model_fields})

    def with_probabilities(self, probs: dict[str, float]) -> "CegGraph":
        edges = tuple(
            e.model_copy(update={"prob": repr(float(probs[e.id]))})
            if e.id in probs
            else e
            for e in self.edges
        )
        return self.model_copy(update={"edges": edges}).rebuilt()


class TimedStep(BaseModel):
    model_config = ConfigDict(frozen=True)

    position: str
    edge: str
    holding: float | None = Field(default=None, ge=0)


class TimedPath(BaseModel):
    """Root-to-sink path with the time spent at each position."""

    model_config = ConfigDict(frozen=True)

    steps: tuple[TimedStep, ...] = ()

    @property
    def n(self) -> int:
        return len(self.steps)

    @classmethod
    def build(
        cls, graph: CegGraph, edge_ids: Iterable[str], holds: Iterable[float | None]
    ) -> "TimedPath":
        steps = [
            TimedStep(position=graph.edge(eid).source, edge=eid, holding=h)
            for eid, h in zip(edge_ids, holds)
        ]
        return cls(steps=tuple(steps))


class ArrivalQuery(BaseModel):
    model_config = ConfigDict(frozen=True)

    vertex: str
    t_star: float = Field(..., ge=0)


class Evidence(BaseModel):
    """Intrinsic event plus optional point transition times."""

    model_config = ConfigDict(frozen=True)

    retained_edges: frozenset[str] | None = Field(
        default=None, description="Edges of the intrinsic event; None keeps all"
    )
    retained_paths: tuple[tuple[str, ...], ...] | None = Field(default=None)
    times: tuple[float | None, ...] | None = Field(
        default=None, description="Absolute transition times from t0=0"
    )
    holds: tuple[float | None, ...] | None = Field(
        default=None,
        description="Per-depth holding times; take precedence over times",
    )
    arrival_query: ArrivalQuery | None = None
    future_excluded: frozenset[str] = frozenset()

    @field_validator("times")
    @classmethod
    def increasing(cls, v: tuple[float | None, ...] | None):
        if v is None:
            return v
        known = [t for t in v if t is not None]
        if any(t < 0 for t in known):
            raise ValueError("transition times must be nonnegative")
        if any(b <= a for a, b in zip(known, known[1:])):
            raise ValueError("transition times must be strictly increasing")
        return v

    @field_validator("holds")
    @classmethod
    def nonnegative_holds(cls, v: tuple[float | None, ...] | None):
        if v is not None and any(h is not None and h < 0 for h in v):
            raise ValueError("holding times must be nonnegative")
        return v

    @model_validator(mode="after")
    def holds_match_times(self) -> "Evidence":
        if (
            self.holds is not None
            and self.times is not None
            and len(self.holds) != len(self.times)
        ):
            raise ValueError("holds and times must have the same length")
        return self

    def holding_times(self) -> list[float | None] | None:
        """Per-depth holding times; None where either bounding time is unknown."""
        if self.holds is not None:
            return list(self.holds)
        if self.times is None:
            return None
        holds: list[float | None] = []
        prev: float | None = 0.0
        for t in self.times:
            holds.append(None if t is None or prev is None else t - prev)
            prev = t
        return holds

    @classmethod
    def from_holding_times(
        cls, holds: list[float | None] | None, **kwargs: Any
    ) -> "Evidence":
        if holds is None:
            return cls(times=None, **kwargs)
        times: list[float | None] = []
        clock: float | None = 0.0
        for h in holds:
            clock = None if h is None or clock is None else clock + h
            times.append(clock)
        return cls(times=tuple(times), holds=tuple(holds), **kwargs)

    @property
    def length(self) -> int | None:
        """Number of transitions fixed by the timing evidence, if any."""
        seq = self.times if self.times is not None else self.holds
        return None if seq is None else len(seq)

    def without_times(self) -> "Evidence":
        return self.model_copy(update={"times": None, "holds": None})

    def admits(self, edge_ids: tuple[str, ...]) -> bool:
        """Whether a root-to-sink edge sequence belongs to the event."""
        if self.retained_edges is not None and not set(edge_ids) <= self.retained_edges:
            return False
        if self.retained_paths is not None and edge_ids not in set(self.retained_paths):
            return False
        if self.length is not None and len(edge_ids) != self.length:
            return False
        return True


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"


class ValidationIssue(BaseModel):
    code: str
    message: str
    subjects: list[str] = Field(default_factory=list)
    severity: Severity = Severity.ERROR


class ValidationReport(BaseModel):
    """Invariant violations found in a tree or graph; empty means valid."""

    issues: list[ValidationIssue] = Field(default_factory=list)

    @property
    def errors(self) -> list[ValidationIssue]:
        return [i for i in self.issues if i.severity is Severity.ERROR]

    @property
    def warnings(self) -> list[ValidationIssue]:
        return [i for i in self.issues if i.severity is Severity.WARNING]

    @property
    def ok(self) -> bool:
        return not self.errors

    def add(self, code: str, message: str, *subjects: str, warning: bool = False):
        self.issues.append(
            ValidationIssue(
                code=code,
                message=message,
                subjects=list(subjects),
                severity=Severity.WARNING if warning else Severity.ERROR,
            )
        )

    def summary(self) -> str:
        if not self.issues:
            return "valid"
        return "; ".join(f"[{i.code}] {i.message}" for i in self.issues)


class Settings(BaseModel):
    """Global engine settings."""

    grid_dt: float = Field(default=0.01, gt=0)
    grid_tmax: float = Field(default=200.0, gt=0)
    samples: int = Field(default=100_000, ge=1)
    seed: int = Field(default=2020)
    workers: int = Field(default=1, ge=1)
    max_paths: int = Field(default=10_000, ge=1)
    prob_tolerance: float = Field(default=1e-9, gt=0)
    max_forecast_steps: int = Field(default=1000, ge=1)
    output_dir: str = Field(default="build/")

    @field_validator("output_dir")
    @classmethod
    def ensure_trailing_slash(cls, v: str) -> str:
        """Ensure output directory ends with slash."""
        return v if v.endswith("/") else v + "/"

    @model_validator(mode="after")
    def grid_fits(self) -> "Settings":
        if self.grid_tmax <= self.grid_dt:
            raise ValueError("grid_tmax must exceed grid_dt")
        return self


class RunManifest(BaseModel):
    """Provenance for one CLI run; outputs cite its run_id."""

    run_id: str
    command: str
    engine_version: str
    inputs: dict[str, str] = Field(default_factory=dict)
    seed: int | None = None
    samples: int | None = None
    grid_dt: float | None = None
    grid_tmax: float | None = None
    op_counts: dict[str, int] = Field(default_factory=dict)
    wall_time_s: float = 0.0


# --------------------------------------------------------------------------
# validation


def _check_probabilities(
    report: ValidationReport, vertex: str, edges: list[Edge], tol: float
) -> None:
    total = sum((e.decimal for e in edges), Decimal(0))
    deficit = Decimal(1) - total
    if abs(float(deficit)) > tol:
        report.add(
            "prob-sum",
            f"outgoing probabilities of {vertex} sum to {total} (deficit {deficit})",
            vertex,
        )
    labels = [e.label for e in edges]
    dupes = sorted({lab for lab in labels if labels.count(lab) > 1})
    if dupes:
        report.add(
            "duplicate-label",
            f"{vertex} has repeated edge labels {dupes}",
            vertex,
        )


def _check_clusters(report: ValidationReport, edges: Iterable[Edge]) -> None:
    specs: dict[str, set[str]] = defaultdict(set)
    for e in edges:
        if e.cluster_id is not None:
            specs[e.cluster_id].add(e.holding.key() if e.holding else "none")
    for cid, keys in sorted(specs.items()):
        if len(keys) > 1:
            report.add(
                "cluster-spec",
                f"cluster {cid} mixes holding specs {sorted(keys)}",
                cid,
            )


def _check_normal_mass(report: ValidationReport, edges: Iterable[Edge]) -> None:
    from scipy.stats import norm

    for e in edges:
        h = e.holding
        if h is None or h.family is not HoldingFamily.NORMAL:
            continue
        if h.convention == "mean_sd":
            lost = float(norm.cdf(0.0, loc=h.params[0], scale=h.params[1]))
            if lost > 1e-6:
                report.add(
                    "normal-negative-mass",
                    f"edge {e.id}: {lost:.2e} of N{h.params} lies below 0 "
                    "and is not renormalised",
                    e.id,
                    warning=True,
                )


def validate(
    tree: EventTree, stages: StagePartition, tol: float = 1e-9
) -> ValidationReport:
    """Collect all invariant violations of a hued tree; never raises."""
    report = ValidationReport()
    vertex_set = set(tree.vertices)

    if not tree.vertices or tree.root not in vertex_set:
        report.add("no-root", "tree has no root vertex")
        return report
    for e in tree.edges:
        for end in (e.source, e.target):
            if end not in vertex_set:
                report.add("unknown-vertex", f"edge {e.id} uses unknown {end}", e.id)
    if tree.in_edges(tree.root):
        report.add("root-parent", f"root {tree.root} has a parent", tree.root)
    for v in tree.vertices:
        if v != tree.root and len(tree.in_edges(v)) != 1:
            report.add(
                "not-a-tree",
                f"{v} has {len(tree.in_edges(v))} parents (expected 1)",
                v,
            )
    reached = set(tree.bfs_order()) if not report.errors else vertex_set
    for v in sorted(vertex_set - reached):
        report.add("unreachable", f"{v} is not reachable from {tree.root}", v)

    for v in tree.situations:
        _check_probabilities(report, v, tree.out_edges(v), tol)
    _check_clusters(report, tree.edges)
    _check_normal_mass(report, tree.edges)

    situations = set(tree.situations)
    seen: dict[str, str] = {}
    for sid, members in sorted(stages.blocks.items()):
        for v in members:
            if v in seen:
                report.add(
                    "stage-overlap", f"{v} is in stages {seen[v]} and {sid}", v
                )
            seen[v] = sid
            if v not in situations:
                report.add("stage-member", f"stage {sid} lists non-situation {v}", v)
        members = [v for v in members if v in situations]
        for a, b in zip(members, members[1:]):
            ea, eb = tree.out_edges(a), tree.out_edges(b)
            if len(ea) != len(eb):
                report.add(
                    "stage-degree",
                    f"stage {sid}: {a} has {len(ea)} edges but {b} has {len(eb)}",
                    a,
                    b,
                )
                continue
            da = {e.label: e.decimal for e in ea}
            db = {e.label: e.decimal for e in eb}
            if da != db:
                report.add(
                    "stage-bijection",
                    f"stage {sid}: {a} and {b} differ in labelled probabilities",
                    a,
                    b,
                )
    return report


def validate_graph(graph: CegGraph, tol: float = 1e-9) -> ValidationReport:
    """Collect the CegGraph invariant violations; never raises."""
    report = ValidationReport()
    vertex_set = set(graph.vertices)
    if graph.root not in vertex_set:
        report.add("no-root", f"root {graph.root} is not a position")
        return report
    for e in graph.edges:
        for end in (e.source, e.target):
            if end not in vertex_set:
                report.add("unknown-vertex", f"edge {e.id} uses unknown {end}", e.id)
    if report.errors:
        return report

    g = graph.to_networkx()
    if not nx.is_directed_acyclic_graph(g):
        report.add("cycle", "graph has a cycle outside its cyclic edges")
        return report
    if graph.out_edges(graph.sink):
        report.add("sink-out", f"sink {graph.sink} has outgoing edges", graph.sink)

    cyclic = set(graph.cyclic_edges)
    for cid in graph.cyclic_edges:
        if not graph.has_edge(cid):
            report.add("cyclic-unknown", f"cyclic edge {cid} is not an edge", cid)
    targets = {graph.edge(c).target for c in cyclic if graph.has_edge(c)}
    for t in sorted(targets):
        if any(e.id not in cyclic for e in graph.in_edges(t)):
            report.add(
                "cyclic-target",
                f"cyclic edges enter {t}, which is not a slice root",
                t,
            )

    full = graph.to_networkx(include_cyclic=True)
    from_root = nx.descendants(full, graph.root) | {graph.root}
    to_sink = nx.ancestors(g, graph.sink) | {graph.sink}
    roots = {graph.root} | targets
    to_exit = set(to_sink)
    for c in cyclic:
        if graph.has_edge(c):
            to_exit |= nx.ancestors(g, graph.edge(c).source) | {graph.edge(c).source}
    for v in graph.positions:
        if v not in from_root:
            report.add("unreachable", f"{v} is not reachable from the root", v)
        if v not in to_exit:
            report.add("dead-end", f"{v} does not reach the sink", v)
        edges = graph.out_edges(v)
        if not edges:
            report.add("no-out-edges", f"position {v} has no outgoing edges", v)
            continue
        _check_probabilities(report, v, edges, tol)
    for v in sorted(roots - {graph.root}):
        if v not in graph.positions:
            report.add("cyclic-target", f"cyclic target {v} is not a position", v)
    _check_clusters(report, graph.edges)
    _check_normal_mass(report, graph.edges)
    return report
