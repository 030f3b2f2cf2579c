"""Brute-force and Monte Carlo checks of the propagation engine.

Nothing here is used on the inference path: paths are enumerated
explicitly and Bayes' rule is applied to each of them, so every number the
engine produces can be recomputed independently.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from decimal import Decimal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from . import distributions
from .dynamic import SmpModel, template_id
from .errors import CapacityError, IncompleteModelError, StructuralError, ZeroSupportError
from .models import CegGraph, Edge, EventTree, Evidence, HoldingTimeSpec, StagePartition
from .propagation import build_transporter, path_posteriors, propagate
from .staging import compile_ceg, compute_positions

logger = logging.getLogger(__name__)


class PathRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    path_id: int
    edges: tuple[str, ...]
    positions: tuple[str, ...]
    timed: tuple[bool, ...]
    probs: tuple[float, ...]
    holdings: tuple[HoldingTimeSpec | None, ...]

    @property
    def prior(self) -> float:
        return float(np.prod(self.probs)) if self.probs else 1.0


class PathTable(BaseModel):
    """Every root-to-sink path of an acyclic graph with its prior."""

    rows: list[PathRow] = Field(default_factory=list)

    def total(self) -> float:
        return sum(r.prior for r in self.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "path_id": [r.path_id for r in self.rows],
                "edges": [" > ".join(r.edges) for r in self.rows],
                "prior": [r.prior for r in self.rows],
                "holdings": [
                    " | ".join(h.key() if h else "-" for h in r.holdings)
                    for r in self.rows
                ],
            }
        )


def enumerate_paths(graph: CegGraph, max_paths: int = 10_000) -> PathTable:
    """Depth-first enumeration; fails as soon as the bound is exceeded."""
    if graph.cyclic_edges:
        raise StructuralError("enumerate_paths needs an acyclic graph")
    rows = []
    for i, path in enumerate(graph.paths()):
        if i >= max_paths:
            raise CapacityError(f"more than {max_paths} root-to-sink paths")
        edges = [graph.edge(eid) for eid in path]
        rows.append(
            PathRow(
                path_id=i,
                edges=path,
                positions=tuple(e.source for e in edges),
                timed=tuple(graph.is_timed(e.source) for e in edges),
                probs=tuple(e.probability for e in edges),
                holdings=tuple(e.holding for e in edges),
            )
        )
    logger.debug(f"Enumerated {len(rows)} paths")
    return PathTable(rows=rows)


class EnumerationPosterior(BaseModel):
    t_emphasis: dict[str, float]
    h_emphasis: dict[str, float]
    revised: dict[str, float]
    path_posterior: dict[tuple[str, ...], float]
    joint: dict[tuple[str, ...], float]


def _admits(evidence: Evidence, path: tuple[str, ...]) -> bool:
    if evidence.retained_edges is not None and not all(
        eid in evidence.retained_edges or template_id(eid) in evidence.retained_edges
        for eid in path
    ):
        return False
    if evidence.retained_paths is not None and path not in {
        tuple(p) for p in evidence.retained_paths
    }:
        return False
    return evidence.length is None or len(path) == evidence.length


def _h(row: PathRow, step: int, holds: list[float | None] | None) -> float:
    t = holds[step] if holds is not None and step < len(holds) else None
    if t is None or not row.timed[step]:
        return 1.0
    spec = row.holdings[step]
    if spec is None:
        raise IncompleteModelError(f"edge {row.edges[step]} has no holding-time spec")
    return distributions.density(spec, t)


def posterior_by_enumeration(
    table: PathTable, evidence: Evidence
) -> EnumerationPosterior:
    """Apply Bayes' rule path by path.

    For each vertex w the emphases are sums over the evidence paths sharing
    one consistent prefix p to w, each weighted by prior(path) / prior(p);
    the h-emphasis additionally weights by the holding density at w.
    """
    holds = evidence.holding_times()
    rows = [r for r in table.rows if _admits(evidence, r.edges) and r.prior > 0]
    if not rows:
        raise ZeroSupportError("no path of positive probability matches the evidence")

    prefixes: dict[str, tuple[PathRow, int]] = {}
    for r in rows:
        for i, v in enumerate(r.positions):
            prefixes.setdefault(v, (r, i))

    t_emph: dict[str, float] = {}
    h_emph: dict[str, float] = {}
    revised: dict[str, float] = {}
    for v, (ref, i) in prefixes.items():
        prefix = ref.edges[:i]
        base = float(np.prod(ref.probs[:i])) if i else 1.0
        phi = phi_t = 0.0
        by_edge: dict[str, float] = defaultdict(float)
        for r in rows:
            if r.edges[:i] != prefix or len(r.edges) <= i:
                continue
            ratio = r.prior / base
            weighted = ratio * _h(r, i, holds)
            phi += ratio
            phi_t += weighted
            by_edge[r.edges[i]] += weighted
        if phi_t <= 0:
            raise ZeroSupportError(f"evidence has zero density at {v}")
        t_emph[v] = phi
        h_emph[v] = phi_t
        for eid, w in by_edge.items():
            revised[eid] = w / phi_t

    path_post = {r.edges: float(np.prod([revised[e] for e in r.edges])) for r in rows}
    joint_w = {
        r.edges: r.prior * float(np.prod([_h(r, i, holds) for i in range(len(r.edges))]))
        for r in rows
    }
    total = sum(joint_w.values())
    if total <= 0:
        raise ZeroSupportError("evidence has zero joint density")
    return EnumerationPosterior(
        t_emphasis=t_emph,
        h_emphasis=h_emph,
        revised=revised,
        path_posterior=path_post,
        joint={p: w / total for p, w in joint_w.items()},
    )


# --------------------------------------------------------------------------
# simulation


class TrajectorySet(BaseModel):
    """Simulated trajectories as padded index arrays (-1 past the end)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    labels: list[str]
    steps: np.ndarray
    holds: np.ndarray
    seed: int

    @property
    def n(self) -> int:
        return len(self.steps)

    def paths(self) -> list[tuple[str, ...]]:
        return [tuple(self.labels[j] for j in row if j >= 0) for row in self.steps]

    def edge_frequencies(self) -> dict[str, float]:
        counts = Counter(self.labels[j] for j in self.steps.ravel() if j >= 0)
        return {e: c / self.n for e, c in counts.items()}

    def path_frequencies(self, evidence: Evidence | None = None) -> dict[tuple[str, ...], float]:
        """Empirical path distribution, conditioned on an intrinsic event."""
        paths = self.paths()
        if evidence is not None:
            plain = evidence.without_times()
            paths = [p for p in paths if _admits(plain, p)]
        counts = Counter(paths)
        total = sum(counts.values())
        return {p: c / total for p, c in counts.items()} if total else {}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "trajectory": range(self.n),
                "path": [" > ".join(p) for p in self.paths()],
                "total_time": np.where(self.steps >= 0, self.holds, 0.0).sum(axis=1),
            }
        )


def _choices(model: CegGraph | SmpModel):
    """vertex -> (labels, targets, probabilities, samplers)."""
    table: dict[str, list] = defaultdict(list)
    if isinstance(model, SmpModel):
        start = model.initial
        stop = set(model.absorbing_states)
        for tr in model.transitions:
            table[tr.source].append(
                (f"{tr.source}->{tr.target}", tr.target, tr.prob, tr.holding)
            )
    else:
        start = model.root
        stop = {model.sink}
        for e in model.edges:
            timed = model.is_timed(e.source) and e.holding is not None
            table[e.source].append((e.id, e.target, e.probability, e.holding if timed else None))
    return start, stop, table


def simulate(
    model: CegGraph | SmpModel, n: int, seed: int = 2020, max_steps: int = 1000
) -> TrajectorySet:
    """Draw ``n`` i.i.d. timed trajectories; identical output for a fixed seed."""
    if n < 1:
        raise ValueError("need at least one trajectory")
    rng = np.random.default_rng(seed)
    start, stop, table = _choices(model)
    labels = sorted({lab for rows in table.values() for lab, *_ in rows})
    label_idx = {lab: i for i, lab in enumerate(labels)}
    vertices = sorted(set(table) | stop | {start})
    v_idx = {v: i for i, v in enumerate(vertices)}

    state = np.full(n, v_idx[start])
    steps_out, holds_out = [], []
    for _ in range(max_steps):
        alive = ~np.isin(state, [v_idx[s] for s in stop])
        if not alive.any():
            break
        col = np.full(n, -1)
        hold = np.zeros(n)
        for s in np.unique(state[alive]):
            mask = alive & (state == s)
            rows = table[vertices[int(s)]]
            p = np.array([r[2] for r in rows], dtype=float)
            pick = rng.choice(len(rows), size=int(mask.sum()), p=p / p.sum())
            nxt = np.empty(len(pick), dtype=int)
            lab = np.empty(len(pick), dtype=int)
            dt = np.zeros(len(pick))
            for j, (name, target, _, sampler) in enumerate(rows):
                sel = pick == j
                if not sel.any():
                    continue
                nxt[sel] = v_idx[target]
                lab[sel] = label_idx[name]
                if isinstance(sampler, HoldingTimeSpec):
                    dt[sel] = distributions.sample(sampler, int(sel.sum()), rng)
                elif sampler is not None:
                    dt[sel] = sampler.sample(int(sel.sum()), rng)
            state[mask] = nxt
            col[mask] = lab
            hold[mask] = dt
        steps_out.append(col)
        holds_out.append(hold)

    steps = np.stack(steps_out, axis=1) if steps_out else np.empty((n, 0), dtype=int)
    holds = np.stack(holds_out, axis=1) if holds_out else np.empty((n, 0))
    return TrajectorySet(labels=labels, steps=steps, holds=holds, seed=seed)


# --------------------------------------------------------------------------
# random model corpus


FAMILIES = ("exponential", "normal", "weibull")


def _random_holding(rng: np.random.Generator) -> HoldingTimeSpec:
    family = FAMILIES[int(rng.integers(len(FAMILIES)))]
    if family == "exponential":
        params = (round(float(rng.uniform(0.5, 3.0)), 3),)
    elif family == "normal":
        params = (round(float(rng.uniform(1.0, 6.0)), 3), round(float(rng.uniform(0.7, 2.0)), 3))
    else:
        params = (round(float(rng.uniform(0.8, 2.0)), 3), round(float(rng.uniform(1.5, 5.0)), 3))
    return HoldingTimeSpec(family=family, params=params)


def _random_probs(rng: np.random.Generator, k: int) -> list[str]:
    while True:
        ints = np.maximum(1, np.round(rng.dirichlet(np.ones(k) * 2) * 1000)).astype(int)
        ints[-1] = 1000 - ints[:-1].sum()
        if ints[-1] >= 1:
            return [str(Decimal(int(i)) / 1000) for i in ints]


def random_model(
    seed: int,
    max_depth: int = 6,
    max_branching: int = 3,
    max_paths: int = 200,
) -> tuple[CegGraph, Evidence]:
    """Layered, randomly staged model plus compatible evidence.

    All leaves sit at the same depth, so every vertex has a single depth and
    timed evidence can be attached to it.
    """
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, max_depth + 1))
    vertices = ["s0"]
    edges: list[Edge] = []
    untimed: set[str] = set()
    layer = ["s0"]
    by_depth: list[list[str]] = []
    for d in range(depth):
        by_depth.append(layer)
        nxt = []
        for idx, v in enumerate(layer):
            # Every later vertex of the layer still needs one child.
            room = max_paths - len(nxt) - (len(layer) - idx - 1)
            k = int(rng.integers(1, max(1, min(max_branching, room)) + 1))
            if rng.random() < 0.2:
                untimed.add(v)
            for j, p in enumerate(_random_probs(rng, k)):
                child = f"s{len(vertices)}"
                vertices.append(child)
                nxt.append(child)
                edges.append(
                    Edge(
                        id=f"{v}.{'abc'[j]}",
                        source=v,
                        target=child,
                        label="abc"[j],
                        prob=p,
                        holding=None if v in untimed else _random_holding(rng),
                    )
                )
        layer = nxt

    out: dict[str, list[Edge]] = defaultdict(list)
    for e in edges:
        out[e.source].append(e)
    # Stage same-depth, same-degree situations at random by copying edges.
    blocks: dict[str, tuple[str, ...]] = {}
    replaced: dict[str, list[Edge]] = {}
    for d, layer in enumerate(by_depth):
        by_degree: dict[int, list[str]] = defaultdict(list)
        for v in layer:
            by_degree[len(out[v])].append(v)
        for degree, group in by_degree.items():
            members = [v for v in group if rng.random() < 0.5]
            if len(members) < 2:
                continue
            head = members[0]
            blocks[f"u{d}_{degree}"] = tuple(members)
            for v in members[1:]:
                if head in untimed:
                    untimed.add(v)
                else:
                    untimed.discard(v)
                replaced[v] = [
                    h.model_copy(
                        update={"id": f"{v}.{h.label}", "source": v, "target": t.target}
                    )
                    for h, t in zip(out[head], out[v])
                ]
    edges = [e for v in vertices for e in replaced.get(v, out.get(v, []))]

    tree = EventTree(root="s0", vertices=tuple(vertices), edges=tuple(edges), untimed=frozenset(untimed))
    stages = StagePartition(blocks=blocks)
    graph = compile_ceg(tree, compute_positions(tree, stages), stages)

    # Evidence: keep a random walk, drop other edges with probability 0.3.
    walk, v, clock, times = [], graph.root, 0.0, []
    while v != graph.sink:
        outs = graph.out_edges(v)
        e = outs[int(rng.integers(len(outs)))]
        walk.append(e.id)
        if e.holding is not None and graph.is_timed(v):
            clock += float(np.clip(distributions.sample(e.holding, 1, rng)[0], 0.05, 8.0))
        else:
            clock += float(rng.uniform(0.05, 2.0))
        times.append(clock)
        v = e.target
    retained = frozenset(
        e.id for e in graph.edges if e.id in walk or rng.random() >= 0.3
    )
    masked = tuple(t if rng.random() >= 0.25 else None for t in times)
    return graph, Evidence(retained_edges=retained, times=masked)


class AgreementReport(BaseModel):
    """Largest disagreements between propagation and enumeration."""

    models: int = 0
    max_t_emphasis_error: float = 0.0
    max_h_emphasis_error: float = 0.0
    max_revised_error: float = 0.0
    max_path_error: float = 0.0
    failures: list[str] = Field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(
            self.max_t_emphasis_error,
            self.max_h_emphasis_error,
            self.max_revised_error,
            self.max_path_error,
        )

    def ok(self, tol: float = 1e-9) -> bool:
        return not self.failures and self.max_error < tol

    def summary(self) -> str:
        return (
            f"models={self.models} max_abs_error={self.max_error:.3e} "
            f"(t-emphasis {self.max_t_emphasis_error:.1e}, "
            f"h-emphasis {self.max_h_emphasis_error:.1e}, "
            f"revised {self.max_revised_error:.1e}, "
            f"paths {self.max_path_error:.1e}) failures={len(self.failures)}"
        )


def compare(
    graph: CegGraph, evidence: Evidence, report: AgreementReport, max_paths: int = 10_000
) -> None:
    """Fold the engine-vs-enumeration differences of one model into ``report``."""
    transporter = build_transporter(graph, evidence)
    state, revised = propagate(graph, transporter, evidence)
    oracle = posterior_by_enumeration(enumerate_paths(graph, max_paths), evidence)

    def worst(engine: dict, truth: dict, keys) -> float:
        return max((abs(engine[k] - truth[k]) for k in keys), default=0.0)

    positions = transporter.positions
    report.max_t_emphasis_error = max(
        report.max_t_emphasis_error, worst(state.t_emphasis, oracle.t_emphasis, positions)
    )
    report.max_h_emphasis_error = max(
        report.max_h_emphasis_error, worst(state.h_emphasis, oracle.h_emphasis, positions)
    )
    report.max_revised_error = max(
        report.max_revised_error,
        worst(revised.revised_probs, oracle.revised, revised.revised_probs),
    )
    engine_paths = path_posteriors(revised)
    report.max_path_error = max(
        report.max_path_error,
        worst(engine_paths, oracle.path_posterior, engine_paths),
    )
    report.models += 1


def verify(
    n_models: int = 100, seed: int = 2020, max_paths: int = 10_000
) -> AgreementReport:
    """Differential test of propagation against enumeration on random models."""
    report = AgreementReport()
    for i in range(n_models):
        graph, evidence = random_model(seed + i)
        try:
            compare(graph, evidence, report, max_paths)
        except (KeyError, ValueError) as e:
            report.failures.append(f"model {seed + i}: {e}")
            logger.warning(f"Model {seed + i} failed: {e}")
    logger.info(f"Verification: {report.summary()}")
    return report
