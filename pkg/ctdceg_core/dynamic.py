"""Dynamic models: unrolling, past/present/future split and forecasting."""

from __future__ import annotations

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from decimal import Decimal
from typing import Literal

import networkx as nx
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg

from .distributions import MixtureHolding
from .errors import (
    ContradictionError,
    NonIntrinsicEvidenceError,
    StructuralError,
    ZeroSupportError,
)
from .models import SINK, CegGraph, Edge, Evidence
from .propagation import (
    PropagationState,
    RevisedModel,
    build_transporter,
    propagate,
    resolve_edge_ids,
    vertex_depths,
)

logger = logging.getLogger(__name__)


def _slice_id(name: str, index: int) -> str:
    return f"{name}@{index}"


def template_id(unrolled_id: str) -> str:
    return unrolled_id.split("@", 1)[0]


def slice_index(unrolled_id: str) -> int | None:
    _, sep, tail = unrolled_id.partition("@")
    return int(tail) if sep else None


class DcegModel(BaseModel):
    """A CT-DCEG template: one passage-slice plus its cyclic edges."""

    model_config = ConfigDict(frozen=True)

    template: CegGraph
    entry: str | None = Field(
        default=None, description="Slice root re-entered through cyclic edges"
    )

    @property
    def entry_vertex(self) -> str | None:
        if self.entry is not None:
            return self.entry
        targets = {self.template.edge(c).target for c in self.template.cyclic_edges}
        if len(targets) > 1:
            raise StructuralError(
                f"cyclic edges enter {sorted(targets)}; name the slice entry"
            )
        return next(iter(targets), None)

    def slice_vertices(self, index: int) -> list[str]:
        """Template positions of passage-slice ``index`` (1-based)."""
        start = self.template.root if index == 1 else self.entry_vertex
        g = self.template.to_networkx()
        reach = nx.descendants(g, start) | {start}
        return [v for v in self.template.positions if v in reach]


def unroll(model: DcegModel, k: int, l: int) -> CegGraph:
    """Acyclic graph of slices k..k+l; the last slice's cyclic edges hit the sink."""
    if k < 1 or l < 0:
        raise ValueError(f"need k >= 1 and l >= 0, got k={k}, l={l}")
    template = model.template
    if not template.cyclic_edges:
        if k != 1:
            raise StructuralError("an acyclic template has a single slice")
        return template

    cyclic = set(template.cyclic_edges)
    entry = model.entry_vertex
    last = k + l
    positions: list[str] = []
    edges: list[Edge] = []
    slice_of: dict[str, int] = {}
    members: dict[str, tuple[str, ...]] = {}
    stage_of: dict[str, str] = {}
    untimed: set[str] = set()

    for s in range(k, last + 1):
        vertices = model.slice_vertices(s)
        for v in vertices:
            vid = _slice_id(v, s)
            positions.append(vid)
            slice_of[vid] = s
            members[vid] = (v,)
            if v in template.stage_of:
                stage_of[vid] = template.stage_of[v]
            if not template.is_timed(v):
                untimed.add(vid)
            for e in template.out_edges(v):
                if e.id in cyclic:
                    target = _slice_id(entry, s + 1) if s < last else SINK
                elif e.target == template.sink:
                    target = SINK
                else:
                    target = _slice_id(e.target, s)
                edges.append(
                    e.model_copy(
                        update={
                            "id": _slice_id(e.id, s),
                            "source": vid,
                            "target": target,
                        }
                    )
                )

    root = template.root if k == 1 else entry
    graph = CegGraph(
        root=_slice_id(root, k),
        sink=SINK,
        positions=tuple(positions),
        edges=tuple(edges),
        slice_of=slice_of,
        untimed=frozenset(untimed),
        stage_of=stage_of,
        members=members,
    )
    logger.info(
        f"Unrolled slices {k}..{last}: {len(graph.positions)} positions, "
        f"{len(graph.edges)} edges"
    )
    return graph


# --------------------------------------------------------------------------
# semi-Markov future model


class SmpTransition(BaseModel):
    model_config = ConfigDict(frozen=True)

    source: str
    target: str
    prob: float
    holding: MixtureHolding | None = None
    edges: tuple[str, ...] = ()


class SmpModel(BaseModel):
    """Semi-Markov view of a (revised) CT-DCEG template."""

    model_config = ConfigDict(frozen=True)

    graph: CegGraph = Field(..., description="Revised template the SMP came from")
    initial: str
    states: tuple[str, ...]
    transitions: tuple[SmpTransition, ...]
    absorbing_states: tuple[str, ...]

    def index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.states)}

    def matrix(self) -> np.ndarray:
        """Embedded Markov chain; absorbing rows are identity rows."""
        idx = self.index()
        P = np.zeros((len(self.states), len(self.states)))
        for tr in self.transitions:
            P[idx[tr.source], idx[tr.target]] += tr.prob
        for s in self.absorbing_states:
            P[idx[s], idx[s]] = 1.0
        return P

    def transition_matrix(self) -> pd.DataFrame:
        return pd.DataFrame(self.matrix(), index=self.states, columns=self.states)

    def out_transitions(self, state: str) -> list[SmpTransition]:
        return [tr for tr in self.transitions if tr.source == state]

    def holding_json(self) -> dict:
        return {
            f"{tr.source}->{tr.target}": {
                "prob": tr.prob,
                "edges": list(tr.edges),
                "holding": tr.holding.to_dict() if tr.holding else None,
            }
            for tr in self.transitions
        }


def revise_future(model: DcegModel, evidence: Evidence) -> SmpModel:
    """Prune template edges the evidence rules out and renormalise.

    Raises:
        StructuralError: if a reachable position loses all its out-edges.
    """
    template = model.template
    excluded = set(evidence.future_excluded)
    unknown = excluded - {e.id for e in template.edges}
    if unknown:
        raise NonIntrinsicEvidenceError(f"unknown future edges {sorted(unknown)}")

    kept = [e for e in template.edges if e.id not in excluded]
    g = nx.MultiDiGraph()
    g.add_nodes_from(template.vertices)
    for e in kept:
        g.add_edge(e.source, e.target, key=e.id)
    reach = nx.descendants(g, template.root) | {template.root}

    probs: dict[str, float] = {}
    edges_by_source: dict[str, list[Edge]] = defaultdict(list)
    for e in kept:
        if e.source in reach:
            edges_by_source[e.source].append(e)
    for v in template.positions:
        if v not in reach:
            continue
        out = edges_by_source[v]
        total = sum((e.decimal for e in out), Decimal(0))
        if not out or total == 0:
            raise StructuralError(f"{v} is reachable but the evidence removes all its edges")
        for e in out:
            probs[e.id] = float(e.decimal / total)
        if excluded & {e.id for e in template.out_edges(v)}:
            logger.debug(f"Renormalised {v}: {[probs[e.id] for e in out]}")

    revised = template.restrict(reach, probs).with_probabilities(probs)

    merged: dict[tuple[str, str], list[Edge]] = defaultdict(list)
    for e in revised.edges:
        merged[(e.source, e.target)].append(e)
    transitions = []
    for (source, target), group in merged.items():
        weight = sum(e.probability for e in group)
        holding = None
        if revised.is_timed(source) and all(e.holding for e in group):
            holding = MixtureHolding(
                components=tuple((e.probability, e.holding) for e in group)
            )
        transitions.append(
            SmpTransition(
                source=source,
                target=target,
                prob=weight,
                holding=holding,
                edges=tuple(e.id for e in group),
            )
        )

    smp = SmpModel(
        graph=revised,
        initial=revised.root,
        states=tuple(revised.vertices),
        transitions=tuple(transitions),
        absorbing_states=(revised.sink,),
    )
    logger.info(
        f"Future model: {len(smp.states)} states, {len(smp.transitions)} transitions"
    )
    return smp


# --------------------------------------------------------------------------
# split and extension


class ModelSplit(BaseModel):
    """Past, present and future models around an evidence window."""

    model_config = ConfigDict(frozen=True)

    model: DcegModel
    k: int
    l: int
    evidence: Evidence
    past: CegGraph | None
    present: CegGraph
    future: SmpModel
    transporter: CegGraph
    state: PropagationState
    revised: RevisedModel


def split(model: DcegModel, evidence: Evidence, k: int, l: int) -> ModelSplit:
    """Unroll the evidence window, propagate on it and revise the future."""
    present = unroll(model, k, l)
    transporter = build_transporter(present, evidence)
    state, revised = propagate(present, transporter, evidence)
    past = unroll(model, 1, k - 2) if k > 1 else None
    return ModelSplit(
        model=model,
        k=k,
        l=l,
        evidence=evidence,
        past=past,
        present=present,
        future=revise_future(model, evidence),
        transporter=transporter,
        state=state,
        revised=revised,
    )


def _resolve_in_slices(
    graph: CegGraph, evidence: Evidence, lo: int, hi: int
) -> set[str]:
    in_range = {e.id for e in graph.edges if lo <= (slice_index(e.id) or 0) <= hi}
    if evidence.retained_edges is None:
        return in_range
    return resolve_edge_ids(graph, evidence.retained_edges) & in_range


def _past_transporter(window: CegGraph, evidence: Evidence, i: int, k: int) -> CegGraph:
    try:
        return build_transporter(window, evidence)
    except ContradictionError as err:
        raise ZeroSupportError(
            f"evidence for slices {i}..{k - 1} has zero support: {err}"
        ) from err


def extend_present_with_past(
    split_: ModelSplit, new_evidence: Evidence, i: int
) -> ModelSplit:
    """Graft evidence about slices i..k-1 in front of the present model.

    Messages of present vertices whose surviving edges are unchanged are
    reused from the existing propagation state.

    Raises:
        ZeroSupportError: if the past evidence leaves no path into the present.
    """
    k, l = split_.k, split_.l
    if i == k:
        return split_
    if not 1 <= i < k:
        raise ValueError(f"slice {i} is not in the past of slice {k}")

    window = unroll(split_.model, i, k + l - i)
    entry = _slice_id(split_.model.entry_vertex, k)
    g = window.to_networkx()
    leads_in = nx.ancestors(g, entry) | {entry}

    past_edges = {
        eid
        for eid in _resolve_in_slices(window, new_evidence, i, k - 1)
        if window.edge(eid).source in leads_in and window.edge(eid).target in leads_in
    }
    present_edges = _resolve_in_slices(window, split_.evidence, k, k + l)
    retained = frozenset(past_edges | present_edges)

    old_holds = split_.evidence.holding_times()
    new_holds = new_evidence.holding_times()
    timing = Evidence()
    if old_holds is not None or new_holds is not None:
        if new_holds is None:
            reached = _past_transporter(window, Evidence(retained_edges=retained), i, k)
            depth = vertex_depths(reached).get(entry)
            new_holds = [None] * depth
        if old_holds is None:
            raise NonIntrinsicEvidenceError(
                "transition times for the past need times for the present too"
            )
        timing = Evidence.from_holding_times(new_holds + old_holds)

    combined = Evidence(
        retained_edges=retained,
        times=timing.times,
        holds=timing.holds,
        future_excluded=split_.evidence.future_excluded | new_evidence.future_excluded,
    )
    transporter = _past_transporter(window, combined, i, k)
    state, revised = propagate(window, transporter, combined, previous=split_.state)
    logger.info(f"Extended present back to slice {i}: {state.ops.summary()}")
    return split_.model_copy(
        update={
            "k": i,
            "l": k + l - i,
            "evidence": combined,
            "past": unroll(split_.model, 1, i - 2) if i > 1 else None,
            "present": window,
            "transporter": transporter,
            "state": state,
            "revised": revised,
        }
    )


# --------------------------------------------------------------------------
# forecasting


class ForecastQuery(BaseModel):
    kind: Literal["n_step", "absorption", "first_passage"]
    start: str | None = None
    target: str | None = None
    steps: int = Field(default=1, ge=0)


class ForecastResult(BaseModel):
    kind: str
    start: str
    target: str | None = None
    distribution: dict[str, float] | None = None
    probability: float | None = None
    mean: float | None = None
    std_error: float | None = None
    quantiles: dict[str, float] = Field(default_factory=dict)
    samples: int | None = None
    seed: int | None = None
    warning: str | None = None


QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def _first_passage_worker(
    smp: SmpModel,
    start: str,
    target: str,
    n: int,
    seed: np.random.SeedSequence,
    max_steps: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised trajectories; returns (hit mask, elapsed times)."""
    rng = np.random.default_rng(seed)
    idx = smp.index()
    tgt = idx[target]
    absorbing = {idx[s] for s in smp.absorbing_states}
    rows: dict[int, list[SmpTransition]] = defaultdict(list)
    for tr in smp.transitions:
        rows[idx[tr.source]].append(tr)

    state = np.full(n, idx[start])
    clock = np.zeros(n)
    hit = state == tgt
    alive = ~hit & ~np.isin(state, list(absorbing))
    for _ in range(max_steps):
        if not alive.any():
            break
        for s in np.unique(state[alive]):
            mask = alive & (state == s)
            count = int(mask.sum())
            outs = rows[int(s)]
            p = np.array([tr.prob for tr in outs])
            choice = rng.choice(len(outs), size=count, p=p / p.sum())
            nxt = np.empty(count, dtype=int)
            dt = np.zeros(count)
            for j, tr in enumerate(outs):
                sel = choice == j
                if not sel.any():
                    continue
                nxt[sel] = idx[tr.target]
                if tr.holding is not None:
                    dt[sel] = tr.holding.sample(int(sel.sum()), rng)
            state[mask] = nxt
            clock[mask] += dt
        hit |= alive & (state == tgt)
        alive &= ~hit & ~np.isin(state, list(absorbing))
    return hit, clock


def forecast(
    smp: SmpModel,
    query: ForecastQuery,
    samples: int = 100_000,
    seed: int = 2020,
    workers: int = 1,
    max_steps: int = 1000,
) -> ForecastResult:
    """Answer an n-step, absorption or first-passage query on the future model.

    An unreachable target yields probability 0 and a warning instead of an
    error.
    """
    start = query.start or smp.initial
    idx = smp.index()
    for s in (start, query.target):
        if s is not None and s not in idx:
            raise StructuralError(f"{s} is not a state of the future model")
    P = smp.matrix()

    if query.kind == "n_step":
        dist = np.zeros(len(smp.states))
        dist[idx[start]] = 1.0
        dist = dist @ np.linalg.matrix_power(P, query.steps)
        return ForecastResult(
            kind=query.kind,
            start=start,
            distribution={s: float(dist[i]) for i, s in enumerate(smp.states)},
        )

    target = query.target or smp.absorbing_states[0]
    g = nx.DiGraph()
    g.add_nodes_from(smp.states)
    g.add_edges_from((tr.source, tr.target) for tr in smp.transitions)
    if target != start and target not in nx.descendants(g, start):
        logger.warning(f"Forecast target {target} is unreachable from {start}")
        return ForecastResult(
            kind=query.kind,
            start=start,
            target=target,
            probability=0.0,
            warning=f"{target} is unreachable from {start}",
        )

    if query.kind == "absorption":
        if start == target:
            prob = 1.0
        else:
            # Make the target absorbing and solve (I - Q) b = r on the rest.
            stop = set(smp.absorbing_states) | {target}
            transient = [s for s in smp.states if s not in stop]
            ti = [idx[s] for s in transient]
            Q = P[np.ix_(ti, ti)]
            r = P[ti, idx[target]]
            try:
                b = linalg.solve(np.eye(len(ti)) - Q, r)
            except linalg.LinAlgError:
                raise StructuralError("future model has a closed transient class")
            prob = 0.0 if start in stop else float(b[transient.index(start)])
        return ForecastResult(
            kind=query.kind, start=start, target=target, probability=prob
        )

    children = np.random.SeedSequence(seed).spawn(workers)
    shares = [samples // workers + (w < samples % workers) for w in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(
            pool.map(
                lambda args: _first_passage_worker(smp, start, target, *args, max_steps),
                zip(shares, children),
            )
        )
    hit = np.concatenate([h for h, _ in parts])
    clock = np.concatenate([c for _, c in parts])
    times = clock[hit]
    result = ForecastResult(
        kind=query.kind,
        start=start,
        target=target,
        probability=float(hit.mean()),
        samples=samples,
        seed=seed,
    )
    if len(times):
        result.mean = float(times.mean())
        result.std_error = float(times.std(ddof=1) / np.sqrt(len(times))) if len(times) > 1 else 0.0
        result.quantiles = {
            f"q{int(q * 100):02d}": float(np.quantile(times, q)) for q in QUANTILES
        }
    logger.info(
        f"First passage {start}->{target}: p={result.probability:.4f}, "
        f"mean={result.mean}, se={result.std_error}"
    )
    return result
