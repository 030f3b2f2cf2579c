"""Model, evidence and settings file loading."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

from .errors import ModelParseError
from .models import (
    SINK,
    CegGraph,
    Edge,
    EventTree,
    Evidence,
    HoldingTimeSpec,
    Settings,
    StagePartition,
)

logger = logging.getLogger(__name__)


class EdgeDocument(BaseModel):
    id: str | None = None
    source: str = Field(..., alias="from")
    target: str = Field(..., alias="to")
    label: str
    prob: str | float
    holding: HoldingTimeSpec | None = None


class ModelDocument(BaseModel):
    """File-level schema of a model document (see schema/model_schema.json)."""

    kind: Literal["event_tree", "ceg"] | None = None
    root: str | None = None
    sink: str | None = None
    vertices: list[str]
    edges: list[EdgeDocument] = Field(default_factory=list)
    stages: dict[str, list[str]] = Field(default_factory=dict)
    clusters: dict[str, list[str]] = Field(default_factory=dict)
    cyclic_edges: list[str] = Field(default_factory=list)
    untimed_vertices: list[str] = Field(default_factory=list)
    slices: dict[str, int] = Field(default_factory=dict)
    revised: bool = False

    @model_validator(mode="after")
    def has_root(self) -> "ModelDocument":
        if not self.vertices:
            raise ValueError("no root")
        if self.root is not None and self.root not in self.vertices:
            raise ValueError(f"root {self.root} is not a listed vertex")
        return self


def _parse_error(exc: ValidationError) -> ModelParseError:
    err = exc.errors()[0]
    path = ".".join(str(p) for p in err["loc"])
    message = err["msg"].removeprefix("Value error, ")
    return ModelParseError(path, message)


def _read_json(source: Path | str | dict) -> dict:
    if isinstance(source, dict):
        return source
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ModelParseError("", f"{path} is not valid JSON: {e}")


def _infer_kind(doc: ModelDocument) -> str:
    if doc.kind:
        return doc.kind
    if doc.cyclic_edges or doc.sink:
        return "ceg"
    indegree: dict[str, int] = defaultdict(int)
    for e in doc.edges:
        indegree[e.target] += 1
    return "ceg" if any(n > 1 for n in indegree.values()) else "event_tree"


def parse_model(data: dict) -> tuple[EventTree | CegGraph, StagePartition]:
    """Build a tree or graph from an already-decoded model document."""
    try:
        doc = ModelDocument.model_validate(data)
    except ValidationError as e:
        raise _parse_error(e)

    cluster_of = {eid: cid for cid, ids in doc.clusters.items() for eid in ids}
    edges = []
    for i, e in enumerate(doc.edges):
        try:
            edge = Edge(
                id=e.id or "",
                source=e.source,
                target=e.target,
                label=e.label,
                prob=e.prob,
                holding=e.holding,
            )
        except ValidationError as exc:
            err = _parse_error(exc)
            raise ModelParseError(f"edges.{i}.{err.path}".rstrip("."), err.message)
        edges.append(edge.model_copy(update={"cluster_id": cluster_of.get(edge.id)}))

    stages = StagePartition(blocks={k: tuple(v) for k, v in doc.stages.items()})
    root = doc.root or doc.vertices[0]
    untimed = frozenset(doc.untimed_vertices)

    if _infer_kind(doc) == "event_tree":
        tree = EventTree(
            root=root, vertices=tuple(doc.vertices), edges=tuple(edges), untimed=untimed
        )
        logger.info(f"Loaded event tree: {len(tree.vertices)} vertices")
        return tree, stages

    cyclic = set(doc.cyclic_edges)
    sink = doc.sink
    if sink is None:
        has_out = {e.source for e in edges if e.id not in cyclic}
        sinks = [v for v in doc.vertices if v not in has_out]
        sink = sinks[0] if len(sinks) == 1 else SINK
    graph = CegGraph(
        root=root,
        sink=sink,
        positions=tuple(v for v in doc.vertices if v != sink),
        edges=tuple(edges),
        cyclic_edges=tuple(doc.cyclic_edges),
        slice_of=dict(doc.slices),
        untimed=untimed,
        stage_of=stages.stage_of(),
    )
    logger.info(
        f"Loaded CEG: {len(graph.positions)} positions, {len(graph.edges)} edges"
    )
    return graph, stages


def load_model(source: Path | str | dict) -> tuple[EventTree | CegGraph, StagePartition]:
    """Load a model file; schema violations raise ModelParseError."""
    return parse_model(_read_json(source))


def model_document(
    model: EventTree | CegGraph,
    stages: StagePartition | None = None,
    revised: bool = False,
    run_id: str | None = None,
) -> dict[str, Any]:
    """Inverse of parse_model; probabilities stay decimal strings."""
    edges = []
    clusters: dict[str, list[str]] = defaultdict(list)
    for e in model.edges:
        edges.append(
            {
                "id": e.id,
                "from": e.source,
                "to": e.target,
                "label": e.label,
                "prob": e.prob,
                "holding": None
                if e.holding is None
                else {
                    "family": e.holding.family.value,
                    "params": list(e.holding.params),
                    "convention": e.holding.convention,
                },
            }
        )
        if e.cluster_id is not None:
            clusters[e.cluster_id].append(e.id)

    if stages is None and isinstance(model, CegGraph):
        blocks: dict[str, list[str]] = defaultdict(list)
        for v, sid in model.stage_of.items():
            blocks[sid].append(v)
        stage_doc = {k: sorted(v) for k, v in sorted(blocks.items())}
    else:
        stage_doc = {k: list(v) for k, v in (stages.blocks if stages else {}).items()}

    doc: dict[str, Any] = {}
    if run_id:
        doc["run_id"] = run_id
    if isinstance(model, CegGraph):
        doc.update(kind="ceg", root=model.root, sink=model.sink)
    else:
        doc.update(kind="event_tree", root=model.root)
    doc["vertices"] = list(model.vertices)
    doc["edges"] = edges
    doc["stages"] = stage_doc
    doc["clusters"] = dict(clusters)
    doc["cyclic_edges"] = list(getattr(model, "cyclic_edges", ()))
    doc["untimed_vertices"] = sorted(model.untimed)
    if isinstance(model, CegGraph) and model.slice_of:
        doc["slices"] = dict(model.slice_of)
    if revised:
        doc["revised"] = True
    return doc


def save_model(
    model: EventTree | CegGraph,
    output_path: Path,
    stages: StagePartition | None = None,
    revised: bool = False,
    run_id: str | None = None,
) -> None:
    logger.info(f"Writing model: {output_path}")
    with open(output_path, "w", encoding="utf-8") as f:
        json.dump(
            model_document(model, stages, revised, run_id), f, indent=2, ensure_ascii=False
        )
        f.write("\n")


def load_evidence(source: Path | str | dict) -> Evidence:
    """Load an evidence file; schema violations raise ModelParseError."""
    data = _read_json(source)
    try:
        return Evidence.model_validate(data)
    except ValidationError as e:
        raise _parse_error(e)


def load_settings(config_dir: Path) -> Settings:
    """Load settings from YAML file."""
    settings_file = Path(config_dir) / "settings.yaml"
    if not settings_file.exists():
        return Settings()  # Use defaults

    with open(settings_file, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}

    return Settings(**data)
