"""Run orchestration behind the CLI commands."""

import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Any, Dict

from pydantic import BaseModel, Field

from . import __version__, exporters, loader
from .distributions import convolve
from .dynamic import DcegModel, ForecastQuery, forecast, revise_future, split, unroll
from .errors import IncompleteModelError, StructuralError, ValidationFailedError
from .models import (
    CegGraph,
    EventTree,
    Evidence,
    RunManifest,
    Settings,
    StagePartition,
    validate,
    validate_graph,
)
from .oracle import verify
from .propagation import (
    arrival_time_path_posterior,
    build_transporter,
    path_posteriors,
    propagate,
)
from .staging import compile_ceg, compute_positions, minimize

logger = logging.getLogger(__name__)


class RunResult(BaseModel):
    """What a command produced; ``summary`` is the one-line status."""

    run_id: str
    outputs: list[str] = Field(default_factory=list)
    summary: str = ""
    warnings: list[str] = Field(default_factory=list)


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def make_run_id(command: str, inputs: Dict[str, str], params: Dict[str, Any]) -> str:
    """Digest of the command, input digests and parameters (no wall time)."""
    blob = json.dumps(
        {"command": command, "inputs": inputs, "params": params, "v": __version__},
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class _Run:
    """Collects outputs and writes the manifest when the command finishes."""

    def __init__(
        self,
        command: str,
        out_dir: Path | None,
        inputs: Dict[str, Path | None],
        params: Dict[str, Any],
        settings: Settings,
    ):
        self.started = time.perf_counter()
        self.command = command
        self.out_dir = Path(out_dir or settings.output_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.inputs = {k: file_digest(p) for k, p in inputs.items() if p is not None}
        self.params = params
        self.settings = settings
        self.run_id = make_run_id(command, self.inputs, params)
        self.result = RunResult(run_id=self.run_id)
        self.op_counts: Dict[str, int] = {}

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.result.outputs.append(str(p))
        return p

    def finish(self, summary: str) -> RunResult:
        manifest = RunManifest(
            run_id=self.run_id,
            command=self.command,
            engine_version=__version__,
            inputs=self.inputs,
            seed=self.params.get("seed"),
            samples=self.params.get("samples"),
            grid_dt=self.settings.grid_dt,
            grid_tmax=self.settings.grid_tmax,
            op_counts=self.op_counts,
            wall_time_s=round(time.perf_counter() - self.started, 6),
        )
        self.result.outputs.append(str(exporters.write_manifest(manifest, self.out_dir)))
        self.result.summary = summary
        logger.info(f"{self.command} finished: {summary}")
        return self.result


def load_graph(
    model_path: Path, settings: Settings
) -> tuple[CegGraph, EventTree | None, StagePartition, list[str]]:
    """Load a model file and compile it when it is an event tree.

    Raises:
        ValidationFailedError: if the model breaks a structural invariant.
    """
    model, stages = loader.load_model(model_path)
    tree = None
    if isinstance(model, EventTree):
        report = validate(model, stages, settings.prob_tolerance)
        if not report.ok:
            raise ValidationFailedError(report)
        tree = model
        model = compile_ceg(tree, compute_positions(tree, stages), stages)
    else:
        report = validate_graph(model, settings.prob_tolerance)
        if not report.ok:
            raise ValidationFailedError(report)
    warnings = [f"[{w.code}] {w.message}" for w in report.warnings]
    for w in warnings:
        logger.warning(w)
    return model, tree, stages, warnings


def _window(graph: CegGraph, slices: tuple[int, int] | None) -> CegGraph:
    if graph.cyclic_edges:
        k, l = slices or (1, 0)
        return unroll(DcegModel(template=graph), k, l)
    if slices not in (None, (1, 0)):
        raise StructuralError("--slices needs a model with cyclic edges")
    return graph


def validate_file(model_path: Path, settings: Settings) -> RunResult:
    model, stages = loader.load_model(model_path)
    if isinstance(model, EventTree):
        report = validate(model, stages, settings.prob_tolerance)
    else:
        report = validate_graph(model, settings.prob_tolerance)
    if not report.ok:
        raise ValidationFailedError(report)
    return RunResult(
        run_id=make_run_id("validate", {"model": file_digest(model_path)}, {}),
        summary=f"valid ({len(report.warnings)} warnings)",
        warnings=[f"[{w.code}] {w.message}" for w in report.warnings],
    )


def build(
    model_path: Path, out_dir: Path | None, settings: Settings, minimize_graph: bool = False
) -> RunResult:
    """Compile a model file into a CEG file plus DOT renderings."""
    run = _Run("build", out_dir, {"model": model_path}, {"minimize": minimize_graph}, settings)
    graph, tree, stages, run.result.warnings = load_graph(model_path, settings)
    if minimize_graph:
        graph = minimize(graph)
    if tree is not None:
        exporters.export_dot(exporters.tree_to_dot(tree, stages), run.path("tree.dot"), run.run_id)
    exporters.export_dot(exporters.ceg_to_dot(graph), run.path("ceg.dot"), run.run_id)
    loader.save_model(graph, run.path("compiled.json"), run_id=run.run_id)
    return run.finish(f"positions={len(graph.positions)} edges={len(graph.edges)}")


def propagate_files(
    model_path: Path,
    evidence_path: Path | None,
    out_dir: Path | None,
    settings: Settings,
    slices: tuple[int, int] | None = None,
    minimize_graph: bool = False,
    excel: bool = True,
) -> RunResult:
    """End-to-end propagation: revised model, path CSV and workbook."""
    params = {"slices": slices, "minimize": minimize_graph, "grid": [settings.grid_dt, settings.grid_tmax]}
    run = _Run("propagate", out_dir, {"model": model_path, "evidence": evidence_path}, params, settings)
    graph, _, _, run.result.warnings = load_graph(model_path, settings)
    graph = _window(graph, slices)
    evidence = loader.load_evidence(evidence_path) if evidence_path else Evidence()

    if evidence.arrival_query is not None:
        posterior = arrival_time_path_posterior(
            graph, evidence, settings.grid_dt, settings.grid_tmax
        )
        exporters.export_paths_csv(posterior, run.path("arrival_posterior.csv"), run.run_id)
        q = evidence.arrival_query
        return run.finish(f"routes={len(posterior)} to {q.vertex} at t*={q.t_star}")

    transporter = build_transporter(graph, evidence, minimize=minimize_graph)
    state, revised = propagate(graph, transporter, evidence)
    posteriors = path_posteriors(revised)
    untimed = evidence.without_times()
    _, prior_revised = propagate(graph, build_transporter(graph, untimed, minimize_graph), untimed)
    run.op_counts = state.ops.model_dump()

    exporters.export_revised_model(revised, run.path("revised.json"), run.run_id)
    exporters.export_paths_csv(
        posteriors, run.path("paths.csv"), run.run_id, prior=path_posteriors(prior_revised)
    )
    if excel:
        exporters.export_excel(state, revised, posteriors, run.path("propagation.xlsx"))
    return run.finish(state.ops.summary())


def unroll_file(
    model_path: Path, out_dir: Path | None, settings: Settings, slices: tuple[int, int]
) -> RunResult:
    run = _Run("unroll", out_dir, {"model": model_path}, {"slices": slices}, settings)
    graph, _, _, run.result.warnings = load_graph(model_path, settings)
    unrolled = unroll(DcegModel(template=graph), *slices)
    loader.save_model(unrolled, run.path("unrolled.json"), run_id=run.run_id)
    exporters.export_dot(exporters.ceg_to_dot(unrolled), run.path("unrolled.dot"), run.run_id)
    return run.finish(f"positions={len(unrolled.positions)} edges={len(unrolled.edges)}")


def split_files(
    model_path: Path,
    evidence_path: Path,
    out_dir: Path | None,
    settings: Settings,
    slices: tuple[int, int],
) -> RunResult:
    """Past, revised present and future SMP of a dynamic model."""
    run = _Run(
        "split", out_dir, {"model": model_path, "evidence": evidence_path}, {"slices": slices}, settings
    )
    graph, _, _, run.result.warnings = load_graph(model_path, settings)
    result = split(DcegModel(template=graph), loader.load_evidence(evidence_path), *slices)
    run.op_counts = result.state.ops.model_dump()
    if result.past is not None:
        loader.save_model(result.past, run.path("past.json"), run_id=run.run_id)
    exporters.export_revised_model(result.revised, run.path("present.json"), run.run_id)
    matrix, holding = exporters.export_smp(result.future, run.out_dir, run.run_id)
    run.result.outputs += [str(matrix), str(holding)]
    return run.finish(f"{result.state.ops.summary()} future_states={len(result.future.states)}")


def forecast_file(
    model_path: Path,
    evidence_path: Path | None,
    query: ForecastQuery,
    out_dir: Path | None,
    settings: Settings,
) -> RunResult:
    params = {
        "query": query.model_dump(),
        "seed": settings.seed,
        "samples": settings.samples,
        "workers": settings.workers,
    }
    run = _Run(
        "forecast", out_dir, {"model": model_path, "evidence": evidence_path}, params, settings
    )
    graph, _, _, run.result.warnings = load_graph(model_path, settings)
    evidence = loader.load_evidence(evidence_path) if evidence_path else Evidence()

    smp = revise_future(DcegModel(template=graph), evidence)
    result = forecast(
        smp,
        query,
        samples=settings.samples,
        seed=settings.seed,
        workers=settings.workers,
        max_steps=settings.max_forecast_steps,
    )
    if result.warning:
        run.result.warnings.append(result.warning)
    exporters.export_json(result.model_dump(), run.path("forecast.json"), run.run_id)
    if result.distribution is not None:
        summary = " ".join(f"{s}={p:.5f}" for s, p in result.distribution.items())
    else:
        summary = f"p={result.probability:.6f}"
        if result.mean is not None:
            summary += f" mean={result.mean:.4f} se={result.std_error:.4f}"
    return run.finish(summary)


def verify_run(n_models: int, out_dir: Path | None, settings: Settings) -> RunResult:
    run = _Run("verify", out_dir, {}, {"models": n_models, "seed": settings.seed}, settings)
    report = verify(n_models, settings.seed, settings.max_paths)
    exporters.export_json(report.model_dump(), run.path("agreement.json"), run.run_id)
    result = run.finish(report.summary())
    if not report.ok(settings.prob_tolerance):
        result.warnings.append("engine and enumeration disagree")
    return result


def export_grid(
    model_path: Path, edge_ids: list[str], out_dir: Path | None, settings: Settings
) -> RunResult:
    """Convolved density of the holding times along the given edges."""
    params = {"edges": edge_ids, "grid": [settings.grid_dt, settings.grid_tmax]}
    run = _Run("export-grid", out_dir, {"model": model_path}, params, settings)
    graph, _, _, run.result.warnings = load_graph(model_path, settings)
    specs = []
    for eid in edge_ids:
        edge = graph.edge(eid) if graph.has_edge(eid) else None
        if edge is None:
            raise StructuralError(f"unknown edge {eid}")
        if edge.holding is None:
            raise IncompleteModelError(f"edge {eid} has no holding-time spec")
        specs.append(edge.holding)
    grid = convolve(specs, settings.grid_dt, settings.grid_tmax)
    exporters.export_grid_csv(grid, run.path("grid.csv"), run.run_id)
    return run.finish(f"mass={grid.integral():.6f} mean={grid.mean():.4f}")
