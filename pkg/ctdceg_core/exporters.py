"""Writers for DOT, CSV, JSON and Excel outputs."""

import json
import logging
from pathlib import Path
from typing import Any, Dict

import pandas as pd
from graphviz import Digraph
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils import get_column_letter
from openpyxl.workbook import Workbook
from openpyxl.worksheet.table import Table, TableStyleInfo

from . import loader
from .distributions import DensityGrid
from .dynamic import SmpModel
from .models import CegGraph, EventTree, RunManifest, StagePartition
from .propagation import PropagationState, RevisedModel

logger = logging.getLogger(__name__)

PALETTE = [
    "#8dd3c7",
    "#ffffb3",
    "#bebada",
    "#fb8072",
    "#80b1d3",
    "#fdb462",
    "#b3de69",
    "#fccde5",
    "#bc80bd",
    "#ccebc5",
]
EDGE_PALETTE = ["#1f78b4", "#33a02c", "#e31a1c", "#ff7f00", "#6a3d9a", "#b15928"]


def _colour_map(ids, palette) -> Dict[str, str]:
    return {cid: palette[i % len(palette)] for i, cid in enumerate(sorted(set(ids)))}


def _edge_attrs(edge, clusters: Dict[str, str]) -> Dict[str, str]:
    attrs = {"label": f"{edge.label}\n{edge.prob}"}
    if edge.cluster_id is not None:
        attrs["color"] = clusters[edge.cluster_id]
        attrs["fontcolor"] = clusters[edge.cluster_id]
    return attrs


def tree_to_dot(tree: EventTree, stages: StagePartition) -> Digraph:
    """Event tree with stages as fill colours and clusters as edge colours."""
    stage_of = stages.stage_of()
    fills = _colour_map(stage_of.values(), PALETTE)
    clusters = _colour_map(
        [e.cluster_id for e in tree.edges if e.cluster_id], EDGE_PALETTE
    )
    dot = Digraph("event_tree", graph_attr={"rankdir": "LR"})
    for v in tree.bfs_order():
        attrs = {"shape": "circle" if tree.out_edges(v) else "point"}
        if v in stage_of:
            attrs.update(style="filled", fillcolor=fills[stage_of[v]])
        dot.node(v, v if tree.out_edges(v) else "", **attrs)
    for e in tree.edges:
        dot.edge(e.source, e.target, **_edge_attrs(e, clusters))
    return dot


def ceg_to_dot(graph: CegGraph) -> Digraph:
    """CEG with retained stage colours; cyclic edges drawn dashed."""
    fills = _colour_map(graph.stage_of.values(), PALETTE)
    clusters = _colour_map(
        [e.cluster_id for e in graph.edges if e.cluster_id], EDGE_PALETTE
    )
    cyclic = set(graph.cyclic_edges)
    dot = Digraph("ceg", graph_attr={"rankdir": "LR"})
    for v in graph.positions:
        attrs = {"shape": "circle" if graph.is_timed(v) else "box"}
        if v in graph.stage_of:
            attrs.update(style="filled", fillcolor=fills[graph.stage_of[v]])
        dot.node(v, v, **attrs)
    dot.node(graph.sink, graph.sink, shape="doublecircle")
    for e in graph.edges:
        attrs = _edge_attrs(e, clusters)
        if e.id in cyclic:
            attrs["style"] = "dashed"
        dot.edge(e.source, e.target, **attrs)
    return dot


def export_dot(dot: Digraph, output_path: Path, run_id: str = "") -> None:
    logger.info(f"Exporting to DOT: {output_path}")
    header = f"// run_id={run_id}\n" if run_id else ""
    with open(output_path, "w", encoding="utf-8") as f:
        f.write(header + dot.source)


def _export_frame(frame: pd.DataFrame, output_path: Path, run_id: str) -> None:
    with open(output_path, "w", encoding="utf-8", newline="") as f:
        if run_id:
            f.write(f"# run_id={run_id}\n")
        frame.to_csv(f, index=False, lineterminator="\n", float_format="%.12g")


def export_paths_csv(
    posteriors: Dict[tuple, float],
    output_path: Path,
    run_id: str = "",
    prior: Dict[tuple, float] | None = None,
) -> None:
    """Path posterior table, one row per transporter path."""
    logger.info(f"Exporting path posteriors: {output_path}")
    rows = []
    for i, (path, p) in enumerate(posteriors.items(), 1):
        row = {"path": f"lambda{i}", "edges": " > ".join(path), "posterior": p}
        if prior is not None:
            row["prior_posterior"] = prior.get(path, 0.0)
        rows.append(row)
    _export_frame(pd.DataFrame(rows), output_path, run_id)


def export_grid_csv(grid: DensityGrid, output_path: Path, run_id: str = "") -> None:
    logger.info(f"Exporting density grid: {output_path}")
    _export_frame(grid.to_frame(), output_path, run_id)


def export_smp(smp: SmpModel, out_dir: Path, run_id: str = "") -> tuple[Path, Path]:
    """Transition matrix CSV plus holding-spec JSON."""
    matrix_path = Path(out_dir) / "smp_matrix.csv"
    holding_path = Path(out_dir) / "smp_holding.json"
    logger.info(f"Exporting SMP: {matrix_path}, {holding_path}")
    frame = smp.transition_matrix().reset_index(names="state")
    _export_frame(frame, matrix_path, run_id)
    export_json(
        {"absorbing": list(smp.absorbing_states), "transitions": smp.holding_json()},
        holding_path,
        run_id,
    )
    return matrix_path, holding_path


def export_revised_model(
    revised: RevisedModel, output_path: Path, run_id: str = ""
) -> None:
    """Revised transporter in the model-file schema with ``revised: true``."""
    loader.save_model(revised.graph(), output_path, revised=True, run_id=run_id)


def export_json(data: Dict[str, Any], output_path: Path, run_id: str = "") -> None:
    logger.info(f"Exporting to JSON: {output_path}")
    payload = {"run_id": run_id, **data} if run_id else data
    with open(output_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False, sort_keys=True)
        f.write("\n")


def write_manifest(manifest: RunManifest, out_dir: Path) -> Path:
    path = Path(out_dir) / "manifest.json"
    logger.info(f"Writing manifest: {path}")
    with open(path, "w", encoding="utf-8") as f:
        f.write(manifest.model_dump_json(indent=2))
        f.write("\n")
    return path


# --------------------------------------------------------------------------
# Excel workbook


def _style_header(ws, headers: list[str]) -> None:
    for col, header in enumerate(headers, 1):
        cell = ws.cell(row=1, column=col, value=header)
        cell.font = Font(bold=True, color="FFFFFF")
        cell.fill = PatternFill(
            start_color="366092", end_color="366092", fill_type="solid"
        )
        cell.alignment = Alignment(horizontal="center")


def _finish_sheet(ws, name: str, n_cols: int, n_rows: int) -> None:
    table = Table(
        displayName=f"tbl_{name}",
        ref=f"A1:{get_column_letter(n_cols)}{max(n_rows + 1, 2)}",
    )
    table.tableStyleInfo = TableStyleInfo(name="TableStyleMedium2", showFirstColumn=False)
    ws.add_table(table)
    ws.freeze_panes = "B2"
    for column in ws.columns:
        width = max((len(str(c.value)) for c in column if c.value is not None), default=8)
        ws.column_dimensions[get_column_letter(column[0].column)].width = min(width + 2, 40)


def export_excel(
    state: PropagationState,
    revised: RevisedModel,
    posteriors: Dict[tuple, float],
    output_path: Path,
) -> None:
    """Propagation workbook: potentials, emphases and path posteriors."""
    logger.info(f"Exporting to Excel: {output_path}")
    wb = Workbook()
    if "Sheet" in wb.sheetnames:
        wb.remove(wb["Sheet"])

    ws = wb.create_sheet("Potentials")
    headers = ["Edge", "t-potential", "h-potential", "Revised probability"]
    _style_header(ws, headers)
    for row, eid in enumerate(state.t_potential, 2):
        ws.cell(row=row, column=1, value=eid)
        ws.cell(row=row, column=2, value=state.t_potential[eid])
        ws.cell(row=row, column=3, value=state.h_potential[eid])
        ws.cell(row=row, column=4, value=revised.prob(eid))
    _finish_sheet(ws, "Potentials", len(headers), len(state.t_potential))

    ws = wb.create_sheet("Emphases")
    headers = ["Vertex", "Holding time", "t-emphasis", "h-emphasis"]
    _style_header(ws, headers)
    for row, v in enumerate(state.accommodated, 2):
        ws.cell(row=row, column=1, value=v)
        ws.cell(row=row, column=2, value=state.holding_time.get(v))
        ws.cell(row=row, column=3, value=state.t_emphasis[v])
        ws.cell(row=row, column=4, value=state.h_emphasis[v])
    _finish_sheet(ws, "Emphases", len(headers), len(state.accommodated))

    ws = wb.create_sheet("Paths")
    headers = ["Path", "Edges", "Posterior"]
    _style_header(ws, headers)
    for row, (path, p) in enumerate(posteriors.items(), 2):
        ws.cell(row=row, column=1, value=f"lambda{row - 1}")
        ws.cell(row=row, column=2, value=" > ".join(path))
        ws.cell(row=row, column=3, value=p)
    ws.cell(row=len(posteriors) + 3, column=1, value=state.ops.summary()).font = Font(
        italic=True, color="7F8C8D"
    )
    _finish_sheet(ws, "Paths", len(headers), len(posteriors))

    wb.active = 0
    wb.save(output_path)
