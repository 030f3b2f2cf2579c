"""Command-line interface for the CT-DCEG inference engine."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Annotated, Optional

import typer
from pydantic import ValidationError

from . import engine, loader
from .dynamic import ForecastQuery
from .errors import CegError
from .models import Settings

# Configure logging
logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)

app = typer.Typer(
    name="ctdceg",
    help="CT-DCEG engine - compile, propagate and forecast chain event graphs",
    add_completion=False,
)

CfgOption = Annotated[Path, typer.Option("--cfg", help="Configuration directory")]
OutOption = Annotated[
    Optional[Path],
    typer.Option("--out-dir", help="Output directory (default: settings output_dir)"),
]
DtOption = Annotated[
    Optional[float], typer.Option("--grid-dt", help="Convolution grid step")
]
TmaxOption = Annotated[
    Optional[float], typer.Option("--grid-tmax", help="Convolution grid horizon")
]
SeedOption = Annotated[Optional[int], typer.Option("--seed", help="Sampling seed")]
SamplesOption = Annotated[
    Optional[int], typer.Option("--samples", help="Monte Carlo trajectories")
]
SlicesOption = Annotated[
    Optional[str], typer.Option("--slices", help="Passage-slice window k:l")
]


def parse_slices(value: str | None) -> tuple[int, int] | None:
    """Parse ``k:l`` into a slice window."""
    if value is None:
        return None
    try:
        k, l = (int(x) for x in value.split(":"))
    except ValueError:
        raise typer.BadParameter(f"expected k:l, got '{value}'")
    if k < 1 or l < 0:
        raise typer.BadParameter("need k >= 1 and l >= 0")
    return k, l


def _settings(cfg: Path, **overrides) -> Settings:
    settings = loader.load_settings(cfg)
    updates = {k: v for k, v in overrides.items() if v is not None}
    return Settings(**{**settings.model_dump(), **updates})


def _report(result: engine.RunResult) -> None:
    for warning in result.warnings:
        typer.echo(f"⚠️  Warning: {warning}", err=True)
    typer.echo(f"✅ {result.summary}")
    typer.echo(f"   run_id: {result.run_id}")
    for output in result.outputs:
        typer.echo(f"   Output: {output}")


def _fail(e: Exception) -> None:
    if isinstance(e, CegError):
        typer.echo(f"❌ {type(e).__name__}: {e}", err=True)
        raise typer.Exit(e.exit_code)
    if isinstance(e, (FileNotFoundError, ValidationError)):
        typer.echo(f"❌ Error: {e}", err=True)
        raise typer.Exit(2)
    typer.echo(f"❌ Unexpected error: {e}", err=True)
    logging.exception("Unexpected error")
    raise typer.Exit(1)


@app.callback()
def main(
    verbose: Annotated[
        bool, typer.Option("--verbose", "-v", help="Debug logging")
    ] = False,
) -> None:
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


@app.command()
def validate(
    model: Annotated[Path, typer.Argument(help="Model file (JSON)")],
    cfg: CfgOption = Path("config"),
) -> None:
    """Check a model file against its structural invariants."""
    try:
        typer.echo(f"🔍 Validating {model}...")
        _report(engine.validate_file(model, _settings(cfg)))
    except Exception as e:
        _fail(e)


@app.command()
def build(
    model: Annotated[Path, typer.Argument(help="Model file (JSON)")],
    cfg: CfgOption = Path("config"),
    out_dir: OutOption = None,
    minimize: Annotated[
        bool, typer.Option("--minimize", help="Merge isomorphic vertices")
    ] = False,
) -> None:
    """Compile an event tree (or re-emit a CEG) with DOT renderings."""
    try:
        typer.echo(f"🚀 Building {model}...")
        _report(engine.build(model, out_dir, _settings(cfg), minimize))
    except Exception as e:
        _fail(e)


@app.command()
def propagate(
    model: Annotated[Path, typer.Argument(help="Model file (JSON)")],
    evidence: Annotated[
        Optional[Path], typer.Argument(help="Evidence file (JSON)")
    ] = None,
    cfg: CfgOption = Path("config"),
    out_dir: OutOption = None,
    grid_dt: DtOption = None,
    grid_tmax: TmaxOption = None,
    slices: SlicesOption = None,
    minimize: Annotated[
        bool, typer.Option("--minimize", help="Minimise the transporter")
    ] = False,
) -> None:
    """Propagate evidence and write revised model, path CSV and workbook."""
    try:
        settings = _settings(cfg, grid_dt=grid_dt, grid_tmax=grid_tmax)
        typer.echo(f"🚀 Propagating {evidence or 'no evidence'} on {model}...")
        _report(
            engine.propagate_files(
                model, evidence, out_dir, settings, parse_slices(slices), minimize
            )
        )
    except typer.BadParameter:
        raise
    except Exception as e:
        _fail(e)


@app.command()
def unroll(
    model: Annotated[Path, typer.Argument(help="Dynamic model file (JSON)")],
    slices: SlicesOption = "1:0",
    cfg: CfgOption = Path("config"),
    out_dir: OutOption = None,
) -> None:
    """Unroll passage-slices k..k+l into an acyclic graph."""
    try:
        _report(engine.unroll_file(model, out_dir, _settings(cfg), parse_slices(slices)))
    except typer.BadParameter:
        raise
    except Exception as e:
        _fail(e)


@app.command()
def split(
    model: Annotated[Path, typer.Argument(help="Dynamic model file (JSON)")],
    evidence: Annotated[Path, typer.Argument(help="Evidence file (JSON)")],
    slices: SlicesOption = "1:0",
    cfg: CfgOption = Path("config"),
    out_dir: OutOption = None,
) -> None:
    """Split into past, revised present and future semi-Markov model."""
    try:
        _report(
            engine.split_files(
                model, evidence, out_dir, _settings(cfg), parse_slices(slices)
            )
        )
    except typer.BadParameter:
        raise
    except Exception as e:
        _fail(e)


@app.command()
def forecast(
    model: Annotated[Path, typer.Argument(help="Dynamic model file (JSON)")],
    query: Annotated[
        str, typer.Option("--query", help="n_step | absorption | first_passage")
    ] = "absorption",
    evidence: Annotated[
        Optional[Path], typer.Option("--evidence", help="Evidence file (JSON)")
    ] = None,
    start: Annotated[Optional[str], typer.Option("--start")] = None,
    target: Annotated[Optional[str], typer.Option("--target")] = None,
    steps: Annotated[int, typer.Option("--steps", help="Steps for n_step")] = 1,
    cfg: CfgOption = Path("config"),
    out_dir: OutOption = None,
    seed: SeedOption = None,
    samples: SamplesOption = None,
) -> None:
    """Query the future model: n-step, absorption or first-passage time."""
    try:
        settings = _settings(cfg, seed=seed, samples=samples)
        q = ForecastQuery(kind=query, start=start, target=target, steps=steps)
        _report(engine.forecast_file(model, evidence, q, out_dir, settings))
    except Exception as e:
        _fail(e)


@app.command()
def verify(
    models: Annotated[int, typer.Option("--models", help="Random models")] = 100,
    cfg: CfgOption = Path("config"),
    out_dir: OutOption = None,
    seed: SeedOption = None,
) -> None:
    """Compare propagation with brute-force enumeration on random models."""
    try:
        result = engine.verify_run(models, out_dir, _settings(cfg, seed=seed))
        _report(result)
        if result.warnings:
            raise typer.Exit(1)
    except typer.Exit:
        raise
    except Exception as e:
        _fail(e)


@app.command("export-grid")
def export_grid(
    model: Annotated[Path, typer.Argument(help="Model file (JSON)")],
    edges: Annotated[list[str], typer.Argument(help="Edge ids along the route")],
    cfg: CfgOption = Path("config"),
    out_dir: OutOption = None,
    grid_dt: DtOption = None,
    grid_tmax: TmaxOption = None,
) -> None:
    """Write the convolved holding-time density of a route as CSV."""
    try:
        settings = _settings(cfg, grid_dt=grid_dt, grid_tmax=grid_tmax)
        _report(engine.export_grid(model, edges, out_dir, settings))
    except Exception as e:
        _fail(e)


@app.command()
def version() -> None:
    """Display version information."""
    from . import __version__

    typer.echo(f"CT-DCEG engine v{__version__}")


if __name__ == "__main__":
    app()
