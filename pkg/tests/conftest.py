"""Shared fixtures for the CT-DCEG engine tests."""

from pathlib import Path

import pytest

from ctdceg_core import loader
from ctdceg_core.dynamic import DcegModel, unroll
from ctdceg_core.models import Edge, EventTree, Evidence, HoldingTimeSpec

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"
MODELS_DIR = CONFIG_DIR / "models"
EVIDENCE_DIR = CONFIG_DIR / "evidence"

PRESENT_EDGES = frozenset(
    {
        "w0.strain_1",
        "w0.strain_2",
        "w1.treatment_1",
        "w1.treatment_2",
        "w3.recovered",
        "w4.recovered",
    }
)
PRESENT_TIMES = (2.5, 6.5, 11.0)

# Recovery-edge densities at the observed holding time 4.5.
RECOVERY_DENSITY = {"w3.recovered": 0.17826, "w4.recovered": 0.91921}


def rectangle(height: float, centre: float = 4.5) -> HoldingTimeSpec:
    """Unit-mass flat density of the given height around ``centre``."""
    half = 0.5 / height
    return HoldingTimeSpec(
        family="empirical-grid",
        params=(centre - half, height, centre + half, height),
    )


def binary_tree(depth: int, probs=("0.5", "0.5")) -> EventTree:
    """Complete binary tree with identical edges everywhere."""
    vertices, edges, layer = ["v0"], [], ["v0"]
    for _ in range(depth):
        nxt = []
        for v in layer:
            for label, p in zip("ab", probs):
                child = f"v{len(vertices)}"
                vertices.append(child)
                nxt.append(child)
                edges.append(Edge(source=v, target=child, label=label, prob=p))
        layer = nxt
    return EventTree(root="v0", vertices=tuple(vertices), edges=tuple(edges))


@pytest.fixture
def example1_path():
    return MODELS_DIR / "example1.json"


@pytest.fixture
def example2_path():
    return MODELS_DIR / "example2.json"


@pytest.fixture
def example3_path():
    return MODELS_DIR / "example3_mixed.json"


@pytest.fixture
def example1_tree(example1_path):
    """Hued event tree and stage partition of the infection example."""
    return loader.load_model(example1_path)


@pytest.fixture
def example2_template(example2_path):
    graph, _ = loader.load_model(example2_path)
    return graph


@pytest.fixture
def example2_dynamic(example2_template):
    return DcegModel(template=example2_template)


@pytest.fixture
def example2_present(example2_dynamic):
    """Third passage-slice alone, recovery edges ending in the sink."""
    return unroll(example2_dynamic, 3, 0)


@pytest.fixture
def example2_injected(example2_template):
    """Template whose recovery holdings have the tabulated densities at 4.5."""
    edges = tuple(
        e.model_copy(update={"holding": rectangle(RECOVERY_DENSITY[e.id])})
        if e.id in RECOVERY_DENSITY
        else e
        for e in example2_template.edges
    )
    template = example2_template.model_copy(update={"edges": edges}).rebuilt()
    return unroll(DcegModel(template=template), 3, 0)


@pytest.fixture
def present_evidence():
    return Evidence(retained_edges=PRESENT_EDGES, times=PRESENT_TIMES)


@pytest.fixture
def example3_graph(example3_path):
    graph, _ = loader.load_model(example3_path)
    return graph


@pytest.fixture
def example3_evidence(example3_graph):
    """Everything but the untreated branch, with four transition times."""
    retained = frozenset(e.id for e in example3_graph.edges if e.label != "not_treated")
    return Evidence(retained_edges=retained, times=(1.0, 2.0, 5.0, 11.0))


@pytest.fixture
def cli_runner():
    """Provide a CLI test runner."""
    from typer.testing import CliRunner

    runner = CliRunner()
    if not hasattr(runner, "isolated_filesystem"):
        # Newer typer releases vendor click and drop this helper; restore
        # click's behaviour (chdir into a fresh temp dir for the block).
        import contextlib
        import os
        import shutil
        import tempfile

        @contextlib.contextmanager
        def isolated_filesystem(temp_dir=None):
            cwd = os.getcwd()
            dt = tempfile.mkdtemp(dir=temp_dir)
            os.chdir(dt)
            try:
                yield dt
            finally:
                os.chdir(cwd)
                if temp_dir is None:
                    shutil.rmtree(dt, ignore_errors=True)

        runner.isolated_filesystem = isolated_filesystem
    return runner


@pytest.fixture
def temp_output_dir(tmp_path):
    """Create temporary output directory for testing."""
    output_dir = tmp_path / "output"
    output_dir.mkdir()
    return output_dir


@pytest.fixture
def make_rectangle():
    """Factory for flat unit-mass densities."""
    return rectangle


@pytest.fixture
def make_binary_tree():
    """Factory for complete binary event trees."""
    return binary_tree
