"""Exact inference for continuous-time (dynamic) chain event graphs."""

__version__ = "1.0.0"
__author__ = "CT-DCEG Team"

from .models import (
    CegGraph,
    Edge,
    EventTree,
    Evidence,
    HoldingTimeSpec,
    Settings,
    StagePartition,
    TimedPath,
    validate,
    validate_graph,
)
from .loader import load_evidence, load_model, load_settings, save_model
from .staging import compile_ceg, compute_positions, minimize
from .propagation import (
    arrival_time_path_posterior,
    build_transporter,
    path_posteriors,
    propagate,
)
from .dynamic import (
    DcegModel,
    extend_present_with_past,
    forecast,
    revise_future,
    split,
    unroll,
)

__all__ = [
    "CegGraph",
    "Edge",
    "EventTree",
    "Evidence",
    "HoldingTimeSpec",
    "Settings",
    "StagePartition",
    "TimedPath",
    "validate",
    "validate_graph",
    "load_evidence",
    "load_model",
    "load_settings",
    "save_model",
    "compile_ceg",
    "compute_positions",
    "minimize",
    "arrival_time_path_posterior",
    "build_transporter",
    "path_posteriors",
    "propagate",
    "DcegModel",
    "extend_present_with_past",
    "forecast",
    "revise_future",
    "split",
    "unroll",
]
