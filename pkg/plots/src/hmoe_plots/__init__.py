"""Offline figure renderer for exported expert-telemetry files."""

from .render import FIGURE_KINDS, FigureSpec, render_figures
from .schema import SCHEMA_VERSION, SchemaError, Telemetry, read_telemetry_dir

__all__ = [
    "FIGURE_KINDS",
    "FigureSpec",
    "SCHEMA_VERSION",
    "SchemaError",
    "Telemetry",
    "read_telemetry_dir",
    "render_figures",
]
