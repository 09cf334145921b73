"""Reader for the documented telemetry export schema (format_version 1).

This package deliberately re-declares the schema instead of importing the
trainer: it must consume only the exported files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

SCHEMA_VERSION = 1
CSV_COLUMNS = [
    "step",
    "layer",
    "expert",
    "size",
    "activation_count",
    "mean_gate",
    "activated_params",
    "cum_flops",
]


class SchemaError(ValueError):
    """Input files do not match the declared telemetry schema."""


@dataclass
class Telemetry:
    """Parsed export: per-(step, layer, expert) rows plus the JSON payload."""

    rows: list[dict]
    payload: dict

    @property
    def steps(self) -> list[int]:
        return sorted({r["step"] for r in self.rows})

    @property
    def expert_sizes(self) -> dict[int, int]:
        return {r["expert"]: r["size"] for r in self.rows}

    @property
    def tokens_per_step(self) -> int | None:
        config = self.payload.get("config", {})
        batch = config.get("train", {}).get("batch_size")
        context = config.get("model", {}).get("context_length")
        return batch * context if batch and context else None

    @property
    def loss_curve(self) -> list[dict]:
        return self.payload.get("loss_curve", [])

    @property
    def analysis(self) -> dict:
        return self.payload.get("analysis", {})

    def matrix(self, name: str) -> np.ndarray | None:
        rows = self.analysis.get(name)
        if not rows:
            return None
        return np.array(
            [[np.nan if v is None else v for v in row] for row in rows], dtype=np.float64
        )

    def per_expert_series(self, column: str) -> dict[int, list[float]]:
        """Per-expert series over steps, summing the column across layers."""
        acc: dict[tuple[int, int], float] = {}
        for r in self.rows:
            key = (r["expert"], r["step"])
            acc[key] = acc.get(key, 0.0) + r[column]
        steps = self.steps
        return {
            e: [acc.get((e, s), 0.0) for s in steps]
            for e in sorted({r["expert"] for r in self.rows})
        }


def read_telemetry_dir(telemetry_dir: str) -> Telemetry:
    import os

    csv_path = os.path.join(telemetry_dir, "telemetry.csv")
    json_path = os.path.join(telemetry_dir, "telemetry.json")

    try:
        with open(json_path) as f:
            payload = json.load(f)
    except OSError as exc:
        raise SchemaError(f"cannot read {json_path}: {exc}") from exc
    version = payload.get("format_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(
            f"{json_path}: format_version {version!r} is not supported "
            f"(this renderer understands version {SCHEMA_VERSION})"
        )

    rows: list[dict] = []
    try:
        handle = open(csv_path, newline="")
    except OSError as exc:
        raise SchemaError(f"cannot read {csv_path}: {exc}") from exc
    with handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise SchemaError(
                f"{csv_path}: missing column {missing[0]!r} (schema version {SCHEMA_VERSION})"
            )
        for raw in reader:
            rows.append(
                {
                    "step": int(raw["step"]),
                    "layer": int(raw["layer"]),
                    "expert": int(raw["expert"]),
                    "size": int(raw["size"]),
                    "activation_count": int(raw["activation_count"]),
                    "mean_gate": float(raw["mean_gate"]),
                    "activated_params": float(raw["activated_params"]),
                    "cum_flops": float(raw["cum_flops"]),
                }
            )
    return Telemetry(rows=rows, payload=payload)
