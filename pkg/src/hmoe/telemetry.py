"""Activation accounting, expert-distribution analyses, and report export.

Conventions used throughout:

* An expert of width ``h_ffn`` costs ``3 * h_input * h_ffn`` parameters, so
  a token's activated parameters are the sum of that quantity over the
  experts it engaged, excluding the router (reported separately).
* Forward FLOPs per token follow the matmul-parameter convention:
  2 * (activated expert params) + 2 * (attention + output-projection
  params).  Training FLOPs are ``TRAIN_FLOPS_MULTIPLIER`` times forward.
* Expert token distributions are compared with the earth-mover distance on
  the token-id line (L1 between empirical CDFs) and with KL divergence under
  additive smoothing; experts that never saw a token yield NaN sentinels.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, SchemaError
from .layer import HeterogeneityProfile
from .model import ModelConfig
from .routing import RoutingDecision

FORMAT_VERSION = 1
TRAIN_FLOPS_MULTIPLIER = 3.0
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


# ---------------------------------------------------------------------------
# Per-batch accounting
# ---------------------------------------------------------------------------


def expert_param_costs(profile: HeterogeneityProfile, h_input: int) -> np.ndarray:
    return 3.0 * h_input * np.asarray(profile.h_ffn, dtype=np.float64)


def activated_params(
    decision: RoutingDecision, profile: HeterogeneityProfile, h_input: int
) -> tuple[np.ndarray, float]:
    """Per-token and batch-mean activated expert parameters for one layer."""
    per_token = decision.mask.astype(np.float64) @ expert_param_costs(profile, h_input)
    return per_token, float(per_token.mean())


def dense_matmul_params(cfg: ModelConfig) -> float:
    """Non-expert matmul parameters per token: attention plus output head."""
    return float(cfg.n_layers * 4 * cfg.h_input * cfg.h_input + cfg.vocab_size * cfg.h_input)


def flops_per_token(
    decisions: RoutingDecision | list[RoutingDecision],
    profile: HeterogeneityProfile,
    cfg: ModelConfig,
) -> tuple[np.ndarray, float]:
    """Forward FLOPs per token given the routing decisions of each layer."""
    if isinstance(decisions, RoutingDecision):
        decisions = [decisions]
    expert_term = np.zeros(decisions[0].n_tokens, dtype=np.float64)
    for decision in decisions:
        expert_term += activated_params(decision, profile, cfg.h_input)[0]
    per_token = 2.0 * expert_term + 2.0 * dense_matmul_params(cfg)
    return per_token, float(per_token.mean())


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class TelemetryRecord:
    """One logged training step across all layers."""

    step: int
    n_tokens: int
    h_input: int
    expert_sizes: list[int]
    activation_counts: np.ndarray  # [layers, experts] int
    gate_sums: np.ndarray  # [layers, experts]
    per_layer_activated_params: np.ndarray  # [layers] mean per token
    mean_activated_params: float  # summed over layers, mean per token
    flops_per_token_mean: float
    cum_flops: float
    token_histograms: np.ndarray  # [layers, experts, vocab] int
    activation_masks: np.ndarray | None = None  # [layers, tokens, experts] bool
    class_counts: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self) -> None:
        if (self.activation_counts < 0).any():
            raise ContractError("negative activation count")
        hist_totals = self.token_histograms.sum(axis=2)
        if not np.array_equal(hist_totals, self.activation_counts):
            raise ContractError("token histograms disagree with activation counts")
        if self.activation_masks is not None and not self.activation_masks.any(axis=2).all():
            raise ContractError("a token activated no expert")


def build_record(
    step: int,
    decisions: list[RoutingDecision],
    profile: HeterogeneityProfile,
    cfg: ModelConfig,
    token_ids: np.ndarray,
    nll: np.ndarray | None,
    cum_flops: float,
) -> TelemetryRecord:
    """Assemble the telemetry for one batch.

    ``token_ids`` is the flattened [tokens] id array the decisions were made
    over; ``nll`` the matching per-token losses (used to split tokens into
    difficulty quartiles), or None to skip class counting.
    """
    n_layers = len(decisions)
    n_experts = profile.n_experts
    token_ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    n_tokens = token_ids.size

    counts = np.zeros((n_layers, n_experts), dtype=np.int64)
    gate_sums = np.zeros((n_layers, n_experts), dtype=np.float64)
    per_layer_ap = np.zeros(n_layers, dtype=np.float64)
    hist = np.zeros((n_layers, n_experts, cfg.vocab_size), dtype=np.int64)
    for layer, decision in enumerate(decisions):
        if decision.n_tokens != n_tokens:
            raise ContractError("decision token count disagrees with the batch")
        counts[layer] = decision.mask.sum(axis=0)
        gate_sums[layer] = decision.gates.data.sum(axis=0)
        per_layer_ap[layer] = activated_params(decision, profile, cfg.h_input)[1]
        for e in range(n_experts):
            hist[layer, e] = np.bincount(token_ids[decision.mask[:, e]], minlength=cfg.vocab_size)

    class_counts: dict[str, np.ndarray] = {}
    if nll is not None:
        nll = np.asarray(nll, dtype=np.float64).reshape(-1)
        stacked = np.zeros((n_tokens, n_experts), dtype=np.int64)
        for decision in decisions:
            stacked += decision.mask
        hard = nll >= np.quantile(nll, 0.75)
        easy = nll <= np.quantile(nll, 0.25)
        class_counts["hard"] = stacked[hard].sum(axis=0)
        class_counts["easy"] = stacked[easy].sum(axis=0)

    record = TelemetryRecord(
        step=step,
        n_tokens=n_tokens,
        h_input=cfg.h_input,
        expert_sizes=list(profile.h_ffn),
        activation_counts=counts,
        gate_sums=gate_sums,
        per_layer_activated_params=per_layer_ap,
        mean_activated_params=float(per_layer_ap.sum()),
        flops_per_token_mean=flops_per_token(decisions, profile, cfg)[1],
        cum_flops=cum_flops,
        token_histograms=hist,
        activation_masks=np.stack([d.mask for d in decisions]),
        class_counts=class_counts,
    )
    record.validate()
    return record


# ---------------------------------------------------------------------------
# Distribution analyses
# ---------------------------------------------------------------------------


def _normalized(histograms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = np.asarray(histograms, dtype=np.float64)
    totals = h.sum(axis=1)
    occupied = totals > 0
    probs = np.zeros_like(h)
    probs[occupied] = h[occupied] / totals[occupied, None]
    return probs, occupied


def expert_similarity_matrix(histograms: np.ndarray) -> np.ndarray:
    """Pairwise earth-mover distance between per-expert token distributions.

    Tokens live on the integer id line, so the distance is the L1 difference
    of the empirical CDFs.  Experts with empty histograms give NaN rows.
    """
    probs, occupied = _normalized(histograms)
    n = len(probs)
    cdf = np.cumsum(probs, axis=1)
    out = np.full((n, n), np.nan)
    for i in range(n):
        if not occupied[i]:
            continue
        for j in range(i, n):
            if not occupied[j]:
                continue
            d = float(np.abs(cdf[i] - cdf[j]).sum()) if i != j else 0.0
            out[i, j] = d
            out[j, i] = d
    return out


def expert_synergy_matrix(histograms: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Pairwise KL(row expert || column expert) with additive smoothing."""
    probs, occupied = _normalized(histograms)
    n, vocab = probs.shape
    smooth = (probs + eps) / (1.0 + eps * vocab)
    log_smooth = np.log(smooth)
    out = np.full((n, n), np.nan)
    for i in range(n):
        if not occupied[i]:
            continue
        for j in range(n):
            if not occupied[j]:
                continue
            out[i, j] = 0.0 if i == j else float((smooth[i] * (log_smooth[i] - log_smooth[j])).sum())
    return out


def token_activation_ratios(
    activations: np.ndarray, class_mask: np.ndarray, class_name: str
) -> np.ndarray:
    """Share of each expert in the activations of tokens in one class."""
    class_mask = np.asarray(class_mask, dtype=bool)
    if not class_mask.any():
        raise ContractError(f"no tokens match class {class_name!r}")
    counts = np.asarray(activations, dtype=np.float64)[class_mask].sum(axis=0)
    total = counts.sum()
    if total == 0:
        raise ContractError(f"tokens of class {class_name!r} activated no experts")
    return counts / total


@dataclass
class AnalysisReport:
    expert_sizes: list[int]
    similarity: np.ndarray
    synergy: np.ndarray
    activation_ratios: dict[str, np.ndarray]
    activated_param_ratio: dict[str, float]


# ---------------------------------------------------------------------------
# Accumulation over a run
# ---------------------------------------------------------------------------


class TelemetryAccumulator:
    """Telemetry sink: keeps logged records and running histogram totals."""

    def __init__(self) -> None:
        self.records: list[TelemetryRecord] = []
        self._hist: np.ndarray | None = None
        self._class_counts: dict[str, np.ndarray] = {}
        self._ap_sum = 0.0
        self._ap_records = 0

    def add(self, record: TelemetryRecord) -> None:
        self.records.append(record)
        if self._hist is None:
            self._hist = record.token_histograms.astype(np.int64).copy()
        else:
            self._hist += record.token_histograms
        for name, counts in record.class_counts.items():
            if name in self._class_counts:
                self._class_counts[name] = self._class_counts[name] + counts
            else:
                self._class_counts[name] = counts.copy()
        self._ap_sum += record.mean_activated_params
        self._ap_records += 1

    @property
    def combined_histograms(self) -> np.ndarray | None:
        """Per-expert histograms summed over layers."""
        return None if self._hist is None else self._hist.sum(axis=0)

    def analysis(self, profile: HeterogeneityProfile, cfg: ModelConfig) -> AnalysisReport:
        n = profile.n_experts
        hist = self.combined_histograms
        if hist is None:
            hist = np.zeros((n, cfg.vocab_size), dtype=np.int64)
        ratios: dict[str, np.ndarray] = {}
        for name, counts in self._class_counts.items():
            total = counts.sum()
            if total > 0:
                ratios[name] = counts / total
        layer_budget_params = 3.0 * cfg.h_input * profile.budget
        ap_ratio: dict[str, float] = {}
        if self._ap_records:
            mean_ap = self._ap_sum / self._ap_records
            ap_ratio["train"] = mean_ap / (cfg.n_layers * layer_budget_params)
        return AnalysisReport(
            expert_sizes=list(profile.h_ffn),
            similarity=expert_similarity_matrix(hist),
            synergy=expert_synergy_matrix(hist),
            activation_ratios=ratios,
            activated_param_ratio=ap_ratio,
        )


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def _matrix_to_json(m: np.ndarray) -> list[list[float | None]]:
    return [[None if np.isnan(v) else float(v) for v in row] for row in m]


def _matrix_from_json(rows: list[list[float | None]]) -> np.ndarray:
    return np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=np.float64)


def analysis_to_json(report: AnalysisReport) -> dict:
    return {
        "expert_sizes": list(report.expert_sizes),
        "similarity": _matrix_to_json(report.similarity),
        "synergy": _matrix_to_json(report.synergy),
        "activation_ratios": {k: [float(x) for x in v] for k, v in report.activation_ratios.items()},
        "activated_param_ratio": {k: float(v) for k, v in report.activated_param_ratio.items()},
    }


def export_report(
    records: list[TelemetryRecord],
    analysis: AnalysisReport | None,
    out_dir: str,
    *,
    config: dict | None = None,
    loss_curve: list[dict] | None = None,
) -> tuple[str, str]:
    """Write telemetry.csv and telemetry.json; returns both paths.

    CSV: one row per (step, layer, expert) with the documented column order.
    JSON: format_version, config echo, loss curve, and analysis matrices.
    Output is byte-deterministic for identical inputs.
    """
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "telemetry.csv")
    json_path = os.path.join(out_dir, "telemetry.json")

    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for record in records:
            n_layers, n_experts = record.activation_counts.shape
            for layer in range(n_layers):
                for e in range(n_experts):
                    count = int(record.activation_counts[layer, e])
                    mean_gate = record.gate_sums[layer, e] / count if count else 0.0
                    row_params = 3 * record.h_input * record.expert_sizes[e] * count
                    writer.writerow(
                        [
                            record.step,
                            layer,
                            e,
                            record.expert_sizes[e],
                            count,
                            repr(float(mean_gate)),
                            row_params,
                            repr(float(record.cum_flops)),
                        ]
                    )

    payload: dict = {"format_version": FORMAT_VERSION}
    if config is not None:
        payload["config"] = config
    if loss_curve is not None:
        payload["loss_curve"] = loss_curve
    if analysis is not None:
        payload["analysis"] = analysis_to_json(analysis)
    with open(json_path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")
    return csv_path, json_path


def read_telemetry_csv(path: str) -> list[dict]:
    """Load and schema-check the CSV written by ``export_report``."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header {CSV_COLUMNS}") from None
        if header != CSV_COLUMNS:
            missing = [c for c in CSV_COLUMNS if c not in header]
            field = missing[0] if missing else "column order"
            raise SchemaError(f"{path}: bad header field {field!r}; expected columns {CSV_COLUMNS}")
        rows = []
        for line in reader:
            if len(line) != len(CSV_COLUMNS):
                raise SchemaError(f"{path}: row with {len(line)} fields, expected {len(CSV_COLUMNS)}")
            rows.append(
                {
                    "step": int(line[0]),
                    "layer": int(line[1]),
                    "expert": int(line[2]),
                    "size": int(line[3]),
                    "activation_count": int(line[4]),
                    "mean_gate": float(line[5]),
                    "activated_params": float(line[6]),
                    "cum_flops": float(line[7]),
                }
            )
    return rows


def read_telemetry_json(path: str) -> dict:
    with open(path) as f:
        payload = json.load(f)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise SchemaError(f"{path}: format_version {version!r} not supported (expected {FORMAT_VERSION})")
    return payload
