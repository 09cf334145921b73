"""Training loop: AdamW, per-step objective assembly, evaluation, resume.

Each step samples its batch from a generator seeded by (config seed, step),
so a resumed run consumes exactly the byte windows the uninterrupted run
would have.  Auxiliary losses are computed per expert layer and averaged
over layers before weighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .checkpoint import Checkpoint
from .data import batch_rng, eval_windows, load_corpus, sample_batch
from .errors import ConfigurationError, ContractError, TrainingDivergedError
from .layer import layer_stats
from .losses import (
    AuxLossReport,
    AuxLossValues,
    entropy_loss,
    load_balance_loss,
    param_penalty_loss,
    total_objective,
)
from .model import Model, ModelConfig, build_model
from .telemetry import (
    TRAIN_FLOPS_MULTIPLIER,
    TelemetryRecord,
    build_record,
    flops_per_token,
)
from .tensor import Tensor, backward, cross_entropy_with_nll, mul_const, no_grad, token_nll

SCHEDULES = ("constant", "cosine")

# Runaway runs can stay finite indefinitely (normalization keeps activations
# bounded while the loss explodes), so divergence also trips on a ceiling far
# above any legitimate byte-level loss (ln 256 plus small auxiliary terms).
DIVERGENCE_LOSS_CEILING = 1e4


@dataclass
class TrainConfig:
    batch_size: int = 8
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-5
    adam_eps: float = 1e-8
    log_interval: int = 50

    def __post_init__(self) -> None:
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.batch_size < 1 or self.peak_lr <= 0 or self.warmup_steps < 0:
            raise ConfigurationError("batch_size >= 1, peak_lr > 0 and warmup_steps >= 0 required")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def lr_at(step: int, total_steps: int, tc: TrainConfig) -> float:
    """Linear warmup to peak_lr, then constant (or cosine decay to zero)."""
    if tc.warmup_steps > 0 and step <= tc.warmup_steps:
        return tc.peak_lr * step / tc.warmup_steps
    if tc.schedule == "cosine" and total_steps > tc.warmup_steps:
        progress = (step - tc.warmup_steps) / (total_steps - tc.warmup_steps)
        return tc.peak_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))
    return tc.peak_lr


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], tc: TrainConfig):
        self.params = params
        self.tc = tc
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        tc = self.tc
        self.step_count += 1
        bc1 = 1.0 - tc.beta1**self.step_count
        bc2 = 1.0 - tc.beta2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= tc.beta1
            m += (1.0 - tc.beta1) * g
            v *= tc.beta2
            v += (1.0 - tc.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + tc.adam_eps)
            p.data -= lr * (update + tc.weight_decay * p.data)


@dataclass
class StepReport:
    step: int
    lr: float
    lm_loss: float
    aux: AuxLossValues
    record: TelemetryRecord


def train_step(
    model: Model,
    inputs: np.ndarray,
    targets: np.ndarray,
    optimizer: AdamW,
    lr: float,
    step: int,
    cum_flops: float,
) -> tuple[StepReport, float]:
    """One forward/backward/update; returns the report and new FLOPs total."""
    cfg = model.cfg
    model.zero_grad()
    logits, decisions = model.forward(inputs)
    targets_flat = np.asarray(targets, dtype=np.int64).reshape(-1)
    lm, nll = cross_entropy_with_nll(logits, targets_flat)

    n_layers = len(decisions)
    stats = [layer_stats(d, model.profile) for d in decisions]
    scale = 1.0 / n_layers
    lb = mul_const(_sum_terms([load_balance_loss(s, cfg.n_experts) for s in stats]), scale)
    pp = mul_const(_sum_terms([param_penalty_loss(s, cfg.n_experts) for s in stats]), scale)
    ent = mul_const(
        _sum_terms([entropy_loss(d.probs, cfg.entropy_variant) for d in decisions]), scale
    )
    report = AuxLossReport(
        lb=lb,
        p_penalty=pp,
        entropy=ent,
        coeff_lb=cfg.coeff_lb,
        coeff_pp=cfg.coeff_pp,
        coeff_ent=cfg.coeff_ent,
    )
    combined = total_objective(lm, report, cfg.objective_mode)
    combined_value = combined.item()
    if not np.isfinite(combined_value) or combined_value > DIVERGENCE_LOSS_CEILING:
        raise TrainingDivergedError(step, f"loss {combined_value:.4g} at step {step}")

    backward(combined)
    optimizer.step(lr)

    tokens = targets_flat.size
    cum_flops += TRAIN_FLOPS_MULTIPLIER * flops_per_token(decisions, model.profile, cfg)[1] * tokens
    record = build_record(
        step, decisions, model.profile, cfg, np.asarray(inputs).reshape(-1), nll, cum_flops
    )
    return StepReport(step=step, lr=lr, lm_loss=lm.item(), aux=report.detach(), record=record), cum_flops


def _sum_terms(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


@dataclass
class TrainResult:
    model: Model
    optimizer: AdamW
    steps_run: int
    cum_flops: float
    loss_curve: list[dict] = field(default_factory=list)
    records: list[TelemetryRecord] = field(default_factory=list)

    def checkpoint(self) -> Checkpoint:
        tensors = {name: p.data.copy() for name, p in self.model.parameters().items()}
        for name in self.model.parameters():
            tensors[f"opt.m.{name}"] = self.optimizer.m[name].copy()
            tensors[f"opt.v.{name}"] = self.optimizer.v[name].copy()
        return Checkpoint(
            config=self.model.cfg,
            tensors=tensors,
            step=self.steps_run,
            cum_flops=self.cum_flops,
        )


def train_loop(
    cfg: ModelConfig,
    corpus,
    steps: int,
    tc: TrainConfig | None = None,
    sink=None,
    resume: Checkpoint | None = None,
    flops_budget: float | None = None,
    progress=None,
) -> TrainResult:
    """Train for ``steps`` optimizer steps (or until ``flops_budget``).

    ``corpus`` is a path or a pre-tokenized id array.  ``sink``, if given,
    receives one TelemetryRecord per log interval (and the final step).
    Restarting from ``resume`` reproduces the uninterrupted run exactly.
    """
    tc = tc or TrainConfig()
    ids = corpus if isinstance(corpus, np.ndarray) else load_corpus(corpus)

    if resume is not None:
        model = resume.rebuild_model()
        optimizer = AdamW(model.parameters(), tc)
        optimizer.step_count = resume.step
        for name in model.parameters():
            optimizer.m[name] = resume.tensors[f"opt.m.{name}"].copy()
            optimizer.v[name] = resume.tensors[f"opt.v.{name}"].copy()
        start_step = resume.step
        cum_flops = resume.cum_flops
    else:
        model = build_model(cfg)
        optimizer = AdamW(model.parameters(), tc)
        start_step = 0
        cum_flops = 0.0

    result = TrainResult(model=model, optimizer=optimizer, steps_run=start_step, cum_flops=cum_flops)
    for step in range(start_step + 1, steps + 1):
        inputs, targets = sample_batch(ids, tc.batch_size, cfg.context_length, batch_rng(cfg.seed, step))
        lr = lr_at(step, steps, tc)
        step_report, cum_flops = train_step(model, inputs, targets, optimizer, lr, step, cum_flops)
        result.steps_run = step
        result.cum_flops = cum_flops
        result.loss_curve.append(
            {
                "step": step,
                "lm_loss": step_report.lm_loss,
                "combined_loss": step_report.aux.combined,
                "mean_activated_params_per_token": step_report.record.mean_activated_params,
                "cum_flops": cum_flops,
            }
        )
        if step % tc.log_interval == 0 or step == steps:
            result.records.append(step_report.record)
            if sink is not None:
                sink.add(step_report.record)
        if progress is not None:
            progress(step_report)
        if flops_budget is not None and cum_flops >= flops_budget:
            if not result.records or result.records[-1].step != step:
                result.records.append(step_report.record)
                if sink is not None:
                    sink.add(step_report.record)
            break
    return result


def evaluate_perplexity(model: Model, corpus) -> float:
    """exp(mean token NLL) over non-overlapping context windows."""
    ids = corpus if isinstance(corpus, np.ndarray) else load_corpus(corpus)
    context = model.cfg.context_length

    by_length: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}
    for inp, tgt in eval_windows(ids, context):
        by_length.setdefault(len(inp), []).append((inp, tgt))
    if not by_length:
        raise ContractError("corpus yields no evaluation windows")

    total_nll = 0.0
    total_tokens = 0
    with no_grad():
        for length, windows in sorted(by_length.items()):
            for start in range(0, len(windows), 32):
                chunk = windows[start : start + 32]
                inputs = np.stack([w[0] for w in chunk])
                targets = np.concatenate([w[1] for w in chunk])
                logits, _ = model.forward(inputs)
                total_nll += float(token_nll(logits.data, targets).sum())
                total_tokens += targets.size
    return float(np.exp(total_nll / total_tokens))
