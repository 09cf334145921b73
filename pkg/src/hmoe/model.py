"""Decoder-only byte-level transformer with expert layers in place of FFNs.

Blocks are pre-norm: x + attn(norm(x)), then x + moe(norm(x)).  Positions
are learned embeddings; normalization is RMS with a learned gain; no biases
and no dropout anywhere, so training is fully deterministic.  Every weight
is seeded from (config seed, component name), which keeps shared components
bit-identical across model variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigurationError
from .layer import (
    STRATEGIES,
    HeterogeneityProfile,
    HMoELayer,
    allocate_sizes,
    moe_forward,
    new_hmoe_layer,
)
from .rng import derive_seed
from .routing import RoutingDecision
from .tensor import (
    Tensor,
    add,
    add_const,
    embedding,
    matmul,
    mul_const,
    reshape,
    rms_norm,
    softmax,
    transpose,
)

ROUTING_MODES = ("top_k", "top_p")
AUX_OBJECTIVES = ("param_penalty", "load_balance")


@dataclass
class ModelConfig:
    n_layers: int = 2
    h_input: int = 128
    n_heads: int = 4
    head_dim: int = 32
    vocab_size: int = 256
    n_experts: int = 8
    budget_per_layer: int = 1024
    routing_mode: str = "top_p"
    k: int = 2
    p: float = 0.6
    strategy: str = "arithmetic"
    relative_sizes: list[int] | None = None
    aux_objective: str = "param_penalty"
    entropy_variant: str = "sharpen"
    coeff_pp: float = 0.1
    coeff_ent: float = 0.03
    coeff_lb: float = 0.01
    seed: int = 12345
    context_length: int = 128

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.h_input != self.n_heads * self.head_dim:
            raise ConfigurationError(
                f"h_input={self.h_input} must equal n_heads*head_dim={self.n_heads * self.head_dim}"
            )
        if not 1 <= self.k <= self.n_experts:
            raise ConfigurationError(f"k={self.k} must lie in [1, {self.n_experts}]")
        if not 0.0 < self.p <= 1.0:
            raise ConfigurationError(f"p={self.p} must lie in (0, 1]")
        if self.n_layers < 1 or self.vocab_size < 2 or self.context_length < 2:
            raise ConfigurationError("n_layers >= 1, vocab_size >= 2 and context_length >= 2 required")
        if self.routing_mode not in ROUTING_MODES:
            raise ConfigurationError(f"routing_mode must be one of {ROUTING_MODES}, got {self.routing_mode!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.aux_objective not in AUX_OBJECTIVES:
            raise ConfigurationError(f"aux_objective must be one of {AUX_OBJECTIVES}, got {self.aux_objective!r}")
        if min(self.coeff_pp, self.coeff_ent, self.coeff_lb) < 0:
            raise ConfigurationError("loss coefficients must be non-negative")

    @property
    def routing_arg(self) -> float:
        return self.k if self.routing_mode == "top_k" else self.p

    @property
    def objective_mode(self) -> str:
        """Mode string for the combined objective (baseline runs use 'homogeneous')."""
        return "homogeneous" if self.aux_objective == "load_balance" else self.routing_mode

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Block:
    attn_norm_gain: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    moe_norm_gain: Tensor
    moe: HMoELayer


@dataclass
class Model:
    cfg: ModelConfig
    profile: HeterogeneityProfile
    wte: Tensor
    wpe: Tensor
    blocks: list[Block]
    final_norm_gain: Tensor
    lm_head: Tensor
    _mask_cache: dict[int, np.ndarray] = field(default_factory=dict, compare=False)
    _param_cache: dict[str, Tensor] | None = field(default=None, compare=False)

    def parameters(self) -> dict[str, Tensor]:
        """Named parameters in a fixed, checkpoint-stable order."""
        if self._param_cache is not None:
            return self._param_cache
        out: dict[str, Tensor] = {"wte": self.wte, "wpe": self.wpe}
        for i, b in enumerate(self.blocks):
            out[f"layer{i}.attn_norm.gain"] = b.attn_norm_gain
            out[f"layer{i}.attn.wq"] = b.wq
            out[f"layer{i}.attn.wk"] = b.wk
            out[f"layer{i}.attn.wv"] = b.wv
            out[f"layer{i}.attn.wo"] = b.wo
            out[f"layer{i}.moe_norm.gain"] = b.moe_norm_gain
            out[f"layer{i}.router"] = b.moe.router.weight
            for j, e in enumerate(b.moe.experts):
                out[f"layer{i}.expert{j}.w_gate"] = e.w_gate
                out[f"layer{i}.expert{j}.w_up"] = e.w_up
                out[f"layer{i}.expert{j}.w_down"] = e.w_down
        out["final_norm.gain"] = self.final_norm_gain
        out["lm_head"] = self.lm_head
        self._param_cache = out
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def reset_eval_counters(self) -> None:
        for b in self.blocks:
            for e in b.moe.experts:
                e.tokens_processed = 0

    def _causal_mask(self, t: int) -> np.ndarray:
        # Finite large negative keeps every op output finite; exp underflows
        # to exactly zero, so positions > t contribute exactly nothing.
        if t not in self._mask_cache:
            self._mask_cache[t] = np.where(np.tri(t, dtype=bool), 0.0, -1e30)
        return self._mask_cache[t]

    def forward(self, ids: np.ndarray) -> tuple[Tensor, list[RoutingDecision]]:
        """Map [batch, time] token ids to ([batch*time, vocab] logits, decisions)."""
        cfg = self.cfg
        ids = np.asarray(ids, dtype=np.int64)
        batch, time = ids.shape
        if time > cfg.context_length:
            raise ConfigurationError(f"sequence length {time} exceeds context {cfg.context_length}")
        pos = np.broadcast_to(np.arange(time), (batch, time))
        x = add(embedding(self.wte, ids), embedding(self.wpe, pos))

        decisions: list[RoutingDecision] = []
        mask = self._causal_mask(time)
        for block in self.blocks:
            x = add(x, self._attention(block, rms_norm(x, block.attn_norm_gain), batch, time, mask))
            pre = rms_norm(x, block.moe_norm_gain)
            moe_out, decision = moe_forward(
                block.moe, reshape(pre, (batch * time, cfg.h_input)), cfg.routing_mode, cfg.routing_arg
            )
            decisions.append(decision)
            x = add(x, reshape(moe_out, (batch, time, cfg.h_input)))

        final = rms_norm(x, self.final_norm_gain)
        logits = matmul(reshape(final, (batch * time, cfg.h_input)), self.lm_head)
        return logits, decisions

    def _attention(self, block: Block, x: Tensor, batch: int, time: int, mask: np.ndarray) -> Tensor:
        cfg = self.cfg
        nh, hd, h = cfg.n_heads, cfg.head_dim, cfg.h_input

        def heads(t: Tensor) -> Tensor:
            return transpose(reshape(t, (batch, time, nh, hd)), (0, 2, 1, 3))

        q = heads(matmul(x, block.wq))
        k = transpose(reshape(matmul(x, block.wk), (batch, time, nh, hd)), (0, 2, 3, 1))
        v = heads(matmul(x, block.wv))
        scores = add_const(mul_const(matmul(q, k), 1.0 / np.sqrt(hd)), mask)
        mixed = matmul(softmax(scores, axis=-1), v)
        merged = reshape(transpose(mixed, (0, 2, 1, 3)), (batch, time, h))
        return matmul(merged, block.wo)


def _normal(seed: int, rows: int, cols: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    std = np.sqrt(2.0 / (rows + cols))
    return rng.normal(0.0, std, size=(rows, cols))


def build_model(cfg: ModelConfig) -> Model:
    """Construct a model deterministically from the config seed."""
    cfg.validate()
    h, v = cfg.h_input, cfg.vocab_size
    profile = allocate_sizes(cfg.strategy, cfg.n_experts, cfg.budget_per_layer, cfg.relative_sizes)

    def w(name: str, rows: int, cols: int) -> Tensor:
        return Tensor(_normal(derive_seed(cfg.seed, name), rows, cols), requires_grad=True)

    def gain(size: int) -> Tensor:
        return Tensor(np.ones(size), requires_grad=True)

    blocks = []
    for i in range(cfg.n_layers):
        blocks.append(
            Block(
                attn_norm_gain=gain(h),
                wq=w(f"layer{i}.wq", h, h),
                wk=w(f"layer{i}.wk", h, h),
                wv=w(f"layer{i}.wv", h, h),
                wo=w(f"layer{i}.wo", h, h),
                moe_norm_gain=gain(h),
                moe=new_hmoe_layer(h, profile, derive_seed(cfg.seed, f"layer{i}.moe")),
            )
        )
    return Model(
        cfg=cfg,
        profile=profile,
        wte=w("wte", v, h),
        wpe=w("wpe", cfg.context_length, h),
        blocks=blocks,
        final_norm_gain=gain(h),
        lm_head=w("lm_head", h, v),
    )
