"""Gated feed-forward experts with per-expert hidden widths.

An expert maps [tokens, h_input] -> [tokens, h_input] through a SiLU-gated
two-branch projection: down(silu(gate(x)) * up(x)).  Hidden widths differ
between experts; parameter counts scale as 3 * h_input * h_ffn.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, matmul, mul, silu, transpose


def _glorot_normal(rng: np.random.Generator, rows: int, cols: int, fan_in: int, fan_out: int) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(rows, cols))


@dataclass
class Expert:
    """One feed-forward expert.

    ``w_gate`` and ``w_up`` are [h_ffn, h_input]; ``w_down`` is
    [h_input, h_ffn].  ``tokens_processed`` counts forward evaluations so
    telemetry can verify no token is ever evaluated densely.
    """

    index: int
    h_input: int
    h_ffn: int
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    tokens_processed: int = field(default=0, compare=False)

    @property
    def weights(self) -> tuple[Tensor, Tensor, Tensor]:
        return (self.w_gate, self.w_up, self.w_down)


def new_expert(h_input: int, h_ffn: int, seed: int, index: int = 0) -> Expert:
    """Create an expert with i.i.d. normal weights, std sqrt(2/(h_in+h_ffn))."""
    if h_input < 1 or h_ffn < 1:
        raise ConfigurationError(f"expert dimensions must be positive, got ({h_input}, {h_ffn})")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return Expert(
        index=index,
        h_input=h_input,
        h_ffn=h_ffn,
        w_gate=Tensor(_glorot_normal(rng, h_ffn, h_input, h_input, h_ffn), requires_grad=True),
        w_up=Tensor(_glorot_normal(rng, h_ffn, h_input, h_input, h_ffn), requires_grad=True),
        w_down=Tensor(_glorot_normal(rng, h_input, h_ffn, h_input, h_ffn), requires_grad=True),
    )


def expert_forward(e: Expert, x: Tensor) -> Tensor:
    """down(silu(gate(x)) * up(x)) for a [tokens, h_input] batch."""
    if x.ndim != 2 or x.shape[1] != e.h_input:
        raise DimensionError(
            f"expert_forward: input shape {x.shape} does not match h_input={e.h_input}"
        )
    e.tokens_processed += x.shape[0]
    gated = silu(matmul(x, transpose(e.w_gate, (1, 0))))
    up = matmul(x, transpose(e.w_up, (1, 0)))
    return matmul(mul(gated, up), transpose(e.w_down, (1, 0)))


def param_count(e: Expert) -> int:
    """Exact learnable parameter count: 3 * h_input * h_ffn."""
    return 3 * e.h_input * e.h_ffn
