"""Heterogeneous expert layers: size allocation, dispatch and combine.

A layer owns a router and a list of experts whose hidden widths come from a
heterogeneity profile.  Dispatch groups tokens by expert (gather, compute,
scatter); experts never see tokens that did not activate them.  The combine
step accumulates expert contributions in ascending expert index, which makes
the result bit-identical to a per-token summation in that same order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError
from .expert import Expert, expert_forward, new_expert
from .losses import AssignmentStats
from .rng import derive_seed
from .routing import (
    Router,
    RoutingDecision,
    new_router,
    router_probs,
    select_top_k,
    select_top_p,
)
from .tensor import Tensor, add, column, index_rows, mul_const, row_scale, scatter_rows, sum_axis

STRATEGIES = ("geometric", "arithmetic", "hybrid", "homogeneous")


@dataclass
class HeterogeneityProfile:
    """Resolved per-expert hidden widths under a total budget."""

    strategy: str
    relative_sizes: list[int]
    h_ffn: list[int]
    budget: int

    @property
    def n_experts(self) -> int:
        return len(self.h_ffn)

    @property
    def normalized_sizes(self) -> np.ndarray:
        """Hidden widths divided by their mean (the penalty-loss weighting)."""
        sizes = np.asarray(self.h_ffn, dtype=np.float64)
        return sizes / sizes.mean()


def relative_sizes_for(strategy: str, n_experts: int) -> list[int]:
    """Built-in relative size ladders, ascending by expert index."""
    if strategy == "geometric":
        return [2**i for i in range(n_experts)]
    if strategy == "arithmetic":
        return [9 + 2 * i for i in range(n_experts)]
    if strategy == "hybrid":
        sizes = [1] * ((n_experts + 1) // 2)
        power = 2
        while len(sizes) < n_experts:
            sizes.extend([power, power])
            power *= 2
        return sizes[:n_experts]
    if strategy == "homogeneous":
        return [1] * n_experts
    raise ConfigurationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def allocate_sizes(
    strategy: str,
    n_experts: int,
    budget: int,
    relative_sizes: list[int] | None = None,
) -> HeterogeneityProfile:
    """Resolve hidden widths so they sum exactly to ``budget``.

    Widths are the floors of the exact proportional shares; the remainder
    (< n_experts units) goes to the largest expert.  Flooring rather than
    rounding keeps the residual non-negative, which preserves the
    non-decreasing ordering for near-equal profiles.
    """
    if n_experts < 1:
        raise ConfigurationError(f"need at least one expert, got {n_experts}")
    if budget < n_experts:
        raise ConfigurationError(
            f"budget {budget} cannot give each of {n_experts} experts a width of at least 1"
        )
    sizes = list(relative_sizes) if relative_sizes is not None else relative_sizes_for(strategy, n_experts)
    if len(sizes) != n_experts:
        raise ConfigurationError(f"{len(sizes)} relative sizes supplied for {n_experts} experts")
    if any(s < 1 for s in sizes):
        raise ConfigurationError(f"relative sizes must be positive integers, got {sizes}")
    if any(a > b for a, b in zip(sizes, sizes[1:])):
        raise ConfigurationError(f"relative sizes must be non-decreasing, got {sizes}")

    total = sum(sizes)
    h_ffn = [budget * s // total for s in sizes]
    h_ffn[-1] += budget - sum(h_ffn)
    if any(h < 1 for h in h_ffn):
        raise ConfigurationError(
            f"budget {budget} is too small for relative sizes {sizes}: resolved widths {h_ffn}"
        )
    return HeterogeneityProfile(strategy=strategy, relative_sizes=sizes, h_ffn=h_ffn, budget=budget)


@dataclass
class HMoELayer:
    router: Router
    experts: list[Expert]
    profile: HeterogeneityProfile

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def parameters(self) -> list[Tensor]:
        out = [self.router.weight]
        for e in self.experts:
            out.extend(e.weights)
        return out


def new_hmoe_layer(h_input: int, profile: HeterogeneityProfile, seed: int) -> HMoELayer:
    router = new_router(h_input, profile.n_experts, derive_seed(seed, "router"))
    experts = [
        new_expert(h_input, h, derive_seed(seed, f"expert{i}"), index=i)
        for i, h in enumerate(profile.h_ffn)
    ]
    return HMoELayer(router=router, experts=experts, profile=profile)


def moe_forward(
    layer: HMoELayer,
    x: Tensor,
    routing_mode: str,
    k_or_p: float,
) -> tuple[Tensor, RoutingDecision]:
    """Route a [tokens, h_input] batch and combine activated expert outputs."""
    probs = router_probs(layer.router, x)
    if routing_mode == "top_k":
        decision = select_top_k(probs, int(k_or_p))
    elif routing_mode == "top_p":
        decision = select_top_p(probs, float(k_or_p))
    else:
        raise ConfigurationError(f"unknown routing mode {routing_mode!r}")
    if not decision.mask.any(axis=1).all():
        raise AssertionError("routing produced a token with no activated expert")

    n_tokens = x.shape[0]
    out: Tensor | None = None
    for e, expert in enumerate(layer.experts):
        idx = np.flatnonzero(decision.mask[:, e])
        if idx.size == 0:
            continue
        expert_out = expert_forward(expert, index_rows(x, idx, unique=True))
        gates = index_rows(column(decision.gates, e), idx, unique=True)
        contribution = scatter_rows(row_scale(expert_out, gates), idx, n_tokens)
        out = contribution if out is None else add(out, contribution)
    assert out is not None
    return out, decision


def layer_stats(decision: RoutingDecision, profile: HeterogeneityProfile | None = None) -> AssignmentStats:
    """Batch statistics feeding the auxiliary losses.

    Token fractions are indicator means (constant); the mean probability is
    differentiable.  The size-weighted fractions are present only when a
    profile is supplied.
    """
    n_tokens = decision.n_tokens
    if n_tokens == 0:
        raise ContractError("layer_stats: empty batch")
    token_fraction = decision.mask.mean(axis=0)
    mean_prob = mul_const(sum_axis(decision.probs, axis=0), 1.0 / n_tokens)
    size_weighted = None
    if profile is not None:
        if profile.n_experts != decision.n_experts:
            raise ContractError(
                f"layer_stats: profile has {profile.n_experts} experts, decision {decision.n_experts}"
            )
        size_weighted = token_fraction * profile.normalized_sizes
    return AssignmentStats(
        token_fraction=token_fraction,
        mean_prob=mean_prob,
        size_weighted=size_weighted,
    )
