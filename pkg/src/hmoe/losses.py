"""Auxiliary routing objectives: load balance, parameter penalty, entropy.

All three are computed from batch assignment statistics.  The realized
token fractions are indicator averages and are treated as constants; the
gradient flows through the mean gating probabilities only.

The entropy term needs care with signs.  Minimizing the mean per-token
entropy sharpens the router so prefix-threshold routing activates fewer
experts; that is the default (`variant="sharpen"`).  The alternative
`variant="spread"` negates it, which when minimized flattens the router
instead — kept selectable for ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError
from .tensor import Tensor, entropy_mean, mul_const, total_sum

ENTROPY_VARIANTS = ("sharpen", "spread")
OBJECTIVE_MODES = ("top_k", "top_p", "homogeneous")


@dataclass
class AssignmentStats:
    """Per-expert batch statistics behind the auxiliary losses.

    ``token_fraction[i]`` is the fraction of tokens that activated expert i
    (a constant).  ``mean_prob`` is the differentiable per-expert mean of the
    router probabilities.  ``size_weighted[i]`` is token_fraction[i] scaled
    by the expert's hidden width normalized to the mean width, so that the
    parameter penalty reduces exactly to load balancing when all widths are
    equal; it is None when no size profile was supplied.
    """

    token_fraction: np.ndarray
    mean_prob: Tensor
    size_weighted: np.ndarray | None = None

    @property
    def n_experts(self) -> int:
        return len(self.token_fraction)


@dataclass(frozen=True)
class AuxLossValues:
    """Detached (graph-free) snapshot of the auxiliary terms."""

    lb: float | None
    p_penalty: float | None
    entropy: float | None
    coeff_lb: float
    coeff_pp: float
    coeff_ent: float
    combined: float | None


@dataclass
class AuxLossReport:
    """Scalar auxiliary terms with their coefficients and the combined loss."""

    lb: Tensor | None = None
    p_penalty: Tensor | None = None
    entropy: Tensor | None = None
    coeff_lb: float = 0.0
    coeff_pp: float = 0.0
    coeff_ent: float = 0.0
    combined: Tensor | None = None

    def detach(self) -> AuxLossValues:
        def val(t: Tensor | None) -> float | None:
            return None if t is None else t.item()

        return AuxLossValues(
            lb=val(self.lb),
            p_penalty=val(self.p_penalty),
            entropy=val(self.entropy),
            coeff_lb=self.coeff_lb,
            coeff_pp=self.coeff_pp,
            coeff_ent=self.coeff_ent,
            combined=val(self.combined),
        )


def load_balance_loss(stats: AssignmentStats, n_experts: int) -> Tensor:
    """n * sum_i token_fraction[i] * mean_prob[i]."""
    if stats.n_experts != n_experts:
        raise ContractError(
            f"load_balance_loss: stats cover {stats.n_experts} experts, expected {n_experts}"
        )
    return mul_const(total_sum(mul_const(stats.mean_prob, stats.token_fraction)), float(n_experts))


def param_penalty_loss(stats: AssignmentStats, n_experts: int) -> Tensor:
    """n * sum_i size_weighted[i] * mean_prob[i].

    Penalizes probability mass on frequently activated large experts; equals
    load_balance_loss exactly for an all-equal size profile.
    """
    if stats.n_experts != n_experts:
        raise ContractError(
            f"param_penalty_loss: stats cover {stats.n_experts} experts, expected {n_experts}"
        )
    if stats.size_weighted is None:
        raise ContractError("param_penalty_loss: stats carry no expert size profile")
    return mul_const(total_sum(mul_const(stats.mean_prob, stats.size_weighted)), float(n_experts))


def entropy_loss(probs: Tensor, variant: str = "sharpen") -> Tensor:
    """Mean per-token router entropy (negated for variant='spread')."""
    if variant not in ENTROPY_VARIANTS:
        raise ConfigurationError(f"unknown entropy variant {variant!r}; expected {ENTROPY_VARIANTS}")
    row_sums = probs.data.sum(axis=-1)
    off = float(np.abs(row_sums - 1.0).max()) if row_sums.size else 0.0
    if off > 1e-6:
        raise ContractError(f"entropy_loss: rows deviate from a distribution by {off:.3e}")
    h = entropy_mean(probs)
    return h if variant == "sharpen" else mul_const(h, -1.0)


def total_objective(lm_loss: Tensor, report: AuxLossReport, routing_mode: str) -> Tensor:
    """Combine the language-model loss with the mode's auxiliary terms.

    top_k:       lm + coeff_pp * p_penalty
    top_p:       lm + coeff_pp * p_penalty + coeff_ent * entropy
    homogeneous: lm + coeff_lb * lb        (conventional-MoE baseline)

    The combined tensor is also stored on the report.
    """
    if routing_mode not in OBJECTIVE_MODES:
        raise ConfigurationError(
            f"unknown objective mode {routing_mode!r}; expected one of {OBJECTIVE_MODES}"
        )
    combined = lm_loss
    if routing_mode == "homogeneous":
        if report.coeff_lb != 0.0:
            if report.lb is None:
                raise ContractError("total_objective: homogeneous mode needs a load-balance term")
            combined = combined + mul_const(report.lb, report.coeff_lb)
    else:
        if report.coeff_pp != 0.0:
            if report.p_penalty is None:
                raise ContractError("total_objective: missing parameter-penalty term")
            combined = combined + mul_const(report.p_penalty, report.coeff_pp)
        if routing_mode == "top_p" and report.coeff_ent != 0.0:
            if report.entropy is None:
                raise ContractError("total_objective: missing entropy term")
            combined = combined + mul_const(report.entropy, report.coeff_ent)
    report.combined = combined
    return combined
