"""Token-to-expert routing: probabilities, Top-K and Top-P selection.

The router produces a per-token softmax distribution over experts.  The two
selection rules then pick an activated set per token and renormalize the
selected probabilities into gates.  Gradients flow through the selected
probabilities only: the activated set itself is a non-differentiable
decision, while the gate values stay differentiable through the softmax and
the renormalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, matmul, mul_const, pow_const, row_scale, softmax, sum_axis, transpose


@dataclass
class Router:
    """Linear routing map: weight is [n_experts, h_input]."""

    weight: Tensor

    @property
    def n_experts(self) -> int:
        return self.weight.shape[0]

    @property
    def h_input(self) -> int:
        return self.weight.shape[1]


def new_router(h_input: int, n_experts: int, seed: int) -> Router:
    if n_experts < 1:
        raise ConfigurationError(f"router needs at least one expert, got {n_experts}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    std = np.sqrt(2.0 / (h_input + n_experts))
    return Router(Tensor(rng.normal(0.0, std, size=(n_experts, h_input)), requires_grad=True))


@dataclass
class RoutingDecision:
    """Per-token routing outcome over a [tokens, n_experts] batch.

    ``probs`` is the full router distribution, ``mask`` the boolean
    activation matrix, and ``gates`` the dense renormalized weights (exactly
    zero outside the activated set).
    """

    probs: Tensor
    mask: np.ndarray
    gates: Tensor

    @property
    def n_tokens(self) -> int:
        return self.mask.shape[0]

    @property
    def n_experts(self) -> int:
        return self.mask.shape[1]

    @property
    def counts(self) -> np.ndarray:
        """Activated experts per token."""
        return self.mask.sum(axis=1)

    def activated_sets(self) -> list[np.ndarray]:
        """Ascending expert indices activated by each token."""
        return [np.flatnonzero(row) for row in self.mask]


def router_probs(r: Router, x: Tensor) -> Tensor:
    """Softmax over expert logits for each token row of ``x``."""
    if x.ndim != 2 or x.shape[1] != r.h_input:
        raise DimensionError(
            f"router_probs: input shape {x.shape} does not match h_input={r.h_input}"
        )
    return softmax(matmul(x, transpose(r.weight, (1, 0))), axis=1)


def _descending_order(probs: np.ndarray) -> np.ndarray:
    # Stable sort on the negated values: ties resolve to the lower expert index.
    return np.argsort(-probs, axis=1, kind="stable")


def _decision_from_mask(probs: Tensor, mask: np.ndarray) -> RoutingDecision:
    masked = mul_const(probs, mask.astype(np.float64))
    totals = sum_axis(masked, axis=1)
    gates = row_scale(masked, pow_const(totals, -1.0))
    return RoutingDecision(probs=probs, mask=mask, gates=gates)


def select_top_k(probs: Tensor, k: int) -> RoutingDecision:
    """Activate the k most probable experts per token, gates renormalized."""
    n = probs.shape[1]
    if not 1 <= k <= n:
        raise ConfigurationError(f"top-k requires 1 <= k <= {n}, got k={k}")
    order = _descending_order(probs.data)
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, order[:, :k], True, axis=1)
    return _decision_from_mask(probs, mask)


def select_top_p(probs: Tensor, p: float) -> RoutingDecision:
    """Activate the minimal descending-probability prefix reaching mass p.

    If the top probability already reaches ``p`` a single expert is
    activated.  If rounding keeps the cumulative sum below ``p`` for every
    prefix (possible when p == 1), all experts are activated.
    """
    if not 0.0 < p <= 1.0:
        raise ConfigurationError(f"top-p threshold must lie in (0, 1], got {p}")
    n = probs.shape[1]
    order = _descending_order(probs.data)
    sorted_probs = np.take_along_axis(probs.data, order, axis=1)
    reached = np.cumsum(sorted_probs, axis=1) >= p
    # argmax finds the first satisfying prefix; rows with none activate all.
    t = np.where(reached.any(axis=1), reached.argmax(axis=1) + 1, n)
    mask = np.zeros(probs.shape, dtype=bool)
    prefix = np.arange(n)[None, :] < t[:, None]
    np.put_along_axis(mask, order, prefix, axis=1)
    return _decision_from_mask(probs, mask)
