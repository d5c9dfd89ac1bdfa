"""Meta-reflection codebook lab: python surface over the C++ core."""

from _mrlab import (
    Engine,
    cost_matrix,
    exact_transport,
    gumbel_noise,
    marginal_weights,
    perturbed_scores,
    sinkhorn,
    topk_indices,
)

__all__ = [
    "Engine",
    "cost_matrix",
    "exact_transport",
    "gumbel_noise",
    "marginal_weights",
    "perturbed_scores",
    "sinkhorn",
    "topk_indices",
]
