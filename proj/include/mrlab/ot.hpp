#pragma once

#include <cstddef>
#include <vector>

#include "mrlab/graph.hpp"
#include "mrlab/tensor.hpp"

namespace mrlab::ot {

// ---- marginal weights (Appendix-A style, gradient-stopped) --------------------------
//
// r_i = max(phat_i . mean(pref), 0), c_j = max(pref_j . mean(phat), 0); both
// rescaled to sum 1 so the transport polytope is non-empty. All-zero sides
// fall back to uniform.
struct Marginals {
    std::vector<double> r, c;
    bool uniform_fallback_r = false;
    bool uniform_fallback_c = false;
};
Marginals marginal_weights(const Tensor& phat, const Tensor& pref);

// ---- cost -----------------------------------------------------------------------------

// D_ij = 1 - cosine(phat_i, pref_j); zero-norm rows yield cost 1.
Tensor cost_matrix(const Tensor& phat, const Tensor& pref, std::size_t* zero_norm_count = nullptr);
nd::NodeId cost_matrix_tape(nd::Graph& g, nd::NodeId phat, nd::NodeId pref);

// ---- solvers ----------------------------------------------------------------------------

struct TransportPlan {
    Tensor gamma;
    double loss = 0.0; // <gamma, D>_F
};

// Entropically regularized transport: gamma = diag(v) Q diag(u), Q = exp(-lambda D),
// with `iters` full (v, u) update sweeps from u = 1.
TransportPlan sinkhorn(const Tensor& D, const std::vector<double>& r, const std::vector<double>& c,
                       double lambda, std::size_t iters);

// Same iteration unrolled on the tape; marginals enter as constants. Returns
// the loss node <gamma, D>.
nd::NodeId sinkhorn_loss_tape(nd::Graph& g, nd::NodeId D, const std::vector<double>& r,
                              const std::vector<double>& c, double lambda, std::size_t iters);

// Exact linear-program oracle (successive-shortest-path min-cost flow).
// Restricted to k' * k <= 16 instances.
TransportPlan exact_transport(const Tensor& D, const std::vector<double>& r,
                              const std::vector<double>& c);

double layer_alignment_loss(const Tensor& gamma, const Tensor& D);

// ---- multi-layer alignment loss -----------------------------------------------------------

struct AlignmentPair {
    nd::NodeId student; // on-tape unit-slot states (k' x C)
    Tensor teacher;     // reflection-side states (m x C), constants
};

struct AlignmentStats {
    std::size_t zero_norm_rows = 0;
    std::size_t uniform_fallbacks = 0;
};

// Mean of per-layer Sinkhorn losses over the given pairs (Eq. 8 layer set is
// the caller's choice). Errors on an empty set. Marginals are recomputed from
// the current values and enter as constants; `fixed_marginals` (one entry per
// pair) pins them instead, which finite-difference checks need.
nd::NodeId alignment_loss_tape(nd::Graph& g, const std::vector<AlignmentPair>& pairs,
                               double lambda, std::size_t iters, AlignmentStats* stats = nullptr,
                               const std::vector<Marginals>* fixed_marginals = nullptr);

} // namespace mrlab::ot
