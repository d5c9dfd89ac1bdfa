#pragma once

#include <cstdint>
#include <vector>

#include "mrlab/graph.hpp"
#include "mrlab/tensor.hpp"

namespace mrlab::sampling {

struct GumbelConfig {
    bool enabled = true;
    std::uint64_t seed = 0;
    double temperature = 1.0; // re-softmax temperature, tau > 0
};

// Standard Gumbel draws, deterministic per seed.
Tensor gumbel_noise(std::uint64_t seed, std::size_t K);

// s_hat = softmax((log(s) + eps) / tau). Zero entries of s are clamped to
// 1e-30 before the log; clamp_count (when given) reports how many fired.
nd::NodeId perturbed_scores(nd::Graph& g, nd::NodeId s, const Tensor& eps,
                            double temperature = 1.0, std::size_t* clamp_count = nullptr);
Tensor perturbed_scores_plain(const Tensor& s, const Tensor& eps, double temperature = 1.0,
                              std::size_t* clamp_count = nullptr);

// Forward-hard/backward-soft indicator of the top-k entries.
nd::NodeId straight_through_topk(nd::Graph& g, nd::NodeId s_hat, std::size_t k);

// Rows of P at the k-hot positions of I, each multiplied by its indicator
// entry so gradients reach the scoring path; ascending index order.
struct GatedUnits {
    nd::NodeId rows; // k x C
    std::vector<std::size_t> indices;
};
GatedUnits gate_units(nd::Graph& g, nd::NodeId P, nd::NodeId I, std::size_t k);

} // namespace mrlab::sampling
