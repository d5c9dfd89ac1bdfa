#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mrlab/checkpoint.hpp"
#include "mrlab/graph.hpp"
#include "mrlab/tensor.hpp"

namespace mrlab::codebook {

struct CodebookConfig {
    std::size_t K = 512; // units in the codebook
    std::size_t k = 16;  // units selected per query
    std::size_t C = 128; // feature width (matches the backbone dim)
    std::size_t L = 2;   // insertion layer
    double init_std = 0.02;
    double row_norm_ceiling = 1e3;

    std::string to_json() const;
    static CodebookConfig from_json(const std::string& json);
};

// Two-layer perceptron with an identity skip: out = x + gelu(x w1 + b1) w2 + b2.
// With w2 and b2 at zero the map is the exact identity.
struct Mlp2 {
    Tensor w1, b1, w2, b2;
};

struct Codebook {
    CodebookConfig cfg;
    Tensor P; // K x C reflective units
    Mlp2 g;   // query transform
    Mlp2 f;   // unit transform, applied row-wise to P

    static Codebook init(const CodebookConfig& cfg, std::uint64_t seed);
    // Test mode: g and f are the exact identity.
    static Codebook with_identity_maps(const CodebookConfig& cfg, Tensor units);

    std::vector<Tensor*> param_list();
    std::vector<const Tensor*> param_list() const;
    std::vector<std::string> param_names() const;

    // Throws NumericError if any row of P exceeds the configured norm ceiling.
    void check_row_norms() const;

    Checkpoint to_checkpoint() const;
    static Codebook from_checkpoint(const Checkpoint& ckpt);
};

struct SelectionRecord {
    std::string query_id;
    std::vector<std::size_t> indices; // strictly ascending, length k
    std::vector<double> scores;       // the full score vector s
};

// ---- fast path ---------------------------------------------------------------------

Tensor apply_mlp(const Mlp2& m, const Tensor& rows);

// Mean over the position axis; errors on empty input.
Tensor pool_query(const Tensor& h_query);

// s = softmax(g(h) f(P)^T / sqrt(K)); recomputes f(P) (training-time path).
Tensor score(const Codebook& cb, const Tensor& h);
// Inference path with f(P) precomputed once.
Tensor score_cached(const Codebook& cb, const Tensor& h, const Tensor& f_of_p);

struct Selection {
    std::vector<std::size_t> indices; // ascending
    Tensor rows;                      // gathered rows of P in index order
};
Selection select_topk(const Tensor& s, std::size_t k, const Tensor& P);

// ---- tape path ---------------------------------------------------------------------

struct TapeCodebook {
    nd::NodeId P;
    nd::NodeId g_w1, g_b1, g_w2, g_b2;
    nd::NodeId f_w1, f_b1, f_w2, f_b2;
    std::vector<nd::NodeId> all; // declared order, matches param_list()
    const Codebook* source = nullptr;
};
TapeCodebook bind(nd::Graph& g, const Codebook& cb, bool trainable);

nd::NodeId pool_query_tape(nd::Graph& g, nd::NodeId h_rows);
nd::NodeId apply_mlp_tape(nd::Graph& g, nd::NodeId w1, nd::NodeId b1, nd::NodeId w2,
                          nd::NodeId b2, nd::NodeId rows);
nd::NodeId score_tape(nd::Graph& g, const TapeCodebook& tcb, nd::NodeId h);

} // namespace mrlab::codebook
