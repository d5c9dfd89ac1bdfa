#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mrlab/tensor.hpp"

namespace mrlab::nd {

using NodeId = std::size_t;

// Define-by-run reverse-mode tape. A graph is rebuilt per forward pass;
// primitives evaluate eagerly, record their inputs, and register a backward
// closure. Node inputs always precede the node, so insertion order is a
// topological order and the backward sweep is a single reverse scan.
//
// Primitive set: matmul, add, multiply, transpose, concat, slice/gather,
// mean over an axis, softmax over an axis, log, exp, power, layer-norm,
// GELU, embedding lookup, cross-entropy-with-logits, pairwise cosine,
// stop-gradient, straight-through k-hot. Everything else is composed.
class Graph {
public:
    struct Node {
        Tensor value;
        Tensor grad; // empty until touched by backward
        bool requires_grad = false;
        const char* op = "";
        std::vector<NodeId> inputs;
        std::function<void(Graph&, NodeId)> backward;
    };

    // ---- leaves ------------------------------------------------------------
    NodeId param(Tensor value);    // trainable leaf
    NodeId constant(Tensor value); // no gradient flows in

    // ---- access ------------------------------------------------------------
    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
    std::size_t num_nodes() const { return nodes_.size(); }

    // Gradient of the last backward() target w.r.t. this node. Exact zeros
    // when the node is on no path to the target.
    Tensor grad(NodeId id) const;

    void backward(NodeId scalar_node);
    std::vector<Tensor> gradients(NodeId scalar_node, const std::vector<NodeId>& wrt);

    // ---- primitives ----------------------------------------------------------
    NodeId matmul(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);      // broadcasts 1x1, 1xC rows, Rx1 cols
    NodeId multiply(NodeId a, NodeId b); // same broadcast rules
    NodeId transpose(NodeId a);
    NodeId concat_rows(const std::vector<NodeId>& xs);
    NodeId slice_rows(NodeId a, std::size_t start, std::size_t len);
    NodeId slice_cols(NodeId a, std::size_t start, std::size_t len);
    NodeId gather_rows(NodeId a, std::vector<std::size_t> idx);
    NodeId mean_axis(NodeId a, int axis); // 0: over rows -> 1xC, 1: over cols -> Rx1
    NodeId softmax_rows(NodeId a);
    NodeId log(NodeId a);
    NodeId exp(NodeId a);
    NodeId pow(NodeId a, double p);
    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5);
    NodeId gelu(NodeId a);
    NodeId embedding(NodeId table, const std::vector<int>& ids);
    NodeId cross_entropy_logits(NodeId logits, const std::vector<int>& targets,
                                const std::vector<double>& weights);
    NodeId pairwise_cosine(NodeId a, NodeId b);
    NodeId stop_gradient(NodeId a);

    // Forward value is the exact k-hot indicator of the k largest entries of
    // a 1xK input (ties to the lower index); backward passes gradients through
    // unchanged, so the jacobian equals the input's jacobian entrywise.
    NodeId straight_through_khot(NodeId soft, std::size_t k);

    // ---- composed helpers (no new derivatives) -------------------------------
    NodeId scale(NodeId a, double c);
    NodeId add_scalar(NodeId a, double c);
    NodeId neg(NodeId a) { return scale(a, -1.0); }
    NodeId sub(NodeId a, NodeId b) { return add(a, neg(b)); }
    NodeId divide(NodeId a, NodeId b) { return multiply(a, pow(b, -1.0)); }
    NodeId sum_axis(NodeId a, int axis);
    NodeId sum_all(NodeId a);
    NodeId mean_all(NodeId a);
    NodeId frobenius_inner(NodeId a, NodeId b) { return sum_all(multiply(a, b)); }

private:
    enum class Broadcast { same, scalar_b, row_b, col_b };

    NodeId push(Tensor value, bool requires_grad, const char* op, std::vector<NodeId> inputs,
                std::function<void(Graph&, NodeId)> backward);
    void accumulate(NodeId id, const Tensor& contribution);
    void ensure_grad(NodeId id);
    void check_finite(NodeId id) const;
    static Broadcast broadcast_mode(const Tensor& a, const Tensor& b, const char* op);

    std::vector<Node> nodes_;
};

// k-hot indicator over a flat score vector; ties broken toward lower index.
std::vector<std::size_t> topk_indices(const std::vector<double>& scores, std::size_t k);

// ---- finite-difference gradient check ----------------------------------------
//
// Rebuilds the graph via `build` at perturbed parameter points and compares
// central differences (step 1e-5 by default) against the reverse-mode
// gradients. `max_probes` of 0 checks every entry; otherwise a seeded random
// subset per parameter.
struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double ad_at_worst = 0.0;
    double fd_at_worst = 0.0;
    std::size_t probes = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    bool ok(double tol) const { return max_rel_err <= tol; }
    std::vector<std::string> failing(double tol) const;
    std::string summary() const;
};

using LossBuilder = std::function<NodeId(Graph&, const std::vector<NodeId>&)>;

GradCheckReport check_gradients(const LossBuilder& build, const std::vector<Tensor>& params,
                                const std::vector<std::string>& names, double fd_step = 1e-5,
                                std::size_t max_probes = 0, std::uint64_t probe_seed = 7);

} // namespace mrlab::nd
