#include "mrlab/sampling.hpp"

#include <cmath>

#include "mrlab/error.hpp"
#include "mrlab/rng.hpp"

namespace mrlab::sampling {

namespace {
constexpr double kClampFloor = 1e-30;
}

Tensor gumbel_noise(std::uint64_t seed, std::size_t K) {
    if (K < 1) throw ShapeError("gumbel_noise: K must be positive");
    Rng rng(seed ^ 0x67756d62ULL);
    Tensor eps(1, K);
    for (std::size_t i = 0; i < K; ++i) eps[i] = rng.gumbel();
    return eps;
}

nd::NodeId perturbed_scores(nd::Graph& g, nd::NodeId s, const Tensor& eps, double temperature,
                            std::size_t* clamp_count) {
    const Tensor& vs = g.value(s);
    if (temperature <= 0.0) throw ConfigError("perturbed_scores: temperature must be positive");
    if (vs.rows() != 1 || !eps.same_shape(vs)) {
        throw ShapeError("perturbed_scores: scores " + vs.shape_str() + " vs noise " +
                         eps.shape_str());
    }
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < vs.size(); ++i) {
        if (vs[i] == 0.0) ++zeros;
    }
    nd::NodeId safe = s;
    if (zeros > 0) {
        // Clamped entries keep their (zero) value path out of the log; the
        // gradient through them is dropped, which is the only defensible
        // subgradient at the clamp.
        Tensor mask(1, vs.cols()), floor_fill(1, vs.cols());
        for (std::size_t i = 0; i < vs.size(); ++i) {
            mask[i] = vs[i] == 0.0 ? 0.0 : 1.0;
            floor_fill[i] = vs[i] == 0.0 ? kClampFloor : 0.0;
        }
        safe = g.add(g.multiply(s, g.constant(mask)), g.constant(floor_fill));
    }
    if (clamp_count) *clamp_count += zeros;
    nd::NodeId logits = g.add(g.log(safe), g.constant(eps));
    if (temperature != 1.0) logits = g.scale(logits, 1.0 / temperature);
    return g.softmax_rows(logits);
}

Tensor perturbed_scores_plain(const Tensor& s, const Tensor& eps, double temperature,
                              std::size_t* clamp_count) {
    nd::Graph g;
    return g.value(perturbed_scores(g, g.constant(s), eps, temperature, clamp_count));
}

nd::NodeId straight_through_topk(nd::Graph& g, nd::NodeId s_hat, std::size_t k) {
    return g.straight_through_khot(s_hat, k);
}

GatedUnits gate_units(nd::Graph& g, nd::NodeId P, nd::NodeId I, std::size_t k) {
    const Tensor& vi = g.value(I);
    GatedUnits out;
    for (std::size_t i = 0; i < vi.size(); ++i) {
        if (vi[i] == 1.0) out.indices.push_back(i);
    }
    if (out.indices.size() != k) {
        throw ShapeError("gate_units: indicator has " + std::to_string(out.indices.size()) +
                         " ones, expected " + std::to_string(k));
    }
    const nd::NodeId rows = g.gather_rows(P, out.indices);
    const nd::NodeId gates = g.gather_rows(g.transpose(I), out.indices); // k x 1
    out.rows = g.multiply(rows, gates);
    return out;
}

} // namespace mrlab::sampling
