#include "mrlab/ot.hpp"

#include <algorithm>
#include <cmath>

#include "mrlab/error.hpp"

namespace mrlab::ot {

// ---- marginals ---------------------------------------------------------------------

Marginals marginal_weights(const Tensor& phat, const Tensor& pref) {
    if (phat.cols() != pref.cols() || phat.rows() == 0 || pref.rows() == 0) {
        throw ShapeError("marginal_weights: incompatible " + phat.shape_str() + " and " +
                         pref.shape_str());
    }
    const std::size_t kp = phat.rows(), kd = pref.rows(), C = phat.cols();
    std::vector<double> mean_ref(C, 0.0), mean_hat(C, 0.0);
    for (std::size_t j = 0; j < kd; ++j)
        for (std::size_t c = 0; c < C; ++c) mean_ref[c] += pref.at(j, c);
    for (double& v : mean_ref) v /= static_cast<double>(kd);
    for (std::size_t i = 0; i < kp; ++i)
        for (std::size_t c = 0; c < C; ++c) mean_hat[c] += phat.at(i, c);
    for (double& v : mean_hat) v /= static_cast<double>(kp);

    Marginals m;
    m.r.resize(kp);
    m.c.resize(kd);
    for (std::size_t i = 0; i < kp; ++i) {
        double dot = 0.0;
        for (std::size_t c = 0; c < C; ++c) dot += phat.at(i, c) * mean_ref[c];
        m.r[i] = std::max(dot, 0.0);
    }
    for (std::size_t j = 0; j < kd; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < C; ++c) dot += pref.at(j, c) * mean_hat[c];
        m.c[j] = std::max(dot, 0.0);
    }

    const auto normalize = [](std::vector<double>& w, bool& fallback) {
        double sum = 0.0;
        for (double v : w) sum += v;
        if (sum <= 0.0) {
            fallback = true;
            std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
        } else {
            for (double& v : w) v /= sum;
        }
    };
    normalize(m.r, m.uniform_fallback_r);
    normalize(m.c, m.uniform_fallback_c);
    return m;
}

// ---- cost -------------------------------------------------------------------------------

Tensor cost_matrix(const Tensor& phat, const Tensor& pref, std::size_t* zero_norm_count) {
    if (phat.cols() != pref.cols() || phat.rows() == 0 || pref.rows() == 0) {
        throw ShapeError("cost_matrix: incompatible " + phat.shape_str() + " and " +
                         pref.shape_str());
    }
    const std::size_t kp = phat.rows(), kd = pref.rows(), C = phat.cols();
    std::vector<double> na(kp), nb(kd);
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < kp; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += phat.at(i, c) * phat.at(i, c);
        na[i] = std::sqrt(s);
        if (na[i] == 0.0) ++zeros;
    }
    for (std::size_t j = 0; j < kd; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += pref.at(j, c) * pref.at(j, c);
        nb[j] = std::sqrt(s);
        if (nb[j] == 0.0) ++zeros;
    }
    if (zero_norm_count) *zero_norm_count += zeros;

    Tensor D(kp, kd);
    for (std::size_t i = 0; i < kp; ++i) {
        for (std::size_t j = 0; j < kd; ++j) {
            if (na[i] == 0.0 || nb[j] == 0.0) {
                D.at(i, j) = 1.0; // zero-norm rows: cosine treated as 0
                continue;
            }
            double dot = 0.0;
            for (std::size_t c = 0; c < C; ++c) dot += phat.at(i, c) * pref.at(j, c);
            D.at(i, j) = 1.0 - dot / (na[i] * nb[j]);
        }
    }
    return D;
}

nd::NodeId cost_matrix_tape(nd::Graph& g, nd::NodeId phat, nd::NodeId pref) {
    const nd::NodeId cos = g.pairwise_cosine(phat, pref);
    return g.add_scalar(g.neg(cos), 1.0);
}

// ---- Sinkhorn -----------------------------------------------------------------------------

namespace {

void check_problem(const Tensor& D, const std::vector<double>& r, const std::vector<double>& c,
                   double lambda, std::size_t iters) {
    if (r.size() != D.rows() || c.size() != D.cols()) {
        throw ShapeError("sinkhorn: marginals " + std::to_string(r.size()) + "/" +
                         std::to_string(c.size()) + " do not match cost " + D.shape_str());
    }
    if (lambda <= 0.0) throw ConfigError("sinkhorn: lambda must be positive");
    if (iters < 1) throw ConfigError("sinkhorn: need at least one iteration");
    double sr = 0.0, sc = 0.0;
    for (double v : r) sr += v;
    for (double v : c) sc += v;
    if (std::abs(sr - sc) > 1e-9) {
        throw ShapeError("sinkhorn: marginal masses differ (" + std::to_string(sr) + " vs " +
                         std::to_string(sc) + ")");
    }
}

} // namespace

TransportPlan sinkhorn(const Tensor& D, const std::vector<double>& ro,
                       const std::vector<double>& c, double lambda, std::size_t iters) {
    check_problem(D, ro, c, lambda, iters);
    const std::size_t kp = D.rows(), kd = D.cols();

    Tensor Q(kp, kd);
    double qmax = 0.0;
    for (std::size_t i = 0; i < Q.size(); ++i) {
        Q[i] = std::exp(-lambda * D[i]);
        qmax = std::max(qmax, Q[i]);
    }
    if (qmax == 0.0) {
        throw NumericError("sinkhorn: kernel exp(-lambda D) underflowed to zero; use a smaller "
                           "lambda");
    }

    std::vector<double> u(kd, 1.0), v(kp, 0.0);
    for (std::size_t t = 0; t < iters; ++t) {
        for (std::size_t i = 0; i < kp; ++i) {
            double denom = 0.0;
            for (std::size_t j = 0; j < kd; ++j) denom += Q.at(i, j) * u[j];
            if (denom == 0.0) {
                throw NumericError("sinkhorn: zero row mass in the kernel; use a smaller lambda");
            }
            v[i] = ro[i] / denom;
        }
        for (std::size_t j = 0; j < kd; ++j) {
            double denom = 0.0;
            for (std::size_t i = 0; i < kp; ++i) denom += Q.at(i, j) * v[i];
            if (denom == 0.0) {
                throw NumericError("sinkhorn: zero column mass in the kernel; use a smaller "
                                   "lambda");
            }
            u[j] = c[j] / denom;
        }
    }

    TransportPlan plan;
    plan.gamma = Tensor(kp, kd);
    for (std::size_t i = 0; i < kp; ++i)
        for (std::size_t j = 0; j < kd; ++j) plan.gamma.at(i, j) = v[i] * Q.at(i, j) * u[j];
    plan.loss = layer_alignment_loss(plan.gamma, D);
    return plan;
}

nd::NodeId sinkhorn_loss_tape(nd::Graph& g, nd::NodeId D, const std::vector<double>& r,
                              const std::vector<double>& c, double lambda, std::size_t iters) {
    // Node storage may reallocate on every push; no value reference survives
    // node creation, so dimensions are copied out up front.
    const std::size_t kd = g.value(D).cols();
    check_problem(g.value(D), r, c, lambda, iters);

    const nd::NodeId Q = g.exp(g.scale(D, -lambda));
    {
        const Tensor& vq = g.value(Q);
        double qmax = 0.0;
        for (std::size_t i = 0; i < vq.size(); ++i) qmax = std::max(qmax, vq[i]);
        if (qmax == 0.0) {
            throw NumericError("sinkhorn: kernel exp(-lambda D) underflowed to zero; use a "
                               "smaller lambda");
        }
    }
    const nd::NodeId Qt = g.transpose(Q);
    const nd::NodeId rcol = g.constant(Tensor::col(r));
    const nd::NodeId ccol = g.constant(Tensor::col(c));
    nd::NodeId u = g.constant(Tensor(kd, 1, 1.0));
    nd::NodeId v = 0;
    for (std::size_t t = 0; t < iters; ++t) {
        v = g.divide(rcol, g.matmul(Q, u));
        u = g.divide(ccol, g.matmul(Qt, v));
    }
    // gamma = diag(v) Q diag(u)
    const nd::NodeId gamma = g.multiply(g.multiply(Q, v), g.transpose(u));
    return g.frobenius_inner(gamma, D);
}

// ---- exact LP oracle -------------------------------------------------------------------------

TransportPlan exact_transport(const Tensor& D, const std::vector<double>& r,
                              const std::vector<double>& c) {
    check_problem(D, r, c, 1.0, 1);
    const std::size_t kp = D.rows(), kd = D.cols();
    if (kp * kd > 16) {
        throw ConfigError("exact_transport: instance " + D.shape_str() +
                          " exceeds the desk-scale limit (k'*k <= 16)");
    }

    // Vertex enumeration of the transport polytope: every vertex is the basic
    // solution of some spanning tree of the bipartite supplier/demander graph,
    // and some vertex attains the LP minimum. With k'*k <= 16 edges there are
    // at most C(16,8) edge subsets of tree size, so brute force is exact and
    // instant at this scale.
    const std::size_t n_nodes = kp + kd;
    const std::size_t n_edges = kp * kd;
    const std::size_t tree_edges = n_nodes - 1;
    if (n_edges < tree_edges) throw ConfigError("exact_transport: degenerate instance");

    TransportPlan best;
    best.loss = 1e300;
    std::vector<std::size_t> pick(tree_edges);
    for (std::size_t i = 0; i < tree_edges; ++i) pick[i] = i;

    std::vector<std::size_t> parent_uf(n_nodes);
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> adj(n_nodes); // (peer, edge)
    std::vector<double> balance(n_nodes);
    std::vector<double> flow(n_edges);
    std::vector<std::size_t> degree(n_nodes), queue(n_nodes);

    const auto uf_find = [&parent_uf](std::size_t x) {
        while (parent_uf[x] != x) {
            parent_uf[x] = parent_uf[parent_uf[x]];
            x = parent_uf[x];
        }
        return x;
    };

    while (true) {
        // Acyclic edge subsets of size V-1 are spanning trees.
        for (std::size_t v = 0; v < n_nodes; ++v) parent_uf[v] = v;
        bool is_tree = true;
        for (std::size_t e : pick) {
            const std::size_t a = uf_find(e / kd), b = uf_find(kp + e % kd);
            if (a == b) {
                is_tree = false;
                break;
            }
            parent_uf[a] = b;
        }

        if (is_tree) {
            for (std::size_t v = 0; v < n_nodes; ++v) adj[v].clear();
            for (std::size_t e : pick) {
                const std::size_t i = e / kd, j = kp + e % kd;
                adj[i].push_back({j, e});
                adj[j].push_back({i, e});
            }
            for (std::size_t i = 0; i < kp; ++i) balance[i] = r[i];
            for (std::size_t j = 0; j < kd; ++j) balance[kp + j] = -c[j];
            std::fill(flow.begin(), flow.end(), 0.0);
            for (std::size_t v = 0; v < n_nodes; ++v) degree[v] = adj[v].size();

            // Peel leaves; the unique tree flow falls out node by node.
            std::size_t qhead = 0, qtail = 0;
            for (std::size_t v = 0; v < n_nodes; ++v) {
                if (degree[v] == 1) queue[qtail++] = v;
            }
            std::vector<bool> removed(n_nodes, false);
            bool feasible = true;
            while (qhead < qtail) {
                const std::size_t v = queue[qhead++];
                if (removed[v]) continue;
                removed[v] = true;
                std::size_t peer = n_nodes, edge = n_edges;
                for (const auto& [p, e] : adj[v]) {
                    if (!removed[p]) {
                        peer = p;
                        edge = e;
                        break;
                    }
                }
                if (peer == n_nodes) break; // root
                const double f = (v < kp) ? balance[v] : -balance[v];
                if (f < -1e-12) {
                    feasible = false;
                    break;
                }
                flow[edge] = std::max(f, 0.0);
                balance[peer] += balance[v];
                if (--degree[peer] == 1) queue[qtail++] = peer;
            }

            if (feasible) {
                double cost = 0.0;
                for (std::size_t e : pick) cost += flow[e] * D[e];
                if (cost < best.loss) {
                    best.loss = cost;
                    best.gamma = Tensor(kp, kd);
                    for (std::size_t e : pick) best.gamma[e] = flow[e];
                }
            }
        }

        // Next combination in lexicographic order.
        bool exhausted = true;
        for (std::size_t slot = tree_edges; slot-- > 0;) {
            if (pick[slot] < n_edges - tree_edges + slot) {
                ++pick[slot];
                for (std::size_t s = slot + 1; s < tree_edges; ++s) pick[s] = pick[s - 1] + 1;
                exhausted = false;
                break;
            }
        }
        if (exhausted) break;
    }

    if (best.loss >= 1e300) {
        throw NumericError("exact_transport: no feasible basic solution found");
    }
    best.loss = layer_alignment_loss(best.gamma, D);
    return best;
}

double layer_alignment_loss(const Tensor& gamma, const Tensor& D) {
    if (!gamma.same_shape(D)) {
        throw ShapeError("alignment loss: plan " + gamma.shape_str() + " vs cost " +
                         D.shape_str());
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < D.size(); ++i) loss += gamma[i] * D[i];
    return loss;
}

// ---- multi-layer alignment ----------------------------------------------------------------------

nd::NodeId alignment_loss_tape(nd::Graph& g, const std::vector<AlignmentPair>& pairs,
                               double lambda, std::size_t iters, AlignmentStats* stats,
                               const std::vector<Marginals>* fixed_marginals) {
    if (pairs.empty()) throw ShapeError("alignment_loss: empty layer set");
    if (fixed_marginals && fixed_marginals->size() != pairs.size()) {
        throw ShapeError("alignment_loss: fixed marginals do not match the layer set");
    }
    nd::NodeId total = g.constant(Tensor::scalar(0.0));
    for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
        const AlignmentPair& pair = pairs[pi];
        const nd::NodeId teacher = g.constant(pair.teacher);
        const nd::NodeId D = cost_matrix_tape(g, pair.student, teacher);
        // Marginals are a weighting heuristic of the step, not the alignment
        // signal: computed from values, no gradient flows through them.
        const Marginals m = fixed_marginals
                                ? (*fixed_marginals)[pi]
                                : marginal_weights(g.value(pair.student), pair.teacher);
        if (stats) {
            if (m.uniform_fallback_r || m.uniform_fallback_c) ++stats->uniform_fallbacks;
            const auto count_zero_rows = [](const Tensor& t) {
                std::size_t zeros = 0;
                for (std::size_t i = 0; i < t.rows(); ++i) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < t.cols(); ++c) s += t.at(i, c) * t.at(i, c);
                    if (s == 0.0) ++zeros;
                }
                return zeros;
            };
            stats->zero_norm_rows +=
                count_zero_rows(g.value(pair.student)) + count_zero_rows(pair.teacher);
        }
        total = g.add(total, sinkhorn_loss_tape(g, D, m.r, m.c, lambda, iters));
    }
    return g.scale(total, 1.0 / static_cast<double>(pairs.size()));
}

} // namespace mrlab::ot
