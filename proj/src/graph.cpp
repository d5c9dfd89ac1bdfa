#include "mrlab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mrlab/rng.hpp"

namespace mrlab::nd {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_str() + " and " +
                     b.shape_str());
}

} // namespace

// ---- node plumbing -----------------------------------------------------------

NodeId Graph::push(Tensor value, bool requires_grad, const char* op, std::vector<NodeId> inputs,
                   std::function<void(Graph&, NodeId)> backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.op = op;
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    const NodeId id = nodes_.size() - 1;
    check_finite(id);
    return id;
}

void Graph::check_finite(NodeId id) const {
    if (!nodes_[id].value.all_finite()) {
        throw NumericError(std::string(nodes_[id].op) + ": non-finite value at node " +
                           std::to_string(id));
    }
}

void Graph::ensure_grad(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
}

void Graph::accumulate(NodeId id, const Tensor& contribution) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    ensure_grad(id);
    for (std::size_t i = 0; i < contribution.size(); ++i) n.grad[i] += contribution[i];
}

NodeId Graph::param(Tensor value) {
    return push(std::move(value), true, "param", {}, nullptr);
}

NodeId Graph::constant(Tensor value) {
    return push(std::move(value), false, "constant", {}, nullptr);
}

Tensor Graph::grad(NodeId id) const {
    const Node& n = nodes_[id];
    if (n.grad.empty()) return Tensor(n.value.rows(), n.value.cols());
    return n.grad;
}

void Graph::backward(NodeId target) {
    const Node& out = nodes_[target];
    if (out.value.size() != 1) {
        throw ShapeError("backward: target must be scalar, got " + out.value.shape_str());
    }
    ensure_grad(target);
    nodes_[target].grad[0] = 1.0;
    for (std::size_t i = target + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.empty() || !n.backward || !n.requires_grad) continue;
        n.backward(*this, i);
    }
}

std::vector<Tensor> Graph::gradients(NodeId target, const std::vector<NodeId>& wrt) {
    backward(target);
    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (NodeId id : wrt) out.push_back(grad(id));
    return out;
}

// ---- binary broadcasting -------------------------------------------------------

Graph::Broadcast Graph::broadcast_mode(const Tensor& a, const Tensor& b, const char* op) {
    if (a.same_shape(b)) return Broadcast::same;
    if (b.size() == 1) return Broadcast::scalar_b;
    if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row_b;
    if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::col_b;
    shape_fail(op, a, b);
}

NodeId Graph::add(NodeId a, NodeId b) {
    // Normalize so the broadcast side is b.
    if (nodes_[a].value.size() < nodes_[b].value.size()) std::swap(a, b);
    const Tensor& va = nodes_[a].value;
    const Tensor& vb = nodes_[b].value;
    const Broadcast mode = broadcast_mode(va, vb, "add");

    Tensor out = va;
    const std::size_t rows = va.rows(), cols = va.cols();
    switch (mode) {
    case Broadcast::same:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
        break;
    case Broadcast::scalar_b:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[0];
        break;
    case Broadcast::row_b:
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += vb[c];
        break;
    case Broadcast::col_b:
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += vb[r];
        break;
    }

    const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    return push(std::move(out), rg, "add", {a, b}, [mode](Graph& g, NodeId self) {
        const Node& n = g.nodes_[self];
        const Tensor& go = n.grad;
        const NodeId ia = n.inputs[0], ib = n.inputs[1];
        g.accumulate(ia, go);
        if (!g.nodes_[ib].requires_grad) return;
        const std::size_t rows = go.rows(), cols = go.cols();
        Tensor gb(g.nodes_[ib].value.rows(), g.nodes_[ib].value.cols());
        switch (mode) {
        case Broadcast::same:
            gb = go;
            break;
        case Broadcast::scalar_b:
            for (std::size_t i = 0; i < go.size(); ++i) gb[0] += go[i];
            break;
        case Broadcast::row_b:
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gb[c] += go.at(r, c);
            break;
        case Broadcast::col_b:
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gb[r] += go.at(r, c);
            break;
        }
        g.accumulate(ib, gb);
    });
}

NodeId Graph::multiply(NodeId a, NodeId b) {
    if (nodes_[a].value.size() < nodes_[b].value.size()) std::swap(a, b);
    const Tensor& va = nodes_[a].value;
    const Tensor& vb = nodes_[b].value;
    const Broadcast mode = broadcast_mode(va, vb, "multiply");

    Tensor out = va;
    const std::size_t rows = va.rows(), cols = va.cols();
    switch (mode) {
    case Broadcast::same:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
        break;
    case Broadcast::scalar_b:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[0];
        break;
    case Broadcast::row_b:
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) out.at(r, c) *= vb[c];
        break;
    case Broadcast::col_b:
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) out.at(r, c) *= vb[r];
        break;
    }

    const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    return push(std::move(out), rg, "multiply", {a, b}, [mode](Graph& g, NodeId self) {
        const Node& n = g.nodes_[self];
        const Tensor& go = n.grad;
        const NodeId ia = n.inputs[0], ib = n.inputs[1];
        const Tensor& va = g.nodes_[ia].value;
        const Tensor& vb = g.nodes_[ib].value;
        const std::size_t rows = go.rows(), cols = go.cols();

        if (g.nodes_[ia].requires_grad) {
            Tensor ga(va.rows(), va.cols());
            switch (mode) {
            case Broadcast::same:
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] = go[i] * vb[i];
                break;
            case Broadcast::scalar_b:
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] = go[i] * vb[0];
                break;
            case Broadcast::row_b:
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) ga.at(r, c) = go.at(r, c) * vb[c];
                break;
            case Broadcast::col_b:
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) ga.at(r, c) = go.at(r, c) * vb[r];
                break;
            }
            g.accumulate(ia, ga);
        }
        if (g.nodes_[ib].requires_grad) {
            Tensor gb(vb.rows(), vb.cols());
            switch (mode) {
            case Broadcast::same:
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] = go[i] * va[i];
                break;
            case Broadcast::scalar_b:
                for (std::size_t i = 0; i < go.size(); ++i) gb[0] += go[i] * va[i];
                break;
            case Broadcast::row_b:
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) gb[c] += go.at(r, c) * va.at(r, c);
                break;
            case Broadcast::col_b:
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) gb[r] += go.at(r, c) * va.at(r, c);
                break;
            }
            g.accumulate(ib, gb);
        }
    });
}

// ---- matmul / transpose --------------------------------------------------------

namespace {

// c (m x n) += a (m x k) * b (k x n); ikj order so the inner loop vectorizes.
void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ar = a + i * k;
        double* cr = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ar[p];
            if (av == 0.0) continue;
            const double* br = b + p * n;
            for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// c (m x n) += a^T where a is (k x m), b (k x n)
void matmul_at_b(const double* a, const double* b, double* c, std::size_t k, std::size_t m,
                 std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* ar = a + p * m;
        const double* br = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ar[i];
            if (av == 0.0) continue;
            double* cr = c + i * n;
            for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// c (m x n) += a (m x k) * b^T where b is (n x k)
void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ar = a + i * k;
        double* cr = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* br = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
            cr[j] += acc;
        }
    }
}

} // namespace

NodeId Graph::matmul(NodeId a, NodeId b) {
    const Tensor& va = nodes_[a].value;
    const Tensor& vb = nodes_[b].value;
    if (va.cols() != vb.rows()) shape_fail("matmul", va, vb);

    Tensor out(va.rows(), vb.cols());
    matmul_acc(va.data(), vb.data(), out.data(), va.rows(), va.cols(), vb.cols());

    const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    return push(std::move(out), rg, "matmul", {a, b}, [](Graph& g, NodeId self) {
        const Node& n = g.nodes_[self];
        const Tensor& go = n.grad;
        const NodeId ia = n.inputs[0], ib = n.inputs[1];
        const Tensor& va = g.nodes_[ia].value;
        const Tensor& vb = g.nodes_[ib].value;
        if (g.nodes_[ia].requires_grad) {
            g.ensure_grad(ia);
            // dA = dOut * B^T
            matmul_a_bt(go.data(), vb.data(), g.nodes_[ia].grad.data(), go.rows(), go.cols(),
                        va.cols());
        }
        if (g.nodes_[ib].requires_grad) {
            g.ensure_grad(ib);
            // dB = A^T * dOut
            matmul_at_b(va.data(), go.data(), g.nodes_[ib].grad.data(), va.rows(), va.cols(),
                        go.cols());
        }
    });
}

NodeId Graph::transpose(NodeId a) {
    const Tensor& va = nodes_[a].value;
    Tensor out(va.cols(), va.rows());
    for (std::size_t r = 0; r < va.rows(); ++r)
        for (std::size_t c = 0; c < va.cols(); ++c) out.at(c, r) = va.at(r, c);
    return push(std::move(out), nodes_[a].requires_grad, "transpose", {a},
                [](Graph& g, NodeId self) {
                    const Node& n = g.nodes_[self];
                    const Tensor& go = n.grad;
                    Tensor ga(go.cols(), go.rows());
                    for (std::size_t r = 0; r < go.rows(); ++r)
                        for (std::size_t c = 0; c < go.cols(); ++c) ga.at(c, r) = go.at(r, c);
                    g.accumulate(n.inputs[0], ga);
                });
}

// ---- structural ops -------------------------------------------------------------

NodeId Graph::concat_rows(const std::vector<NodeId>& xs) {
    if (xs.empty()) throw ShapeError("concat: empty input list");
    const std::size_t cols = nodes_[xs[0]].value.cols();
    std::size_t rows = 0;
    bool rg = false;
    for (NodeId x : xs) {
        const Tensor& v = nodes_[x].value;
        if (v.cols() != cols) shape_fail("concat", nodes_[xs[0]].value, v);
        rows += v.rows();
        rg = rg || nodes_[x].requires_grad;
    }
    Tensor out(rows, cols);
    std::size_t r0 = 0;
    for (NodeId x : xs) {
        const Tensor& v = nodes_[x].value;
        std::copy(v.data(), v.data() + v.size(), out.data() + r0 * cols);
        r0 += v.rows();
    }
    return push(std::move(out), rg, "concat", std::vector<NodeId>(xs),
                [](Graph& g, NodeId self) {
                    const Node& n = g.nodes_[self];
                    const Tensor& go = n.grad;
                    const std::size_t cols = go.cols();
                    std::size_t r0 = 0;
                    for (NodeId x : n.inputs) {
                        const std::size_t xr = g.nodes_[x].value.rows();
                        if (g.nodes_[x].requires_grad) {
                            Tensor gx(xr, cols);
                            std::copy(go.data() + r0 * cols, go.data() + (r0 + xr) * cols,
                                      gx.data());
                            g.accumulate(x, gx);
                        }
                        r0 += xr;
                    }
                });
}

NodeId Graph::slice_rows(NodeId a, std::size_t start, std::size_t len) {
    const Tensor& va = nodes_[a].value;
    if (start + len > va.rows()) {
        throw ShapeError("slice: rows [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of range for " + va.shape_str());
    }
    Tensor out(len, va.cols());
    std::copy(va.data() + start * va.cols(), va.data() + (start + len) * va.cols(), out.data());
    return push(std::move(out), nodes_[a].requires_grad, "slice", {a},
                [start](Graph& g, NodeId self) {
                    const Node& n = g.nodes_[self];
                    const Tensor& go = n.grad;
                    const NodeId ia = n.inputs[0];
                    if (!g.nodes_[ia].requires_grad) return;
                    g.ensure_grad(ia);
                    Tensor& ga = g.nodes_[ia].grad;
                    const std::size_t cols = go.cols();
                    for (std::size_t r = 0; r < go.rows(); ++r)
                        for (std::size_t c = 0; c < cols; ++c)
                            ga.at(start + r, c) += go.at(r, c);
                });
}

NodeId Graph::slice_cols(NodeId a, std::size_t start, std::size_t len) {
    const Tensor& va = nodes_[a].value;
    if (start + len > va.cols()) {
        throw ShapeError("slice: cols [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of range for " + va.shape_str());
    }
    Tensor out(va.rows(), len);
    for (std::size_t r = 0; r < va.rows(); ++r)
        for (std::size_t c = 0; c < len; ++c) out.at(r, c) = va.at(r, start + c);
    return push(std::move(out), nodes_[a].requires_grad, "slice", {a},
                [start](Graph& g, NodeId self) {
                    const Node& n = g.nodes_[self];
                    const Tensor& go = n.grad;
                    const NodeId ia = n.inputs[0];
                    if (!g.nodes_[ia].requires_grad) return;
                    g.ensure_grad(ia);
                    Tensor& ga = g.nodes_[ia].grad;
                    for (std::size_t r = 0; r < go.rows(); ++r)
                        for (std::size_t c = 0; c < go.cols(); ++c)
                            ga.at(r, start + c) += go.at(r, c);
                });
}

NodeId Graph::gather_rows(NodeId a, std::vector<std::size_t> idx) {
    const Tensor& va = nodes_[a].value;
    for (std::size_t i : idx) {
        if (i >= va.rows()) {
            throw ShapeError("gather: row " + std::to_string(i) + " out of range for " +
                             va.shape_str());
        }
    }
    Tensor out(idx.size(), va.cols());
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy(va.data() + idx[r] * va.cols(), va.data() + (idx[r] + 1) * va.cols(),
                  out.data() + r * va.cols());
    return push(std::move(out), nodes_[a].requires_grad, "gather", {a},
                [idx = std::move(idx)](Graph& g, NodeId self) {
                    const Node& n = g.nodes_[self];
                    const Tensor& go = n.grad;
                    const NodeId ia = n.inputs[0];
                    if (!g.nodes_[ia].requires_grad) return;
                    g.ensure_grad(ia);
                    Tensor& ga = g.nodes_[ia].grad;
                    const std::size_t cols = go.cols();
                    for (std::size_t r = 0; r < idx.size(); ++r)
                        for (std::size_t c = 0; c < cols; ++c) ga.at(idx[r], c) += go.at(r, c);
                });
}

NodeId Graph::embedding(NodeId table, const std::vector<int>& ids) {
    const Tensor& vt = nodes_[table].value;
    std::vector<std::size_t> idx;
    idx.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vt.rows()) {
            throw ShapeError("embedding: token id " + std::to_string(id) +
                             " out of range for table " + vt.shape_str());
        }
        idx.push_back(static_cast<std::size_t>(id));
    }
    return gather_rows(table, std::move(idx));
}

// ---- reductions / row transforms -------------------------------------------------

NodeId Graph::mean_axis(NodeId a, int axis) {
    const Tensor& va = nodes_[a].value;
    if (va.empty()) throw ShapeError("mean: empty input");
    if (axis != 0 && axis != 1) throw ShapeError("mean: axis must be 0 or 1");

    Tensor out = (axis == 0) ? Tensor(1, va.cols()) : Tensor(va.rows(), 1);
    if (axis == 0) {
        for (std::size_t r = 0; r < va.rows(); ++r)
            for (std::size_t c = 0; c < va.cols(); ++c) out[c] += va.at(r, c);
        for (std::size_t c = 0; c < va.cols(); ++c) out[c] /= static_cast<double>(va.rows());
    } else {
        for (std::size_t r = 0; r < va.rows(); ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < va.cols(); ++c) acc += va.at(r, c);
            out[r] = acc / static_cast<double>(va.cols());
        }
    }
    return push(std::move(out), nodes_[a].requires_grad, "mean", {a},
                [axis](Graph& g, NodeId self) {
                    const Node& n = g.nodes_[self];
                    const Tensor& go = n.grad;
                    const NodeId ia = n.inputs[0];
                    const Tensor& va = g.nodes_[ia].value;
                    Tensor ga(va.rows(), va.cols());
                    if (axis == 0) {
                        const double inv = 1.0 / static_cast<double>(va.rows());
                        for (std::size_t r = 0; r < va.rows(); ++r)
                            for (std::size_t c = 0; c < va.cols(); ++c)
                                ga.at(r, c) = go[c] * inv;
                    } else {
                        const double inv = 1.0 / static_cast<double>(va.cols());
                        for (std::size_t r = 0; r < va.rows(); ++r)
                            for (std::size_t c = 0; c < va.cols(); ++c)
                                ga.at(r, c) = go[r] * inv;
                    }
                    g.accumulate(ia, ga);
                });
}

NodeId Graph::softmax_rows(NodeId a) {
    const Tensor& va = nodes_[a].value;
    Tensor out(va.rows(), va.cols());
    for (std::size_t r = 0; r < va.rows(); ++r) {
        double mx = va.at(r, 0);
        for (std::size_t c = 1; c < va.cols(); ++c) mx = std::max(mx, va.at(r, c));
        double sum = 0.0;
        for (std::size_t c = 0; c < va.cols(); ++c) {
            const double e = std::exp(va.at(r, c) - mx);
            out.at(r, c) = e;
            sum += e;
        }
        for (std::size_t c = 0; c < va.cols(); ++c) out.at(r, c) /= sum;
    }
    return push(std::move(out), nodes_[a].requires_grad, "softmax", {a},
                [](Graph& g, NodeId self) {
                    const Node& n = g.nodes_[self];
                    const Tensor& go = n.grad;
                    const Tensor& s = n.value;
                    Tensor ga(s.rows(), s.cols());
                    for (std::size_t r = 0; r < s.rows(); ++r) {
                        double dot = 0.0;
                        for (std::size_t c = 0; c < s.cols(); ++c)
                            dot += go.at(r, c) * s.at(r, c);
                        for (std::size_t c = 0; c < s.cols(); ++c)
                            ga.at(r, c) = s.at(r, c) * (go.at(r, c) - dot);
                    }
                    g.accumulate(n.inputs[0], ga);
                });
}

// ---- elementwise -----------------------------------------------------------------

NodeId Graph::log(NodeId a) {
    const Tensor& va = nodes_[a].value;
    Tensor out(va.rows(), va.cols());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = std::log(va[i]);
    return push(std::move(out), nodes_[a].requires_grad, "log", {a}, [](Graph& g, NodeId self) {
        const Node& n = g.nodes_[self];
        const Tensor& va = g.nodes_[n.inputs[0]].value;
        Tensor ga(va.rows(), va.cols());
        for (std::size_t i = 0; i < va.size(); ++i) ga[i] = n.grad[i] / va[i];
        g.accumulate(n.inputs[0], ga);
    });
}

NodeId Graph::exp(NodeId a) {
    const Tensor& va = nodes_[a].value;
    Tensor out(va.rows(), va.cols());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = std::exp(va[i]);
    return push(std::move(out), nodes_[a].requires_grad, "exp", {a}, [](Graph& g, NodeId self) {
        const Node& n = g.nodes_[self];
        Tensor ga(n.value.rows(), n.value.cols());
        for (std::size_t i = 0; i < n.value.size(); ++i) ga[i] = n.grad[i] * n.value[i];
        g.accumulate(n.inputs[0], ga);
    });
}

NodeId Graph::pow(NodeId a, double p) {
    const Tensor& va = nodes_[a].value;
    Tensor out(va.rows(), va.cols());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = std::pow(va[i], p);
    return push(std::move(out), nodes_[a].requires_grad, "power", {a},
                [p](Graph& g, NodeId self) {
                    const Node& n = g.nodes_[self];
                    const Tensor& va = g.nodes_[n.inputs[0]].value;
                    Tensor ga(va.rows(), va.cols());
                    if (p != 0.0) {
                        for (std::size_t i = 0; i < va.size(); ++i)
                            ga[i] = n.grad[i] * p * std::pow(va[i], p - 1.0);
                    }
                    g.accumulate(n.inputs[0], ga);
                });
}

NodeId Graph::gelu(NodeId a) {
    const Tensor& va = nodes_[a].value;
    Tensor out(va.rows(), va.cols());
    for (std::size_t i = 0; i < va.size(); ++i) {
        out[i] = 0.5 * va[i] * (1.0 + std::erf(va[i] * kInvSqrt2));
    }
    return push(std::move(out), nodes_[a].requires_grad, "gelu", {a}, [](Graph& g, NodeId self) {
        const Node& n = g.nodes_[self];
        const Tensor& va = g.nodes_[n.inputs[0]].value;
        Tensor ga(va.rows(), va.cols());
        for (std::size_t i = 0; i < va.size(); ++i) {
            const double x = va[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            ga[i] = n.grad[i] * (cdf + x * pdf);
        }
        g.accumulate(n.inputs[0], ga);
    });
}

// ---- layer norm ------------------------------------------------------------------

NodeId Graph::layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps) {
    const Tensor& vx = nodes_[x].value;
    const Tensor& vg = nodes_[gamma].value;
    const Tensor& vb = nodes_[beta].value;
    if (vg.rows() != 1 || vg.cols() != vx.cols()) shape_fail("layer-norm", vx, vg);
    if (vb.rows() != 1 || vb.cols() != vx.cols()) shape_fail("layer-norm", vx, vb);

    const std::size_t rows = vx.rows(), cols = vx.cols();
    Tensor out(rows, cols);
    Tensor xhat(rows, cols);
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += vx.at(r, c);
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = vx.at(r, c) - mu;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t c = 0; c < cols; ++c) {
            const double h = (vx.at(r, c) - mu) * inv;
            xhat.at(r, c) = h;
            out.at(r, c) = h * vg[c] + vb[c];
        }
    }

    const bool rg =
        nodes_[x].requires_grad || nodes_[gamma].requires_grad || nodes_[beta].requires_grad;
    return push(std::move(out), rg, "layer-norm", {x, gamma, beta},
                [xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, NodeId self) {
                    const Node& n = g.nodes_[self];
                    const Tensor& go = n.grad;
                    const NodeId ix = n.inputs[0], ig = n.inputs[1], ib = n.inputs[2];
                    const Tensor& vg = g.nodes_[ig].value;
                    const std::size_t rows = go.rows(), cols = go.cols();

                    if (g.nodes_[ig].requires_grad) {
                        Tensor dg(1, cols);
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < cols; ++c)
                                dg[c] += go.at(r, c) * xhat.at(r, c);
                        g.accumulate(ig, dg);
                    }
                    if (g.nodes_[ib].requires_grad) {
                        Tensor db(1, cols);
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < cols; ++c) db[c] += go.at(r, c);
                        g.accumulate(ib, db);
                    }
                    if (g.nodes_[ix].requires_grad) {
                        Tensor dx(rows, cols);
                        const double invc = 1.0 / static_cast<double>(cols);
                        for (std::size_t r = 0; r < rows; ++r) {
                            double mean_dh = 0.0, mean_dh_h = 0.0;
                            for (std::size_t c = 0; c < cols; ++c) {
                                const double dh = go.at(r, c) * vg[c];
                                mean_dh += dh;
                                mean_dh_h += dh * xhat.at(r, c);
                            }
                            mean_dh *= invc;
                            mean_dh_h *= invc;
                            for (std::size_t c = 0; c < cols; ++c) {
                                const double dh = go.at(r, c) * vg[c];
                                dx.at(r, c) =
                                    inv_std[r] * (dh - mean_dh - xhat.at(r, c) * mean_dh_h);
                            }
                        }
                        g.accumulate(ix, dx);
                    }
                });
}

// ---- cross entropy ---------------------------------------------------------------

NodeId Graph::cross_entropy_logits(NodeId logits, const std::vector<int>& targets,
                                   const std::vector<double>& weights) {
    const Tensor& vz = nodes_[logits].value;
    if (targets.size() != vz.rows() || weights.size() != vz.rows()) {
        throw ShapeError("cross-entropy: " + std::to_string(vz.rows()) + " logit rows vs " +
                         std::to_string(targets.size()) + " targets / " +
                         std::to_string(weights.size()) + " weights");
    }
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    if (wsum <= 0.0) throw ShapeError("cross-entropy: weights sum to zero");
    for (std::size_t r = 0; r < vz.rows(); ++r) {
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vz.cols()) {
            throw ShapeError("cross-entropy: target " + std::to_string(targets[r]) +
                             " out of range for " + vz.shape_str());
        }
    }

    double loss = 0.0;
    for (std::size_t r = 0; r < vz.rows(); ++r) {
        if (weights[r] == 0.0) continue;
        double mx = vz.at(r, 0);
        for (std::size_t c = 1; c < vz.cols(); ++c) mx = std::max(mx, vz.at(r, c));
        double lse = 0.0;
        for (std::size_t c = 0; c < vz.cols(); ++c) lse += std::exp(vz.at(r, c) - mx);
        lse = mx + std::log(lse);
        loss += weights[r] * (lse - vz.at(r, static_cast<std::size_t>(targets[r])));
    }
    loss /= wsum;

    return push(Tensor::scalar(loss), nodes_[logits].requires_grad, "cross-entropy", {logits},
                [targets, weights, wsum](Graph& g, NodeId self) {
                    const Node& n = g.nodes_[self];
                    const double gout = n.grad[0];
                    const NodeId iz = n.inputs[0];
                    const Tensor& vz = g.nodes_[iz].value;
                    Tensor gz(vz.rows(), vz.cols());
                    for (std::size_t r = 0; r < vz.rows(); ++r) {
                        if (weights[r] == 0.0) continue;
                        const double scale = gout * weights[r] / wsum;
                        double mx = vz.at(r, 0);
                        for (std::size_t c = 1; c < vz.cols(); ++c)
                            mx = std::max(mx, vz.at(r, c));
                        double sum = 0.0;
                        for (std::size_t c = 0; c < vz.cols(); ++c)
                            sum += std::exp(vz.at(r, c) - mx);
                        for (std::size_t c = 0; c < vz.cols(); ++c) {
                            const double p = std::exp(vz.at(r, c) - mx) / sum;
                            gz.at(r, c) = scale * p;
                        }
                        gz.at(r, static_cast<std::size_t>(targets[r])) -= scale;
                    }
                    g.accumulate(iz, gz);
                });
}

// ---- pairwise cosine -------------------------------------------------------------

NodeId Graph::pairwise_cosine(NodeId a, NodeId b) {
    const Tensor& va = nodes_[a].value;
    const Tensor& vb = nodes_[b].value;
    if (va.cols() != vb.cols()) shape_fail("cosine", va, vb);
    if (va.rows() == 0 || vb.rows() == 0) throw ShapeError("cosine: empty input");

    const std::size_t ar = va.rows(), br = vb.rows(), d = va.cols();
    std::vector<double> na(ar), nb(br);
    for (std::size_t i = 0; i < ar; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += va.at(i, c) * va.at(i, c);
        na[i] = std::sqrt(s);
    }
    for (std::size_t j = 0; j < br; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += vb.at(j, c) * vb.at(j, c);
        nb[j] = std::sqrt(s);
    }
    Tensor out(ar, br);
    for (std::size_t i = 0; i < ar; ++i) {
        for (std::size_t j = 0; j < br; ++j) {
            if (na[i] == 0.0 || nb[j] == 0.0) {
                out.at(i, j) = 0.0; // zero-norm rows contribute zero similarity
                continue;
            }
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += va.at(i, c) * vb.at(j, c);
            out.at(i, j) = dot / (na[i] * nb[j]);
        }
    }

    const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    return push(std::move(out), rg, "cosine", {a, b},
                [na = std::move(na), nb = std::move(nb)](Graph& g, NodeId self) {
                    const Node& n = g.nodes_[self];
                    const Tensor& go = n.grad;
                    const Tensor& cosv = n.value;
                    const NodeId ia = n.inputs[0], ib = n.inputs[1];
                    const Tensor& va = g.nodes_[ia].value;
                    const Tensor& vb = g.nodes_[ib].value;
                    const std::size_t ar = va.rows(), br = vb.rows(), d = va.cols();

                    if (g.nodes_[ia].requires_grad) {
                        Tensor ga(ar, d);
                        for (std::size_t i = 0; i < ar; ++i) {
                            if (na[i] == 0.0) continue;
                            for (std::size_t j = 0; j < br; ++j) {
                                const double gij = go.at(i, j);
                                if (gij == 0.0 || nb[j] == 0.0) continue;
                                const double inv = 1.0 / (na[i] * nb[j]);
                                const double cs = cosv.at(i, j) / (na[i] * na[i]);
                                for (std::size_t c = 0; c < d; ++c)
                                    ga.at(i, c) +=
                                        gij * (vb.at(j, c) * inv - cs * va.at(i, c));
                            }
                        }
                        g.accumulate(ia, ga);
                    }
                    if (g.nodes_[ib].requires_grad) {
                        Tensor gb(br, d);
                        for (std::size_t j = 0; j < br; ++j) {
                            if (nb[j] == 0.0) continue;
                            for (std::size_t i = 0; i < ar; ++i) {
                                const double gij = go.at(i, j);
                                if (gij == 0.0 || na[i] == 0.0) continue;
                                const double inv = 1.0 / (na[i] * nb[j]);
                                const double cs = cosv.at(i, j) / (nb[j] * nb[j]);
                                for (std::size_t c = 0; c < d; ++c)
                                    gb.at(j, c) +=
                                        gij * (va.at(i, c) * inv - cs * vb.at(j, c));
                            }
                        }
                        g.accumulate(ib, gb);
                    }
                });
}

// ---- gradient routing ------------------------------------------------------------

NodeId Graph::stop_gradient(NodeId a) {
    return push(nodes_[a].value, false, "stop-gradient", {a}, nullptr);
}

NodeId Graph::straight_through_khot(NodeId soft, std::size_t k) {
    const Tensor& vs = nodes_[soft].value;
    if (vs.rows() != 1) throw ShapeError("straight-through: expected 1xK row, got " + vs.shape_str());
    if (k > vs.cols()) {
        throw ShapeError("straight-through: k=" + std::to_string(k) + " exceeds K=" +
                         std::to_string(vs.cols()));
    }
    const std::vector<std::size_t> top = topk_indices(vs.vec(), k);
    Tensor out(1, vs.cols());
    for (std::size_t i : top) out[i] = 1.0;
    return push(std::move(out), nodes_[soft].requires_grad, "straight-through", {soft},
                [](Graph& g, NodeId self) {
                    const Node& n = g.nodes_[self];
                    g.accumulate(n.inputs[0], n.grad);
                });
}

std::vector<std::size_t> topk_indices(const std::vector<double>& scores, std::size_t k) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&scores](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    order.resize(std::min(k, order.size()));
    std::sort(order.begin(), order.end());
    return order;
}

// ---- composed helpers --------------------------------------------------------------

NodeId Graph::scale(NodeId a, double c) { return multiply(a, constant(Tensor::scalar(c))); }

NodeId Graph::add_scalar(NodeId a, double c) { return add(a, constant(Tensor::scalar(c))); }

NodeId Graph::sum_axis(NodeId a, int axis) {
    const Tensor& va = nodes_[a].value;
    const double n = static_cast<double>(axis == 0 ? va.rows() : va.cols());
    return scale(mean_axis(a, axis), n);
}

NodeId Graph::sum_all(NodeId a) { return sum_axis(sum_axis(a, 1), 0); }

NodeId Graph::mean_all(NodeId a) {
    const Tensor& va = nodes_[a].value;
    return scale(sum_all(a), 1.0 / static_cast<double>(va.size()));
}

// ---- finite-difference checking -----------------------------------------------------

namespace {

double eval_loss(const LossBuilder& build, const std::vector<Tensor>& params) {
    Graph g;
    std::vector<NodeId> ids;
    ids.reserve(params.size());
    for (const Tensor& p : params) ids.push_back(g.param(p));
    return g.value(build(g, ids)).item();
}

} // namespace

GradCheckReport check_gradients(const LossBuilder& build, const std::vector<Tensor>& params,
                                const std::vector<std::string>& names, double fd_step,
                                std::size_t max_probes, std::uint64_t probe_seed) {
    if (names.size() != params.size()) {
        throw ShapeError("check_gradients: " + std::to_string(params.size()) + " params vs " +
                         std::to_string(names.size()) + " names");
    }

    // Reverse-mode gradients at the base point.
    Graph g;
    std::vector<NodeId> ids;
    for (const Tensor& p : params) ids.push_back(g.param(p));
    const NodeId loss = build(g, ids);
    const std::vector<Tensor> ad = g.gradients(loss, ids);

    GradCheckReport report;
    Rng rng(probe_seed);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        std::vector<std::size_t> probes(params[pi].size());
        std::iota(probes.begin(), probes.end(), 0);
        if (max_probes > 0 && probes.size() > max_probes) {
            rng.shuffle(probes);
            probes.resize(max_probes);
            std::sort(probes.begin(), probes.end());
        }

        GradCheckEntry entry;
        entry.name = names[pi];
        entry.probes = probes.size();
        std::vector<Tensor> work = params;
        for (std::size_t ei : probes) {
            const double orig = work[pi][ei];
            work[pi][ei] = orig + fd_step;
            const double up = eval_loss(build, work);
            work[pi][ei] = orig - fd_step;
            const double down = eval_loss(build, work);
            work[pi][ei] = orig;
            const double fd = (up - down) / (2.0 * fd_step);
            const double advl = ad[pi][ei];
            const double mag = std::max(std::abs(advl), std::abs(fd));
            // Near the finite-difference noise floor, compare absolutely.
            const double err = (mag < 1e-7) ? std::abs(advl - fd) : std::abs(advl - fd) / mag;
            if (err > entry.max_rel_err) {
                entry.max_rel_err = err;
                entry.worst_index = ei;
                entry.ad_at_worst = advl;
                entry.fd_at_worst = fd;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

std::vector<std::string> GradCheckReport::failing(double tol) const {
    std::vector<std::string> out;
    for (const auto& e : entries) {
        if (e.max_rel_err > tol) out.push_back(e.name);
    }
    return out;
}

std::string GradCheckReport::summary() const {
    std::string s;
    for (const auto& e : entries) {
        s += e.name + ": max_rel_err=" + std::to_string(e.max_rel_err) + " (ad=" +
             std::to_string(e.ad_at_worst) + " fd=" + std::to_string(e.fd_at_worst) + " at " +
             std::to_string(e.worst_index) + ", " + std::to_string(e.probes) + " probes)\n";
    }
    return s;
}

} // namespace mrlab::nd
