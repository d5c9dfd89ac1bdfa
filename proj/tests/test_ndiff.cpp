#include <doctest.h>

#include <cmath>

#include "mrlab/graph.hpp"
#include "mrlab/rng.hpp"

using namespace mrlab;
using nd::Graph;
using nd::NodeId;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
    Tensor t(r, c);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
    return t;
}

} // namespace

TEST_CASE("matmul identity passthrough") {
    Graph g;
    Tensor eye(3, 3);
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    Rng rng(11);
    const Tensor m = random_tensor(3, 3, rng);
    const NodeId out = g.matmul(g.constant(eye), g.constant(m));
    for (std::size_t i = 0; i < 9; ++i) CHECK(g.value(out)[i] == doctest::Approx(m[i]).epsilon(1e-15));
}

TEST_CASE("softmax of equal logits is uniform") {
    Graph g;
    const NodeId s = g.softmax_rows(g.constant(Tensor::row({0.0, 0.0, 0.0})));
    for (std::size_t i = 0; i < 3; ++i) CHECK(g.value(s)[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("layer-norm of a constant vector is zero before affine") {
    Graph g;
    const NodeId x = g.constant(Tensor::row({4.2, 4.2, 4.2, 4.2}));
    const NodeId gamma = g.constant(Tensor::row({1.0, 1.0, 1.0, 1.0}));
    const NodeId beta = g.constant(Tensor::row({0.0, 0.0, 0.0, 0.0}));
    const NodeId y = g.layer_norm(x, gamma, beta);
    for (std::size_t i = 0; i < 4; ++i) CHECK(g.value(y)[i] == doctest::Approx(0.0));
}

TEST_CASE("product rule at a point") {
    Graph g;
    const NodeId x = g.param(Tensor::scalar(2.0));
    const NodeId y = g.param(Tensor::scalar(3.0));
    const NodeId xy = g.multiply(x, y);
    g.backward(xy);
    CHECK(g.grad(x)[0] == doctest::Approx(3.0));
    CHECK(g.grad(y)[0] == doctest::Approx(2.0));
}

TEST_CASE("cross-entropy gradient reduces to p minus onehot") {
    Graph g;
    const Tensor logits = Tensor::row({0.3, -1.2, 0.7, 0.1});
    const NodeId z = g.param(logits);
    const NodeId loss = g.cross_entropy_logits(z, {2}, {1.0});
    g.backward(loss);
    // Reference softmax.
    double mx = 0.7, sum = 0.0;
    std::vector<double> p(4);
    for (int i = 0; i < 4; ++i) {
        p[i] = std::exp(logits[i] - mx);
        sum += p[i];
    }
    for (int i = 0; i < 4; ++i) p[i] /= sum;
    p[2] -= 1.0;
    for (std::size_t i = 0; i < 4; ++i) CHECK(g.grad(z)[i] == doctest::Approx(p[i]).epsilon(1e-12));
}

TEST_CASE("stop-gradient blocks backward exactly") {
    Graph g;
    Rng rng(5);
    const NodeId x = g.param(random_tensor(1, 6, rng));
    const NodeId w = g.constant(random_tensor(6, 1, rng));
    const NodeId out = g.matmul(g.stop_gradient(x), w);
    g.backward(out);
    const Tensor gx = g.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) CHECK(gx[i] == 0.0);
    // Forward value is the identity.
    const NodeId direct = g.matmul(x, w);
    CHECK(g.value(out)[0] == g.value(direct)[0]);
}

TEST_CASE("unreachable parameters get exact zeros") {
    Graph g;
    const NodeId used = g.param(Tensor::scalar(1.5));
    const NodeId unused = g.param(Tensor(2, 3, 0.7));
    const NodeId loss = g.multiply(used, used);
    const auto grads = g.gradients(loss, {used, unused});
    CHECK(grads[0][0] == doctest::Approx(3.0));
    CHECK(grads[1].rows() == 2);
    CHECK(grads[1].cols() == 3);
    for (std::size_t i = 0; i < grads[1].size(); ++i) CHECK(grads[1][i] == 0.0);
}

TEST_CASE("non-scalar backward target is rejected") {
    Graph g;
    const NodeId x = g.param(Tensor(2, 2, 1.0));
    CHECK_THROWS_AS(g.backward(x), ShapeError);
}

TEST_CASE("shape mismatch names the primitive and both shapes") {
    Graph g;
    const NodeId a = g.constant(Tensor(2, 3, 1.0));
    const NodeId b = g.constant(Tensor(2, 3, 1.0));
    try {
        g.matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("2x3") != std::string::npos);
    }
}

TEST_CASE("non-finite intermediate names the node") {
    Graph g;
    const NodeId a = g.constant(Tensor::row({-1.0, 2.0}));
    CHECK_THROWS_AS(g.log(a), NumericError);
}

TEST_CASE("gradcheck: linear layer at a random point") {
    Rng rng(42);
    const Tensor w = random_tensor(5, 4, rng, 0.5);
    const Tensor b = random_tensor(1, 4, rng, 0.5);
    const Tensor x = random_tensor(3, 5, rng);
    const auto build = [&x](Graph& g, const std::vector<NodeId>& ps) {
        const NodeId y = g.add(g.matmul(g.constant(x), ps[0]), ps[1]);
        return g.sum_all(g.multiply(y, y));
    };
    const auto report = nd::check_gradients(build, {w, b}, {"w", "b"});
    CAPTURE(report.summary());
    CHECK(report.max_rel_err <= 1e-6);
}

TEST_CASE("gradcheck: constant-output graph has zero gradient and zero error") {
    const Tensor p(2, 2, 0.3);
    const auto build = [](Graph& g, const std::vector<NodeId>& ps) {
        const NodeId z = g.multiply(ps[0], g.constant(Tensor(2, 2, 0.0)));
        return g.sum_all(z);
    };
    const auto report = nd::check_gradients(build, {p}, {"p"});
    CHECK(report.max_rel_err == 0.0);
}

TEST_CASE("gradcheck: every primitive against central differences") {
    Rng rng(123);
    // One composite touching each differentiable primitive at a random point.
    const Tensor a = random_tensor(4, 6, rng, 0.6);
    const Tensor b = random_tensor(6, 5, rng, 0.6);
    const Tensor gamma = random_tensor(1, 5, rng, 0.2);
    const Tensor beta = random_tensor(1, 5, rng, 0.2);
    const Tensor c = random_tensor(3, 4, rng, 0.6);

    const auto build = [](Graph& g, const std::vector<NodeId>& ps) {
        const NodeId mm = g.matmul(ps[0], ps[1]);                       // matmul 4x5
        const NodeId ln = g.layer_norm(mm, ps[2], ps[3]);               // layer-norm
        const NodeId act = g.gelu(ln);                                  // GELU
        const NodeId sm = g.softmax_rows(act);                          // softmax
        const NodeId lg = g.log(g.add_scalar(sm, 1.0));                 // log, add
        const NodeId ex = g.exp(g.scale(lg, 0.25));                     // exp, multiply
        const NodeId pw = g.pow(g.add_scalar(ex, 2.0), 1.5);            // power
        const NodeId tp = g.transpose(pw);                              // transpose
        const NodeId cat = g.concat_rows({tp, ps[4]});                  // concat 8x4
        const NodeId sl = g.slice_rows(cat, 1, 6);                      // slice
        const NodeId gt = g.gather_rows(sl, {0, 3, 3, 5});              // gather w/ repeats
        const NodeId mu = g.mean_axis(gt, 0);                           // mean
        const NodeId cos = g.pairwise_cosine(gt, ps[4]);                // cosine
        return g.add(g.sum_all(cos), g.sum_all(mu));
    };
    const auto report = nd::check_gradients(build, {a, b, gamma, beta, c},
                                            {"a", "b", "gamma", "beta", "c"});
    CAPTURE(report.summary());
    CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("gradcheck: cross-entropy and embedding path") {
    Rng rng(321);
    const Tensor table = random_tensor(7, 4, rng, 0.8);
    const Tensor w = random_tensor(4, 6, rng, 0.8);
    const auto build = [](Graph& g, const std::vector<NodeId>& ps) {
        const NodeId emb = g.embedding(ps[0], {1, 4, 4, 2});
        const NodeId logits = g.matmul(emb, ps[1]);
        return g.cross_entropy_logits(logits, {0, 5, 2, 2}, {1.0, 0.0, 1.0, 1.0});
    };
    const auto report = nd::check_gradients(build, {table, w}, {"table", "w"});
    CAPTURE(report.summary());
    CHECK(report.max_rel_err <= 1e-6);
}

TEST_CASE("batch gradient linearity") {
    Rng rng(9);
    const Tensor w = random_tensor(3, 3, rng);
    const Tensor x1 = random_tensor(2, 3, rng);
    const Tensor x2 = random_tensor(2, 3, rng);

    const auto grad_for = [&w](const std::vector<Tensor>& xs) {
        Graph g;
        const NodeId wp = g.param(w);
        NodeId total = g.constant(Tensor::scalar(0.0));
        for (const Tensor& x : xs) {
            const NodeId y = g.matmul(g.constant(x), wp);
            total = g.add(total, g.sum_all(g.multiply(y, y)));
        }
        g.backward(total);
        return g.grad(wp);
    };

    const Tensor both = grad_for({x1, x2});
    const Tensor first = grad_for({x1});
    const Tensor second = grad_for({x2});
    for (std::size_t i = 0; i < both.size(); ++i) {
        CHECK(both[i] == doctest::Approx(first[i] + second[i]).epsilon(1e-12));
    }
}

TEST_CASE("evaluation is deterministic") {
    Rng rng(77);
    const Tensor a = random_tensor(4, 4, rng);
    const auto run = [&a]() {
        Graph g;
        const NodeId x = g.constant(a);
        return g.value(g.softmax_rows(g.gelu(g.matmul(x, x))));
    };
    const Tensor r1 = run();
    const Tensor r2 = run();
    for (std::size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("topk index ordering and ties") {
    CHECK(nd::topk_indices({0.10, 0.50, 0.05, 0.35}, 2) == std::vector<std::size_t>{1, 3});
    CHECK(nd::topk_indices({0.5, 0.5}, 1) == std::vector<std::size_t>{0});
    CHECK(nd::topk_indices({1.0, 2.0, 3.0}, 3) == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("straight-through k-hot forward and backward") {
    Graph g;
    const NodeId logits = g.param(Tensor::row({0.2, 1.4, -0.3, 0.9}));
    const NodeId soft = g.softmax_rows(logits);
    const NodeId hard = g.straight_through_khot(soft, 2);
    const Tensor& h = g.value(hard);
    CHECK(h[0] == 0.0);
    CHECK(h[1] == 1.0);
    CHECK(h[2] == 0.0);
    CHECK(h[3] == 1.0);

    // Gradient of hard . w equals gradient of soft . w.
    Rng rng(3);
    const Tensor w = random_tensor(4, 1, rng);
    const NodeId loss = g.matmul(hard, g.constant(w));
    g.backward(loss);
    const Tensor ghard = g.grad(logits);

    Graph g2;
    const NodeId logits2 = g2.param(Tensor::row({0.2, 1.4, -0.3, 0.9}));
    const NodeId soft2 = g2.softmax_rows(logits2);
    g2.backward(g2.matmul(soft2, g2.constant(w)));
    const Tensor gsoft = g2.grad(logits2);
    for (std::size_t i = 0; i < 4; ++i) CHECK(ghard[i] == doctest::Approx(gsoft[i]).epsilon(1e-15));
}
