#include <doctest.h>

#include <cmath>

#include "mrlab/rng.hpp"
#include "mrlab/sampling.hpp"

using namespace mrlab;
using nd::Graph;
using nd::NodeId;

TEST_CASE("gumbel noise is deterministic per seed and matches its formula") {
    const Tensor a = sampling::gumbel_noise(9, 8);
    const Tensor b = sampling::gumbel_noise(9, 8);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    const Tensor c = sampling::gumbel_noise(10, 8);
    bool differ = false;
    for (std::size_t i = 0; i < a.size(); ++i) differ = differ || a[i] != c[i];
    CHECK(differ);

    // Analytic point of the transform: u = 1/e gives -log(-log(u)) = 0.
    CHECK(-std::log(-std::log(std::exp(-1.0))) == doctest::Approx(0.0));
}

TEST_CASE("empirical gumbel mean approaches the Euler-Mascheroni constant") {
    const std::size_t n = 1000000;
    Rng rng(123);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += rng.gumbel();
    CHECK(std::abs(sum / n - 0.57721566490153286) < 0.01);
}

TEST_CASE("perturbed scores") {
    SUBCASE("zero noise is the identity on the simplex") {
        const Tensor s = Tensor::row({0.4, 0.35, 0.15, 0.1});
        const Tensor eps(1, 4, 0.0);
        const Tensor shat = sampling::perturbed_scores_plain(s, eps);
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(std::abs(shat[i] - s[i]) <= 1e-12);
    }
    SUBCASE("uniform scores reduce to softmax of the noise") {
        const Tensor s = Tensor::row({0.25, 0.25, 0.25, 0.25});
        const Tensor eps = Tensor::row({0.3, -0.7, 1.1, 0.0});
        const Tensor shat = sampling::perturbed_scores_plain(s, eps);
        double mx = 1.1, denom = 0.0;
        std::vector<double> expv(4);
        for (std::size_t i = 0; i < 4; ++i) {
            expv[i] = std::exp(eps[i] - mx);
            denom += expv[i];
        }
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(shat[i] == doctest::Approx(expv[i] / denom).epsilon(1e-12));
    }
    SUBCASE("noise that cancels the log-ratio equalizes two scores") {
        // log(0.7) - log(0.3) = 0.8473...; adding it to the smaller side ties them.
        const Tensor s = Tensor::row({0.7, 0.3});
        const Tensor eps = Tensor::row({0.0, std::log(0.7 / 0.3)});
        const Tensor shat = sampling::perturbed_scores_plain(s, eps);
        CHECK(shat[0] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(shat[1] == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("zero entries are clamped and counted") {
        const Tensor s = Tensor::row({0.6, 0.4, 0.0});
        const Tensor eps(1, 3, 0.0);
        std::size_t clamps = 0;
        const Tensor shat = sampling::perturbed_scores_plain(s, eps, 1.0, &clamps);
        CHECK(clamps == 1);
        CHECK(shat.all_finite());
        CHECK(shat[2] <= 1e-12);
    }
    SUBCASE("temperature rescales the logits") {
        const Tensor s = Tensor::row({0.7, 0.3});
        const Tensor eps(1, 2, 0.0);
        const Tensor sharp = sampling::perturbed_scores_plain(s, eps, 0.5);
        CHECK(sharp[0] > 0.7); // sharper than the input
    }
}

TEST_CASE("straight-through top-k") {
    SUBCASE("forward is exactly k-hot") {
        Graph g;
        const NodeId shat = g.constant(Tensor::row({0.1, 0.6, 0.3}));
        const NodeId I = sampling::straight_through_topk(g, shat, 1);
        CHECK(g.value(I)[0] == 0.0);
        CHECK(g.value(I)[1] == 1.0);
        CHECK(g.value(I)[2] == 0.0);
    }
    SUBCASE("gradient of sum(I) through a softmax is zero") {
        Graph g;
        const NodeId logits = g.param(Tensor::row({0.2, -0.4, 0.9, 0.1}));
        const NodeId shat = g.softmax_rows(logits);
        const NodeId I = sampling::straight_through_topk(g, shat, 2);
        g.backward(g.sum_all(I));
        const Tensor grad = g.grad(logits);
        for (std::size_t i = 0; i < grad.size(); ++i)
            CHECK(std::abs(grad[i]) <= 1e-15);
    }
    SUBCASE("gradient of I.w matches finite differences of shat.w") {
        Rng rng(77);
        Tensor logits0(1, 6);
        Tensor w(6, 1);
        for (std::size_t i = 0; i < 6; ++i) {
            logits0[i] = rng.normal();
            w[i] = rng.normal();
        }
        // Reverse-mode gradient through the straight-through indicator.
        Graph g;
        const NodeId logits = g.param(logits0);
        const NodeId shat = g.softmax_rows(logits);
        const NodeId I = sampling::straight_through_topk(g, shat, 2);
        g.backward(g.matmul(I, g.constant(w)));
        const Tensor ad = g.grad(logits);
        // Central differences of the soft path.
        const double h = 1e-5;
        for (std::size_t i = 0; i < 6; ++i) {
            const auto soft_value = [&](double delta) {
                Graph gg;
                Tensor pt = logits0;
                pt[i] += delta;
                const NodeId sh = gg.softmax_rows(gg.constant(pt));
                return gg.value(gg.matmul(sh, gg.constant(w))).item();
            };
            const double fd = (soft_value(h) - soft_value(-h)) / (2.0 * h);
            CHECK(std::abs(ad[i] - fd) <= 1e-5);
        }
    }
}

TEST_CASE("gate_units") {
    Graph g;
    Tensor P(4, 3);
    for (std::size_t i = 0; i < P.size(); ++i) P[i] = static_cast<double>(i) * 0.1;
    const NodeId Pn = g.param(P);
    const NodeId logits = g.param(Tensor::row({0.0, 2.0, -1.0, 1.5}));
    const NodeId shat = g.softmax_rows(logits);
    const NodeId I = sampling::straight_through_topk(g, shat, 2);
    const auto gated = sampling::gate_units(g, Pn, I, 2);

    SUBCASE("rows are the selected rows of P, unchanged in forward") {
        CHECK(gated.indices == std::vector<std::size_t>{1, 3});
        const Tensor& rows = g.value(gated.rows);
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(rows.at(0, c) == P.at(1, c));
            CHECK(rows.at(1, c) == P.at(3, c));
        }
    }
    SUBCASE("gradient w.r.t. P is exactly one on selected rows, zero elsewhere") {
        g.backward(g.sum_all(gated.rows));
        const Tensor gp = g.grad(Pn);
        for (std::size_t r = 0; r < 4; ++r) {
            const double expected = (r == 1 || r == 3) ? 1.0 : 0.0;
            for (std::size_t c = 0; c < 3; ++c) CHECK(gp.at(r, c) == expected);
        }
        // The scoring path receives some signal through the gate.
        const Tensor gl = g.grad(logits);
        double norm = 0.0;
        for (std::size_t i = 0; i < gl.size(); ++i) norm += gl[i] * gl[i];
        CHECK(norm > 0.0);
    }
}

TEST_CASE("noise-off reduction: training selection equals inference selection") {
    Rng rng(5);
    Tensor s(1, 16);
    double sum = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = rng.uniform(0.01, 1.0);
        sum += s[i];
    }
    for (std::size_t i = 0; i < s.size(); ++i) s[i] /= sum;

    const Tensor eps(1, 16, 0.0);
    const Tensor shat = sampling::perturbed_scores_plain(s, eps);
    CHECK(nd::topk_indices(shat.vec(), 4) == nd::topk_indices(s.vec(), 4));
}
