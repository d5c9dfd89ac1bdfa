#include "mrlab/codebook.hpp"

#include <cmath>

#include <json.hpp>

#include "mrlab/error.hpp"
#include "mrlab/rng.hpp"

using ordered_json = nlohmann::ordered_json;

namespace mrlab::codebook {

// ---- config -----------------------------------------------------------------------

std::string CodebookConfig::to_json() const {
    ordered_json j;
    j["K"] = K;
    j["k"] = k;
    j["C"] = C;
    j["L"] = L;
    j["init_std"] = init_std;
    j["row_norm_ceiling"] = row_norm_ceiling;
    return j.dump();
}

CodebookConfig CodebookConfig::from_json(const std::string& json) {
    const ordered_json j = ordered_json::parse(json);
    CodebookConfig cfg;
    cfg.K = j.at("K").get<std::size_t>();
    cfg.k = j.at("k").get<std::size_t>();
    cfg.C = j.at("C").get<std::size_t>();
    cfg.L = j.at("L").get<std::size_t>();
    cfg.init_std = j.at("init_std").get<double>();
    cfg.row_norm_ceiling = j.at("row_norm_ceiling").get<double>();
    return cfg;
}

// ---- construction -----------------------------------------------------------------

namespace {

Tensor randn(std::size_t r, std::size_t c, Rng& rng, double stddev) {
    Tensor t(r, c);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

// Final layer weights start near zero so the skip dominates at step 0.
Mlp2 init_mlp(std::size_t C, Rng& rng, double std_in) {
    Mlp2 m;
    m.w1 = randn(C, C, rng, std_in);
    m.b1 = Tensor(1, C, 0.0);
    m.w2 = randn(C, C, rng, 1e-3);
    m.b2 = Tensor(1, C, 0.0);
    return m;
}

void validate(const CodebookConfig& cfg) {
    if (cfg.K == 0 || cfg.C == 0) throw ConfigError("codebook: K and C must be positive");
    if (cfg.k == 0 || cfg.k > cfg.K) {
        throw ConfigError("codebook: need 0 < k <= K, got k=" + std::to_string(cfg.k) +
                          " K=" + std::to_string(cfg.K));
    }
    if (cfg.L == 0) throw ConfigError("codebook: insertion layer must be positive");
}

} // namespace

Codebook Codebook::init(const CodebookConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    Rng rng(seed ^ 0x636f6465ULL);
    Codebook cb;
    cb.cfg = cfg;
    cb.P = randn(cfg.K, cfg.C, rng, cfg.init_std);
    cb.g = init_mlp(cfg.C, rng, cfg.init_std);
    cb.f = init_mlp(cfg.C, rng, cfg.init_std);
    return cb;
}

Codebook Codebook::with_identity_maps(const CodebookConfig& cfg, Tensor units) {
    validate(cfg);
    if (units.rows() != cfg.K || units.cols() != cfg.C) {
        throw ShapeError("codebook: units " + units.shape_str() + " do not match config");
    }
    Codebook cb;
    cb.cfg = cfg;
    cb.P = std::move(units);
    for (Mlp2* m : {&cb.g, &cb.f}) {
        m->w1 = Tensor(cfg.C, cfg.C, 0.0);
        m->b1 = Tensor(1, cfg.C, 0.0);
        m->w2 = Tensor(cfg.C, cfg.C, 0.0);
        m->b2 = Tensor(1, cfg.C, 0.0);
    }
    return cb;
}

std::vector<Tensor*> Codebook::param_list() {
    return {&P, &g.w1, &g.b1, &g.w2, &g.b2, &f.w1, &f.b1, &f.w2, &f.b2};
}

std::vector<const Tensor*> Codebook::param_list() const {
    auto mutable_list = const_cast<Codebook*>(this)->param_list();
    return {mutable_list.begin(), mutable_list.end()};
}

std::vector<std::string> Codebook::param_names() const {
    return {"P", "g.w1", "g.b1", "g.w2", "g.b2", "f.w1", "f.b1", "f.w2", "f.b2"};
}

void Codebook::check_row_norms() const {
    for (std::size_t r = 0; r < P.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < P.cols(); ++c) s += P.at(r, c) * P.at(r, c);
        if (!(std::sqrt(s) < cfg.row_norm_ceiling)) {
            throw NumericError("codebook: row " + std::to_string(r) + " norm " +
                               std::to_string(std::sqrt(s)) + " exceeds ceiling " +
                               std::to_string(cfg.row_norm_ceiling));
        }
    }
}

Checkpoint Codebook::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.section = "codebook";
    ckpt.config_json = cfg.to_json();
    for (const Tensor* t : param_list()) {
        ckpt.params.insert(ckpt.params.end(), t->data(), t->data() + t->size());
    }
    return ckpt;
}

Codebook Codebook::from_checkpoint(const Checkpoint& ckpt) {
    Codebook cb = init(CodebookConfig::from_json(ckpt.config_json), 0);
    std::size_t off = 0;
    for (Tensor* t : cb.param_list()) {
        if (off + t->size() > ckpt.params.size()) {
            throw IoError("codebook checkpoint: parameter payload too short");
        }
        std::copy(ckpt.params.begin() + off, ckpt.params.begin() + off + t->size(), t->data());
        off += t->size();
    }
    if (off != ckpt.params.size()) throw IoError("codebook checkpoint: trailing parameters");
    return cb;
}

// ---- fast path -----------------------------------------------------------------------

Tensor apply_mlp(const Mlp2& m, const Tensor& rows) {
    const std::size_t n = rows.rows(), C = rows.cols();
    Tensor h(n, C), out = rows;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < C; ++j) {
            double acc = m.b1[j];
            for (std::size_t c = 0; c < C; ++c) acc += rows.at(i, c) * m.w1.at(c, j);
            h.at(i, j) = 0.5 * acc * (1.0 + std::erf(acc * 0.70710678118654752440));
        }
        for (std::size_t j = 0; j < C; ++j) {
            double acc = m.b2[j];
            for (std::size_t c = 0; c < C; ++c) acc += h.at(i, c) * m.w2.at(c, j);
            out.at(i, j) += acc;
        }
    }
    return out;
}

Tensor pool_query(const Tensor& h_query) {
    if (h_query.rows() == 0) throw ShapeError("pool_query: empty hidden states");
    Tensor h(1, h_query.cols());
    for (std::size_t r = 0; r < h_query.rows(); ++r)
        for (std::size_t c = 0; c < h_query.cols(); ++c) h[c] += h_query.at(r, c);
    for (std::size_t c = 0; c < h_query.cols(); ++c)
        h[c] /= static_cast<double>(h_query.rows());
    return h;
}

namespace {

Tensor softmax_row(const Tensor& logits) {
    Tensor out = logits;
    double mx = out[0];
    for (std::size_t i = 1; i < out.size(); ++i) mx = std::max(mx, out[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(out[i] - mx);
        sum += out[i];
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= sum;
    return out;
}

} // namespace

Tensor score_cached(const Codebook& cb, const Tensor& h, const Tensor& f_of_p) {
    if (h.rows() != 1 || h.cols() != cb.cfg.C) {
        throw ShapeError("score: query must be 1x" + std::to_string(cb.cfg.C) + ", got " +
                         h.shape_str());
    }
    const Tensor gh = apply_mlp(cb.g, h);
    const double inv_sqrt_k = 1.0 / std::sqrt(static_cast<double>(cb.cfg.K));
    Tensor logits(1, cb.cfg.K);
    for (std::size_t i = 0; i < cb.cfg.K; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cb.cfg.C; ++c) acc += gh[c] * f_of_p.at(i, c);
        logits[i] = acc * inv_sqrt_k;
    }
    return softmax_row(logits);
}

Tensor score(const Codebook& cb, const Tensor& h) {
    return score_cached(cb, h, apply_mlp(cb.f, cb.P));
}

Selection select_topk(const Tensor& s, std::size_t k, const Tensor& P) {
    if (k > s.size()) {
        throw ShapeError("select_topk: k=" + std::to_string(k) + " exceeds K=" +
                         std::to_string(s.size()));
    }
    Selection sel;
    sel.indices = nd::topk_indices(s.vec(), k);
    sel.rows = Tensor(k, P.cols());
    for (std::size_t r = 0; r < k; ++r) {
        std::copy(P.data() + sel.indices[r] * P.cols(), P.data() + (sel.indices[r] + 1) * P.cols(),
                  sel.rows.data() + r * P.cols());
    }
    return sel;
}

// ---- tape path ------------------------------------------------------------------------

TapeCodebook bind(nd::Graph& g, const Codebook& cb, bool trainable) {
    TapeCodebook t;
    t.source = &cb;
    for (const Tensor* p : cb.param_list()) {
        t.all.push_back(trainable ? g.param(*p) : g.constant(*p));
    }
    t.P = t.all[0];
    t.g_w1 = t.all[1];
    t.g_b1 = t.all[2];
    t.g_w2 = t.all[3];
    t.g_b2 = t.all[4];
    t.f_w1 = t.all[5];
    t.f_b1 = t.all[6];
    t.f_w2 = t.all[7];
    t.f_b2 = t.all[8];
    return t;
}

nd::NodeId pool_query_tape(nd::Graph& g, nd::NodeId h_rows) {
    if (g.value(h_rows).rows() == 0) throw ShapeError("pool_query: empty hidden states");
    return g.mean_axis(h_rows, 0);
}

nd::NodeId apply_mlp_tape(nd::Graph& g, nd::NodeId w1, nd::NodeId b1, nd::NodeId w2, nd::NodeId b2,
                          nd::NodeId rows) {
    const nd::NodeId h = g.gelu(g.add(g.matmul(rows, w1), b1));
    return g.add(rows, g.add(g.matmul(h, w2), b2));
}

nd::NodeId score_tape(nd::Graph& g, const TapeCodebook& tcb, nd::NodeId h) {
    const std::size_t K = g.value(tcb.P).rows();
    const nd::NodeId gh = apply_mlp_tape(g, tcb.g_w1, tcb.g_b1, tcb.g_w2, tcb.g_b2, h);
    const nd::NodeId fp = apply_mlp_tape(g, tcb.f_w1, tcb.f_b1, tcb.f_w2, tcb.f_b2, tcb.P);
    const nd::NodeId logits =
        g.scale(g.matmul(gh, g.transpose(fp)), 1.0 / std::sqrt(static_cast<double>(K)));
    return g.softmax_rows(logits);
}

} // namespace mrlab::codebook
