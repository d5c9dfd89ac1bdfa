#include "mrlab/backbone.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "mrlab/error.hpp"
#include "mrlab/io.hpp"
#include "mrlab/optim.hpp"
#include "mrlab/rng.hpp"
#include "mrlab/vocab.hpp"

using ordered_json = nlohmann::ordered_json;

namespace mrlab::backbone {

namespace {

constexpr double kMaskNegInf = -1e30;

Tensor randn(std::size_t r, std::size_t c, Rng& rng, double stddev) {
    Tensor t(r, c);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

std::size_t argmax_row(const double* row, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i) {
        if (row[i] > row[best]) best = i;
    }
    return best;
}

// ---- fast math helpers ------------------------------------------------------------

void layer_norm_rows(const Tensor& x, const Tensor& g, const Tensor& b, double eps, Tensor& out) {
    const std::size_t rows = x.rows(), cols = x.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += x.at(r, c);
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = x.at(r, c) - mu;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c)
            out.at(r, c) = (x.at(r, c) - mu) * inv * g[c] + b[c];
    }
}

// out = x * w + b (row-broadcast bias)
void affine(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& out) {
    const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] = b[j];
        const double* xrow = x.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double xv = xrow[p];
            if (xv == 0.0) continue;
            const double* wrow = w.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += xv * wrow[j];
        }
    }
}

void gelu_inplace(Tensor& x) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * 0.70710678118654752440));
    }
}

} // namespace

// ---- config / model ------------------------------------------------------------------

std::string BackboneConfig::to_json() const {
    ordered_json j;
    j["vocab"] = vocab;
    j["dim"] = dim;
    j["layers"] = layers;
    j["heads"] = heads;
    j["max_seq"] = max_seq;
    j["mlp_hidden"] = mlp_hidden;
    j["ln_eps"] = ln_eps;
    return j.dump();
}

BackboneConfig BackboneConfig::from_json(const std::string& json) {
    const ordered_json j = ordered_json::parse(json);
    BackboneConfig cfg;
    cfg.vocab = j.at("vocab").get<std::size_t>();
    cfg.dim = j.at("dim").get<std::size_t>();
    cfg.layers = j.at("layers").get<std::size_t>();
    cfg.heads = j.at("heads").get<std::size_t>();
    cfg.max_seq = j.at("max_seq").get<std::size_t>();
    cfg.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
    cfg.ln_eps = j.at("ln_eps").get<double>();
    return cfg;
}

BackboneModel BackboneModel::init(const BackboneConfig& cfg, std::uint64_t seed) {
    if (cfg.layers < 4) throw ConfigError("backbone: need at least 4 layers");
    if (cfg.dim % cfg.heads != 0) throw ConfigError("backbone: dim must divide into heads");
    if (cfg.vocab < static_cast<std::size_t>(vocab::kSymbols)) {
        throw ConfigError("backbone: vocab smaller than the symbol table");
    }
    Rng rng(seed ^ 0x6261636bULL);
    const double s = 0.02;
    BackboneModel m;
    m.cfg = cfg;
    m.tok_embed = randn(cfg.vocab, cfg.dim, rng, s);
    m.pos_embed = randn(cfg.max_seq, cfg.dim, rng, s);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        LayerParams p;
        p.ln1_g = Tensor(1, cfg.dim, 1.0);
        p.ln1_b = Tensor(1, cfg.dim, 0.0);
        p.wq = randn(cfg.dim, cfg.dim, rng, s);
        p.bq = Tensor(1, cfg.dim, 0.0);
        p.wk = randn(cfg.dim, cfg.dim, rng, s);
        p.bk = Tensor(1, cfg.dim, 0.0);
        p.wv = randn(cfg.dim, cfg.dim, rng, s);
        p.bv = Tensor(1, cfg.dim, 0.0);
        p.wo = randn(cfg.dim, cfg.dim, rng, s);
        p.bo = Tensor(1, cfg.dim, 0.0);
        p.ln2_g = Tensor(1, cfg.dim, 1.0);
        p.ln2_b = Tensor(1, cfg.dim, 0.0);
        p.w1 = randn(cfg.dim, cfg.mlp_hidden, rng, s);
        p.b1 = Tensor(1, cfg.mlp_hidden, 0.0);
        p.w2 = randn(cfg.mlp_hidden, cfg.dim, rng, s);
        p.b2 = Tensor(1, cfg.dim, 0.0);
        m.blocks.push_back(std::move(p));
    }
    m.lnf_g = Tensor(1, cfg.dim, 1.0);
    m.lnf_b = Tensor(1, cfg.dim, 0.0);
    m.unembed = randn(cfg.dim, cfg.vocab, rng, s);
    return m;
}

std::vector<Tensor*> BackboneModel::param_list() {
    std::vector<Tensor*> out{&tok_embed, &pos_embed};
    for (LayerParams& p : blocks) {
        for (Tensor* t : {&p.ln1_g, &p.ln1_b, &p.wq, &p.bq, &p.wk, &p.bk, &p.wv, &p.bv, &p.wo,
                          &p.bo, &p.ln2_g, &p.ln2_b, &p.w1, &p.b1, &p.w2, &p.b2}) {
            out.push_back(t);
        }
    }
    out.push_back(&lnf_g);
    out.push_back(&lnf_b);
    out.push_back(&unembed);
    return out;
}

std::vector<const Tensor*> BackboneModel::param_list() const {
    auto mutable_list = const_cast<BackboneModel*>(this)->param_list();
    return {mutable_list.begin(), mutable_list.end()};
}

std::vector<std::string> BackboneModel::param_names() const {
    std::vector<std::string> out{"tok_embed", "pos_embed"};
    static const char* fields[] = {"ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                                   "wo",    "bo",    "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"};
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        for (const char* f : fields) out.push_back("block" + std::to_string(l) + "." + f);
    }
    out.push_back("lnf_g");
    out.push_back("lnf_b");
    out.push_back("unembed");
    return out;
}

std::uint64_t BackboneModel::checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const Tensor* t : param_list()) {
        const auto* p = reinterpret_cast<const unsigned char*>(t->data());
        for (std::size_t i = 0; i < t->size() * sizeof(double); ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    }
    return h;
}

Checkpoint BackboneModel::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.section = "backbone";
    ckpt.config_json = cfg.to_json();
    for (const Tensor* t : param_list()) {
        ckpt.params.insert(ckpt.params.end(), t->data(), t->data() + t->size());
    }
    return ckpt;
}

BackboneModel BackboneModel::from_checkpoint(const Checkpoint& ckpt) {
    BackboneModel m = init(BackboneConfig::from_json(ckpt.config_json), 0);
    std::size_t off = 0;
    for (Tensor* t : m.param_list()) {
        if (off + t->size() > ckpt.params.size()) {
            throw IoError("backbone checkpoint: parameter payload too short");
        }
        std::copy(ckpt.params.begin() + off, ckpt.params.begin() + off + t->size(), t->data());
        off += t->size();
    }
    if (off != ckpt.params.size()) {
        throw IoError("backbone checkpoint: trailing parameters");
    }
    m.frozen = true;
    return m;
}

// ---- fast engine ------------------------------------------------------------------------

namespace {

// Runs blocks [first_block, N) over `x`, reading and extending the cache.
// Chunk row i attends to all previously cached rows plus chunk rows <= i.
void run_blocks_fast(const BackboneModel& m, KvCache& cache, Tensor& x, std::size_t first_block,
                     std::vector<Tensor>* states_after_each) {
    const std::size_t C = m.cfg.dim, H = m.cfg.heads, d = m.cfg.head_dim();
    const std::size_t n = x.rows();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    Tensor xln(n, C), q(n, C), k(n, C), v(n, C), attn(n, C), ho(n, C);
    Tensor h1(n, m.cfg.mlp_hidden), mlp(n, C);
    std::vector<double> scores;

    for (std::size_t b = first_block; b < m.cfg.layers; ++b) {
        const LayerParams& p = m.blocks[b];
        layer_norm_rows(x, p.ln1_g, p.ln1_b, m.cfg.ln_eps, xln);
        affine(xln, p.wq, p.bq, q);
        affine(xln, p.wk, p.bk, k);
        affine(xln, p.wv, p.bv, v);

        KvCache::LayerKv& kv = cache.layers[b];
        const std::size_t base = kv.rows;
        kv.k.insert(kv.k.end(), k.data(), k.data() + k.size());
        kv.v.insert(kv.v.end(), v.data(), v.data() + v.size());
        kv.rows += n;

        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ctx = base + i + 1;
            scores.resize(ctx);
            for (std::size_t h = 0; h < H; ++h) {
                const double* qi = q.data() + i * C + h * d;
                double mx = -1e308;
                for (std::size_t j = 0; j < ctx; ++j) {
                    const double* kj = kv.k.data() + j * C + h * d;
                    double acc = 0.0;
                    for (std::size_t c = 0; c < d; ++c) acc += qi[c] * kj[c];
                    scores[j] = acc * inv_sqrt_d;
                    mx = std::max(mx, scores[j]);
                }
                double sum = 0.0;
                for (std::size_t j = 0; j < ctx; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    sum += scores[j];
                }
                double* out = ho.data() + i * C + h * d;
                std::fill(out, out + d, 0.0);
                for (std::size_t j = 0; j < ctx; ++j) {
                    const double w = scores[j] / sum;
                    if (w == 0.0) continue;
                    const double* vj = kv.v.data() + j * C + h * d;
                    for (std::size_t c = 0; c < d; ++c) out[c] += w * vj[c];
                }
            }
        }

        affine(ho, p.wo, p.bo, attn);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += attn[i];

        layer_norm_rows(x, p.ln2_g, p.ln2_b, m.cfg.ln_eps, xln);
        affine(xln, p.w1, p.b1, h1);
        gelu_inplace(h1);
        affine(h1, p.w2, p.b2, mlp);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += mlp[i];

        if (states_after_each) states_after_each->push_back(x);
    }
}

Tensor embed_fast(const BackboneModel& m, const std::vector<int>& toks, std::size_t pos_start) {
    if (pos_start + toks.size() > m.cfg.max_seq) {
        throw ShapeError("backbone: sequence exceeds max positions (" +
                         std::to_string(pos_start + toks.size()) + " > " +
                         std::to_string(m.cfg.max_seq) + ")");
    }
    Tensor x(toks.size(), m.cfg.dim);
    for (std::size_t i = 0; i < toks.size(); ++i) {
        const int t = toks[i];
        if (t < 0 || static_cast<std::size_t>(t) >= m.cfg.vocab) {
            throw ShapeError("backbone: token " + std::to_string(t) + " outside vocab");
        }
        const double* te = m.tok_embed.data() + static_cast<std::size_t>(t) * m.cfg.dim;
        const double* pe = m.pos_embed.data() + (pos_start + i) * m.cfg.dim;
        double* xr = x.data() + i * m.cfg.dim;
        for (std::size_t c = 0; c < m.cfg.dim; ++c) xr[c] = te[c] + pe[c];
    }
    return x;
}

} // namespace

Tensor process_tokens(const BackboneModel& m, KvCache& cache, const std::vector<int>& toks,
                      std::size_t pos_start, std::size_t tap_layer, Tensor* tap_out) {
    Tensor x = embed_fast(m, toks, pos_start);
    if (tap_layer == 0) {
        if (tap_out) *tap_out = x;
        run_blocks_fast(m, cache, x, 0, nullptr);
        return x;
    }
    std::vector<Tensor> states;
    run_blocks_fast(m, cache, x, 0, &states);
    if (tap_out) {
        if (tap_layer > m.cfg.layers) throw ShapeError("backbone: tap layer out of range");
        *tap_out = states[tap_layer - 1];
    }
    return x;
}

Tensor process_inserted_rows(const BackboneModel& m, KvCache& cache, const Tensor& rows,
                             std::size_t L, std::vector<Tensor>* slot_states) {
    if (rows.cols() != m.cfg.dim) {
        throw ShapeError("backbone: inserted rows width " + std::to_string(rows.cols()) +
                         " != dim " + std::to_string(m.cfg.dim));
    }
    if (L == 0 || L >= m.cfg.layers) {
        throw ShapeError("backbone: insertion layer " + std::to_string(L) + " out of range");
    }
    Tensor x = rows;
    if (slot_states) {
        slot_states->clear();
        slot_states->push_back(x); // H^L: the raw inserted rows
        std::vector<Tensor> states;
        run_blocks_fast(m, cache, x, L, &states);
        for (Tensor& s : states) slot_states->push_back(std::move(s));
    } else {
        run_blocks_fast(m, cache, x, L, nullptr);
    }
    return x;
}

Tensor logits_for_row(const BackboneModel& m, const Tensor& states, std::size_t row) {
    Tensor one(1, m.cfg.dim);
    std::copy(states.data() + row * m.cfg.dim, states.data() + (row + 1) * m.cfg.dim, one.data());
    Tensor ln(1, m.cfg.dim);
    layer_norm_rows(one, m.lnf_g, m.lnf_b, m.cfg.ln_eps, ln);
    Tensor logits(1, m.cfg.vocab);
    for (std::size_t j = 0; j < m.cfg.vocab; ++j) logits[j] = 0.0;
    for (std::size_t c = 0; c < m.cfg.dim; ++c) {
        const double xv = ln[c];
        if (xv == 0.0) continue;
        const double* wr = m.unembed.data() + c * m.cfg.vocab;
        for (std::size_t j = 0; j < m.cfg.vocab; ++j) logits[j] += xv * wr[j];
    }
    return logits;
}

Tensor forward_prefix(const BackboneModel& m, const std::vector<int>& toks, std::size_t L) {
    if (L == 0 || L >= m.cfg.layers) {
        throw ShapeError("backbone: prefix layer " + std::to_string(L) + " out of range (0, " +
                         std::to_string(m.cfg.layers) + ")");
    }
    if (toks.empty()) throw ShapeError("backbone: empty prefix");
    KvCache cache(m);
    Tensor tap;
    process_tokens(m, cache, toks, 0, L, &tap);
    return tap;
}

std::vector<Tensor> forward_all_states(const BackboneModel& m, const std::vector<int>& toks) {
    KvCache cache(m);
    Tensor x = embed_fast(m, toks, 0);
    std::vector<Tensor> states{x};
    run_blocks_fast(m, cache, x, 0, &states);
    return states;
}

InsertionResult forward_with_insertion(const BackboneModel& m, const Tensor& h_query,
                                       const Tensor& units, std::size_t L) {
    if (!units.empty() && units.cols() != m.cfg.dim) {
        throw ShapeError("backbone: unit width " + std::to_string(units.cols()) + " != dim " +
                         std::to_string(m.cfg.dim));
    }
    const std::size_t tq = h_query.rows(), k = units.rows();
    Tensor x(tq + k, m.cfg.dim);
    std::copy(h_query.data(), h_query.data() + h_query.size(), x.data());
    if (k > 0) std::copy(units.data(), units.data() + units.size(), x.data() + h_query.size());

    KvCache cache(m);
    std::vector<Tensor> all_states;
    process_inserted_rows(m, cache, x, L, &all_states);

    InsertionResult res;
    for (const Tensor& s : all_states) {
        Tensor slot(k, m.cfg.dim);
        std::copy(s.data() + tq * m.cfg.dim, s.data() + (tq + k) * m.cfg.dim, slot.data());
        res.slot_states.push_back(std::move(slot));
    }
    res.logits = logits_for_row(m, all_states.back(), tq + k - 1);
    return res;
}

namespace {

std::vector<int> decode_impl(const BackboneModel& m, const std::vector<int>& prompt,
                             const Tensor& units, std::size_t L, std::size_t max_new,
                             std::vector<Tensor>* step_logits, bool cached) {
    if (prompt.empty()) throw ShapeError("decode: empty prompt");
    if (step_logits) step_logits->clear();
    std::vector<int> out;
    if (max_new == 0) return out;
    // Generated tokens take position ids continuing after the prompt; unit
    // rows occupy attention slots but consume no position embeddings.
    const std::size_t budget =
        std::min(max_new, m.cfg.max_seq > prompt.size() ? m.cfg.max_seq - prompt.size() : 0);

    if (cached) {
        KvCache cache(m);
        Tensor states = process_tokens(m, cache, prompt, 0);
        Tensor last_logits;
        if (units.rows() > 0) {
            Tensor ustates = process_inserted_rows(m, cache, units, L);
            last_logits = logits_for_row(m, ustates, ustates.rows() - 1);
        } else {
            last_logits = logits_for_row(m, states, states.rows() - 1);
        }
        while (out.size() < budget) {
            if (step_logits) step_logits->push_back(last_logits);
            const int tok =
                static_cast<int>(argmax_row(last_logits.data(), last_logits.cols()));
            if (tok == vocab::EOS) break;
            out.push_back(tok);
            if (out.size() == budget) break;
            Tensor s = process_tokens(m, cache, {tok}, prompt.size() + out.size() - 1);
            last_logits = logits_for_row(m, s, 0);
        }
        return out;
    }

    // Uncached dual path: rebuild everything for every generated token.
    while (out.size() < budget) {
        KvCache cache(m);
        const Tensor pstates = process_tokens(m, cache, prompt, 0);
        Tensor logits;
        if (units.rows() > 0) {
            const Tensor ustates = process_inserted_rows(m, cache, units, L);
            if (out.empty()) logits = logits_for_row(m, ustates, ustates.rows() - 1);
        } else if (out.empty()) {
            logits = logits_for_row(m, pstates, pstates.rows() - 1);
        }
        if (!out.empty()) {
            const Tensor gstates = process_tokens(m, cache, out, prompt.size());
            logits = logits_for_row(m, gstates, gstates.rows() - 1);
        }
        if (step_logits) step_logits->push_back(logits);
        const int tok = static_cast<int>(argmax_row(logits.data(), logits.cols()));
        if (tok == vocab::EOS) break;
        out.push_back(tok);
    }
    return out;
}

} // namespace

std::vector<int> decode_with_cache(const BackboneModel& m, const std::vector<int>& prompt,
                                   const Tensor& units, std::size_t L, std::size_t max_new,
                                   std::vector<Tensor>* step_logits) {
    return decode_impl(m, prompt, units, L, max_new, step_logits, true);
}

std::vector<int> decode_uncached(const BackboneModel& m, const std::vector<int>& prompt,
                                 const Tensor& units, std::size_t L, std::size_t max_new,
                                 std::vector<Tensor>* step_logits) {
    return decode_impl(m, prompt, units, L, max_new, step_logits, false);
}

// ---- tape forward -----------------------------------------------------------------------

TapeBackbone bind(nd::Graph& g, const BackboneModel& m, bool trainable) {
    TapeBackbone tb;
    tb.model = &m;
    for (const Tensor* t : m.param_list()) {
        tb.ids.push_back(trainable ? g.param(*t) : g.constant(*t));
    }
    return tb;
}

nd::NodeId TapeBackbone::id_of(const Tensor* p) const {
    const auto params = model->param_list();
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i] == p) return ids[i];
    }
    throw ShapeError("TapeBackbone: unknown parameter");
}

namespace {

struct TapeLayerIds {
    nd::NodeId ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

TapeLayerIds layer_ids(const TapeBackbone& tb, std::size_t l) {
    const std::size_t base = 2 + l * 16;
    const auto& v = tb.ids;
    return {v[base],     v[base + 1], v[base + 2],  v[base + 3],  v[base + 4],  v[base + 5],
            v[base + 6], v[base + 7], v[base + 8],  v[base + 9],  v[base + 10], v[base + 11],
            v[base + 12], v[base + 13], v[base + 14], v[base + 15]};
}

Tensor causal_mask(std::size_t n) {
    Tensor mask(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) mask.at(i, j) = kMaskNegInf;
    return mask;
}

} // namespace

nd::NodeId embed_tape(nd::Graph& g, const TapeBackbone& tb, const std::vector<int>& toks,
                      std::size_t pos_start) {
    const BackboneModel& m = *tb.model;
    if (pos_start + toks.size() > m.cfg.max_seq) {
        throw ShapeError("backbone: sequence exceeds max positions");
    }
    std::vector<int> pos_ids(toks.size());
    for (std::size_t i = 0; i < toks.size(); ++i) pos_ids[i] = static_cast<int>(pos_start + i);
    const nd::NodeId te = g.embedding(tb.ids[0], toks);
    const nd::NodeId pe = g.embedding(tb.ids[1], pos_ids);
    return g.add(te, pe);
}

nd::NodeId continue_blocks_tape(nd::Graph& g, const TapeBackbone& tb, nd::NodeId x,
                                std::size_t first_block, std::vector<nd::NodeId>* taps) {
    const BackboneModel& m = *tb.model;
    const std::size_t C = m.cfg.dim, H = m.cfg.heads, d = m.cfg.head_dim();
    const std::size_t n = g.value(x).rows();
    const nd::NodeId mask = g.constant(causal_mask(n));
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    for (std::size_t b = first_block; b < m.cfg.layers; ++b) {
        const TapeLayerIds p = layer_ids(tb, b);
        const nd::NodeId xln = g.layer_norm(x, p.ln1_g, p.ln1_b, m.cfg.ln_eps);
        const nd::NodeId q = g.add(g.matmul(xln, p.wq), p.bq);
        const nd::NodeId k = g.add(g.matmul(xln, p.wk), p.bk);
        const nd::NodeId v = g.add(g.matmul(xln, p.wv), p.bv);

        std::vector<nd::NodeId> head_outs;
        for (std::size_t h = 0; h < H; ++h) {
            const nd::NodeId qh = g.slice_cols(q, h * d, d);
            const nd::NodeId kh = g.slice_cols(k, h * d, d);
            const nd::NodeId vh = g.slice_cols(v, h * d, d);
            nd::NodeId scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt_d);
            scores = g.add(scores, mask);
            const nd::NodeId probs = g.softmax_rows(scores);
            head_outs.push_back(g.transpose(g.matmul(probs, vh))); // d x n
        }
        const nd::NodeId merged = g.transpose(g.concat_rows(head_outs)); // n x C
        const nd::NodeId attn = g.add(g.matmul(merged, p.wo), p.bo);
        x = g.add(x, attn);

        const nd::NodeId xln2 = g.layer_norm(x, p.ln2_g, p.ln2_b, m.cfg.ln_eps);
        const nd::NodeId h1 = g.gelu(g.add(g.matmul(xln2, p.w1), p.b1));
        const nd::NodeId mlp = g.add(g.matmul(h1, p.w2), p.b2);
        x = g.add(x, mlp);
        if (taps) taps->push_back(x);
    }
    (void)C;
    (void)n;
    return x;
}

nd::NodeId logits_tape(nd::Graph& g, const TapeBackbone& tb, nd::NodeId states) {
    const std::size_t nparams = tb.ids.size();
    const nd::NodeId lnf_g = tb.ids[nparams - 3];
    const nd::NodeId lnf_b = tb.ids[nparams - 2];
    const nd::NodeId unembed = tb.ids[nparams - 1];
    const nd::NodeId ln = g.layer_norm(states, lnf_g, lnf_b, tb.model->cfg.ln_eps);
    return g.matmul(ln, unembed);
}

nd::NodeId lm_loss_tape(nd::Graph& g, const TapeBackbone& tb, const tasks::PretrainSeq& seq) {
    const std::size_t T = seq.tokens.size();
    if (T < 2) throw ShapeError("lm_loss: sequence too short");
    const nd::NodeId x0 = embed_tape(g, tb, seq.tokens, 0);
    const nd::NodeId xN = continue_blocks_tape(g, tb, x0, 0);
    const nd::NodeId pred_rows = g.slice_rows(xN, 0, T - 1);
    const nd::NodeId logits = logits_tape(g, tb, pred_rows);
    const std::vector<int> targets(seq.tokens.begin() + 1, seq.tokens.end());
    return g.cross_entropy_logits(logits, targets, seq.loss_weights);
}

// ---- pretraining ---------------------------------------------------------------------------

HeldoutMetrics teacher_forced_metrics(const BackboneModel& m,
                                      const std::vector<tasks::PretrainSeq>& seqs) {
    std::size_t fmt_hit = 0, fmt_total = 0, w_hit = 0, w_total = 0;
    for (const auto& seq : seqs) {
        const std::vector<Tensor> states = forward_all_states(m, seq.tokens);
        const Tensor& final_states = states.back();
        for (std::size_t t = 0; t + 1 < seq.tokens.size(); ++t) {
            if (seq.loss_weights[t] == 0.0) continue;
            const Tensor logits = logits_for_row(m, final_states, t);
            const int pred = static_cast<int>(argmax_row(logits.data(), logits.cols()));
            const bool hit = pred == seq.tokens[t + 1];
            ++w_total;
            w_hit += hit ? 1 : 0;
            if (seq.format_target[t]) {
                ++fmt_total;
                fmt_hit += hit ? 1 : 0;
            }
        }
    }
    HeldoutMetrics out;
    out.format_accuracy = fmt_total ? static_cast<double>(fmt_hit) / fmt_total : 0.0;
    out.weighted_accuracy = w_total ? static_cast<double>(w_hit) / w_total : 0.0;
    return out;
}

BackboneModel pretrain_backbone(const tasks::PretrainCorpus& corpus, const PretrainConfig& cfg,
                                PretrainReport* report) {
    if (corpus.train.empty()) throw ConfigError("pretrain: empty corpus");
    BackboneModel m = BackboneModel::init(cfg.arch, cfg.seed);
    Rng rng(cfg.seed ^ 0x73687566ULL);

    std::vector<std::size_t> order(corpus.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::size_t cursor = 0;

    PretrainReport local;
    PretrainReport& rep = report ? *report : local;

    Adam adam(cfg.lr);
    const auto params = m.param_list();
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        nd::Graph g;
        const TapeBackbone tb = bind(g, m, true);
        nd::NodeId total = g.constant(Tensor::scalar(0.0));
        for (std::size_t bi = 0; bi < cfg.batch; ++bi) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            total = g.add(total, lm_loss_tape(g, tb, corpus.train[order[cursor++]]));
        }
        nd::NodeId loss;
        double loss_value;
        try {
            loss = g.scale(total, 1.0 / static_cast<double>(cfg.batch));
            loss_value = g.value(loss).item();
            g.backward(loss);
        } catch (const NumericError& e) {
            throw NumericError("pretrain diverged at step " + std::to_string(step) + ": " +
                               e.what());
        }
        rep.losses.push_back(loss_value);
        std::vector<Tensor> grads;
        grads.reserve(tb.ids.size());
        for (nd::NodeId id : tb.ids) grads.push_back(g.grad(id));
        const double ramp =
            cfg.warmup_steps > 0
                ? std::min(1.0, static_cast<double>(step + 1) /
                                    static_cast<double>(cfg.warmup_steps))
                : 1.0;
        adam.set_lr(cfg.lr * ramp);
        adam.step(params, grads);
        ++rep.steps_run;
    }

    rep.final_metrics = teacher_forced_metrics(m, corpus.heldout);
    if (rep.final_metrics.format_accuracy < cfg.accuracy_floor) {
        throw Error("pretrain: held-out format accuracy " +
                    std::to_string(rep.final_metrics.format_accuracy) +
                    " below the configured floor " + std::to_string(cfg.accuracy_floor));
    }
    m.frozen = true;
    return m;
}

} // namespace mrlab::backbone
