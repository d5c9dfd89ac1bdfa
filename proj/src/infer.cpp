#include "mrlab/infer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <json.hpp>

#include "mrlab/error.hpp"
#include "mrlab/rng.hpp"
#include "mrlab/vocab.hpp"

using ordered_json = nlohmann::ordered_json;

namespace mrlab::infer {

namespace vc = mrlab::vocab;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::size_t argmax(const Tensor& row) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < row.size(); ++i) {
        if (row[i] > row[best]) best = i;
    }
    return best;
}

} // namespace

// ---- engine -----------------------------------------------------------------------------

Engine::Engine(const backbone::BackboneModel& model, const codebook::Codebook& cb)
    : model_(model), cb_(cb), f_of_p_(codebook::apply_mlp(cb.f, cb.P)) {
    if (cb_.cfg.C != model_.cfg.dim) {
        throw ConfigError("engine: codebook width " + std::to_string(cb_.cfg.C) +
                          " does not match backbone dim " + std::to_string(model_.cfg.dim));
    }
    if (cb_.cfg.L == 0 || cb_.cfg.L >= model_.cfg.layers) {
        throw ConfigError("engine: insertion layer " + std::to_string(cb_.cfg.L) +
                          " out of range");
    }
}

std::vector<int> Engine::answer(const tasks::TaskInstance& x, InferenceTrace* trace,
                                std::size_t max_new) const {
    const std::size_t L = cb_.cfg.L;
    const std::vector<int> prompt = vc::make_prompt(x.question, {});

    const auto t_start = Clock::now();
    backbone::KvCache cache(model_);
    Tensor h_query;
    backbone::process_tokens(model_, cache, prompt, 0, L, &h_query);

    // The single retrieval pass: pool, score against the cached f(P), hard
    // top-k of the noiseless scores.
    const auto t_retrieval = Clock::now();
    const Tensor h = codebook::pool_query(h_query);
    const Tensor s = codebook::score_cached(cb_, h, f_of_p_);
    const codebook::Selection sel = codebook::select_topk(s, cb_.cfg.k, cb_.P);
    const double retrieval_seconds = seconds_since(t_retrieval);

    const Tensor ustates = backbone::process_inserted_rows(model_, cache,
                                                           sel.rows, L);
    Tensor logits = backbone::logits_for_row(model_, ustates, ustates.rows() - 1);
    const double first_token_seconds = seconds_since(t_start);

    std::vector<int> out;
    const std::size_t budget =
        std::min(max_new, model_.cfg.max_seq > prompt.size() ? model_.cfg.max_seq - prompt.size()
                                                             : 0);
    while (out.size() < budget) {
        const int tok = static_cast<int>(argmax(logits));
        if (tok == vc::EOS) break;
        out.push_back(tok);
        if (out.size() == budget) break;
        const Tensor s2 = backbone::process_tokens(model_, cache, {tok},
                                                   prompt.size() + out.size() - 1);
        logits = backbone::logits_for_row(model_, s2, 0);
    }

    if (trace) {
        trace->question_id = x.id;
        trace->selection.query_id = x.id;
        trace->selection.indices = sel.indices;
        trace->selection.scores.assign(s.data(), s.data() + s.size());
        trace->generated = out;
        trace->retrieval_count = 1;
        trace->retrieval_seconds = retrieval_seconds;
        trace->first_token_seconds = first_token_seconds;
        trace->decode_seconds = seconds_since(t_start);
    }
    return out;
}

// ---- RAG baseline --------------------------------------------------------------------------

RagStore build_rag_store(const backbone::BackboneModel& model,
                         const std::vector<reflectgen::ReflectionTriple>& triples,
                         std::size_t L) {
    if (triples.empty()) throw ConfigError("rag store: empty dataset");
    RagStore store;
    store.L = L;
    store.embeddings = Tensor(triples.size(), model.cfg.dim);
    for (std::size_t i = 0; i < triples.size(); ++i) {
        const std::vector<int> prompt = vc::make_prompt(triples[i].question, {});
        const Tensor pooled = codebook::pool_query(backbone::forward_prefix(model, prompt, L));
        std::copy(pooled.data(), pooled.data() + pooled.size(),
                  store.embeddings.data() + i * model.cfg.dim);
        store.reflections.push_back(triples[i].reflection);
        store.source_ids.push_back(triples[i].id);
    }
    return store;
}

std::vector<int> rag_answer(const backbone::BackboneModel& model, const RagStore& store,
                            const tasks::TaskInstance& x, std::size_t L, std::size_t max_new,
                            std::size_t* retrieved_index) {
    if (store.reflections.size() < store.min_size) {
        return zero_shot_answer(model, x, max_new);
    }
    const std::vector<int> prompt = vc::make_prompt(x.question, {});
    const Tensor q = codebook::pool_query(backbone::forward_prefix(model, prompt, L));

    double qn = 0.0;
    for (std::size_t c = 0; c < q.size(); ++c) qn += q[c] * q[c];
    qn = std::sqrt(qn);

    std::size_t best = 0;
    double best_cos = -2.0;
    for (std::size_t i = 0; i < store.reflections.size(); ++i) {
        double dot = 0.0, norm = 0.0;
        const double* row = store.embeddings.data() + i * q.size();
        for (std::size_t c = 0; c < q.size(); ++c) {
            dot += q[c] * row[c];
            norm += row[c] * row[c];
        }
        norm = std::sqrt(norm);
        const double cos = (qn == 0.0 || norm == 0.0) ? 0.0 : dot / (qn * norm);
        if (cos > best_cos) {
            best_cos = cos;
            best = i;
        }
    }
    if (retrieved_index) *retrieved_index = best;
    const std::vector<int> hinted = vc::make_prompt(x.question, store.reflections[best]);
    return backbone::decode_with_cache(model, hinted, Tensor(0, model.cfg.dim), 1, max_new);
}

std::vector<int> zero_shot_answer(const backbone::BackboneModel& model,
                                  const tasks::TaskInstance& x, std::size_t max_new) {
    const std::vector<int> prompt = vc::make_prompt(x.question, {});
    return backbone::decode_with_cache(model, prompt, Tensor(0, model.cfg.dim), 1, max_new);
}

// ---- evaluation -------------------------------------------------------------------------------

EvalSummary evaluate_split(const backbone::BackboneModel& model, const tasks::TaskCorpus& corpus,
                           const std::vector<tasks::TaskInstance>& split, EvalMode mode,
                           const Engine* engine, const RagStore* store, std::size_t max_new) {
    if (mode == EvalMode::codebook && !engine) throw ConfigError("eval: engine required");
    if (mode == EvalMode::rag && !store) throw ConfigError("eval: rag store required");

    EvalSummary summary;
    summary.mode = mode;
    summary.total = split.size();
    for (const tasks::TaskInstance& x : split) {
        std::vector<int> produced;
        switch (mode) {
        case EvalMode::zero_shot:
            produced = zero_shot_answer(model, x, max_new);
            break;
        case EvalMode::oracle_hint: {
            const auto hint = tasks::oracle_hint(corpus.families[x.family], std::nullopt);
            const auto prompt = vc::make_prompt(x.question, hint);
            produced = backbone::decode_with_cache(model, prompt, Tensor(0, model.cfg.dim), 1,
                                                   max_new);
            break;
        }
        case EvalMode::codebook: {
            InferenceTrace trace;
            produced = engine->answer(x, &trace, max_new);
            summary.traces.push_back(std::move(trace));
            break;
        }
        case EvalMode::rag:
            produced = rag_answer(model, *store, x, store->L, max_new);
            break;
        }
        if (tasks::grade(x, produced)) ++summary.passed;
    }
    summary.accuracy =
        summary.total ? static_cast<double>(summary.passed) / summary.total : 0.0;
    return summary;
}

// ---- statistics --------------------------------------------------------------------------------

std::vector<std::size_t> selection_histogram(const std::vector<InferenceTrace>& traces,
                                             std::size_t K) {
    if (traces.empty()) throw ConfigError("histogram: no traces");
    std::vector<std::size_t> counts(K, 0);
    for (const auto& trace : traces) {
        for (std::size_t idx : trace.selection.indices) {
            if (idx >= K) throw ShapeError("histogram: unit index out of range");
            ++counts[idx];
        }
    }
    return counts;
}

std::string histogram_to_csv(const std::vector<std::size_t>& counts) {
    std::string out = "unit_index,count\n";
    for (std::size_t i = 0; i < counts.size(); ++i) {
        out += std::to_string(i) + "," + std::to_string(counts[i]) + "\n";
    }
    return out;
}

std::vector<double> unit_feature_projection(const Tensor& P) {
    const std::size_t K = P.rows(), C = P.cols();
    if (K == 0) throw ShapeError("feature projection: empty codebook");
    std::vector<double> mean(C, 0.0);
    for (std::size_t i = 0; i < K; ++i)
        for (std::size_t c = 0; c < C; ++c) mean[c] += P.at(i, c);
    for (double& v : mean) v /= static_cast<double>(K);

    // Leading principal direction by power iteration on the centered rows.
    Rng rng(17);
    std::vector<double> v(C);
    for (double& x : v) x = rng.normal();
    std::vector<double> w(C);
    for (int iter = 0; iter < 64; ++iter) {
        std::fill(w.begin(), w.end(), 0.0);
        for (std::size_t i = 0; i < K; ++i) {
            double proj = 0.0;
            for (std::size_t c = 0; c < C; ++c) proj += (P.at(i, c) - mean[c]) * v[c];
            for (std::size_t c = 0; c < C; ++c) w[c] += proj * (P.at(i, c) - mean[c]);
        }
        double norm = 0.0;
        for (double x : w) norm += x * x;
        norm = std::sqrt(norm);
        if (norm == 0.0) break;
        for (std::size_t c = 0; c < C; ++c) v[c] = w[c] / norm;
    }

    std::vector<double> features(K);
    double lo = 1e300, hi = -1e300;
    for (std::size_t i = 0; i < K; ++i) {
        double proj = 0.0;
        for (std::size_t c = 0; c < C; ++c) proj += (P.at(i, c) - mean[c]) * v[c];
        features[i] = proj;
        lo = std::min(lo, proj);
        hi = std::max(hi, proj);
    }
    const double span = hi - lo;
    for (double& f : features) f = span > 0.0 ? (f - lo) / span : 0.5;
    return features;
}

std::string features_to_csv(const std::vector<double>& features) {
    std::string out = "unit_index,feature\n";
    char buf[64];
    for (std::size_t i = 0; i < features.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, features[i]);
        out += buf;
    }
    return out;
}

// ---- latency -----------------------------------------------------------------------------------

LatencyReport bench_latency(const Engine& engine, const std::vector<tasks::TaskInstance>& queries,
                            std::size_t warmup) {
    if (queries.empty()) throw ConfigError("bench: no queries");
    for (std::size_t i = 0; i < std::min(warmup, queries.size()); ++i) {
        engine.answer(queries[i]);
    }
    std::vector<double> retrieval, first_token;
    for (const auto& q : queries) {
        InferenceTrace trace;
        engine.answer(q, &trace);
        retrieval.push_back(trace.retrieval_seconds);
        first_token.push_back(trace.first_token_seconds);
    }
    const auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    LatencyReport report;
    report.queries = queries.size();
    report.median_retrieval_seconds = median(retrieval);
    report.median_first_token_seconds = median(first_token);
    report.retrieval_fraction = report.median_first_token_seconds > 0.0
                                    ? report.median_retrieval_seconds /
                                          report.median_first_token_seconds
                                    : 0.0;
    return report;
}

std::string latency_to_json(const LatencyReport& report) {
    ordered_json j;
    j["queries"] = report.queries;
    j["median_retrieval_seconds"] = report.median_retrieval_seconds;
    j["median_first_token_seconds"] = report.median_first_token_seconds;
    j["retrieval_fraction"] = report.retrieval_fraction;
    return j.dump(2) + "\n";
}

} // namespace mrlab::infer
