#include "mrlab/train.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "mrlab/error.hpp"
#include "mrlab/optim.hpp"
#include "mrlab/ot.hpp"
#include "mrlab/rng.hpp"
#include "mrlab/sampling.hpp"
#include "mrlab/vocab.hpp"

using ordered_json = nlohmann::ordered_json;

namespace mrlab::train {

namespace vc = mrlab::vocab;

// ---- config ------------------------------------------------------------------------

std::size_t TrainConfig::insertion_layer(std::size_t n_layers) const {
    if (L_from_last == 0 || L_from_last >= n_layers) {
        throw ConfigError("train: insertion offset " + std::to_string(L_from_last) +
                          " out of range for " + std::to_string(n_layers) + " layers");
    }
    return n_layers - L_from_last;
}

std::string TrainConfig::to_json() const {
    ordered_json j;
    j["phase1_epochs"] = phase1_epochs;
    j["phase1_lr"] = phase1_lr;
    j["phase2_epochs"] = phase2_epochs;
    j["phase2_lr"] = phase2_lr;
    j["batch"] = batch;
    j["lambda"] = lambda;
    j["sinkhorn_iters"] = sinkhorn_iters;
    j["K"] = K;
    j["k"] = k;
    j["L_from_last"] = L_from_last;
    j["seed"] = seed;
    j["gumbel_phase1"] = gumbel_phase1;
    j["gumbel_phase2"] = gumbel_phase2;
    j["gumbel_temperature"] = gumbel_temperature;
    j["align_include_boundary_layer"] = align_include_boundary_layer;
    j["phase1_token_loss"] = phase1_token_loss;
    return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& json) {
    const ordered_json j = ordered_json::parse(json);
    TrainConfig cfg;
    cfg.phase1_epochs = j.at("phase1_epochs").get<std::size_t>();
    cfg.phase1_lr = j.at("phase1_lr").get<double>();
    cfg.phase2_epochs = j.at("phase2_epochs").get<std::size_t>();
    cfg.phase2_lr = j.at("phase2_lr").get<double>();
    cfg.batch = j.at("batch").get<std::size_t>();
    cfg.lambda = j.at("lambda").get<double>();
    cfg.sinkhorn_iters = j.at("sinkhorn_iters").get<std::size_t>();
    cfg.K = j.at("K").get<std::size_t>();
    cfg.k = j.at("k").get<std::size_t>();
    cfg.L_from_last = j.at("L_from_last").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.gumbel_phase1 = j.at("gumbel_phase1").get<bool>();
    cfg.gumbel_phase2 = j.at("gumbel_phase2").get<bool>();
    cfg.gumbel_temperature = j.at("gumbel_temperature").get<double>();
    cfg.align_include_boundary_layer = j.at("align_include_boundary_layer").get<bool>();
    cfg.phase1_token_loss = j.at("phase1_token_loss").get<bool>();
    return cfg;
}

// ---- teacher ------------------------------------------------------------------------

TeacherStates teacher_hiddens(const backbone::BackboneModel& m, const std::vector<int>& question,
                              const std::vector<int>& reflection, std::size_t L) {
    if (reflection.empty()) throw ShapeError("teacher_hiddens: empty reflection");
    if (L == 0 || L >= m.cfg.layers) {
        throw ShapeError("teacher_hiddens: layer " + std::to_string(L) + " out of range");
    }
    const std::vector<int> prompt = vc::make_prompt(question, reflection);
    const vc::Span span = vc::hint_span(question, reflection);
    if (span.start + span.len > prompt.size()) {
        throw ShapeError("teacher_hiddens: reflection span out of range");
    }
    const std::vector<Tensor> states = backbone::forward_all_states(m, prompt);

    TeacherStates out;
    for (std::size_t l = L; l <= m.cfg.layers; ++l) {
        const Tensor& s = states[l];
        Tensor ref(span.len, m.cfg.dim);
        std::copy(s.data() + span.start * m.cfg.dim,
                  s.data() + (span.start + span.len) * m.cfg.dim, ref.data());
        Tensor que(span.start, m.cfg.dim);
        std::copy(s.data(), s.data() + span.start * m.cfg.dim, que.data());
        out.reflection.push_back(std::move(ref));
        out.query.push_back(std::move(que));
    }
    return out;
}

// ---- shared step machinery --------------------------------------------------------------

namespace {

struct TripleCache {
    Tensor h_query_prompt;           // layer-L states of the plain prompt
    std::vector<Tensor> teacher_ref; // reflection-side states, layers L..N
    Tensor h_query_with_answer;      // layer-L states of [prompt; answer] rows
    std::size_t prompt_rows = 0;
};

TripleCache build_cache(const backbone::BackboneModel& m, const reflectgen::ReflectionTriple& t,
                        std::size_t L) {
    TripleCache cache;
    const std::vector<int> prompt = vc::make_prompt(t.question, {});
    cache.prompt_rows = prompt.size();
    cache.h_query_prompt = backbone::forward_prefix(m, prompt, L);
    cache.teacher_ref = teacher_hiddens(m, t.question, t.reflection, L).reflection;

    std::vector<int> with_answer = prompt;
    with_answer.insert(with_answer.end(), t.answer.begin(), t.answer.end());
    cache.h_query_with_answer = backbone::forward_prefix(m, with_answer, L);
    return cache;
}

struct ExamplePath {
    nd::NodeId gated_rows; // k x C inserted units
    nd::NodeId score;      // 1 x K
};

// Pool, score, perturb, select, gate: the shared retrieval path of both
// phases on the tape. `fp` is the per-batch f(P) node.
ExamplePath retrieval_path(nd::Graph& g, const codebook::TapeCodebook& tcb, nd::NodeId fp,
                           const Tensor& h_query, const TrainConfig& cfg, bool gumbel_on,
                           std::uint64_t noise_stream, std::size_t* clamp_count) {
    const nd::NodeId hq = g.constant(h_query);
    const nd::NodeId h = codebook::pool_query_tape(g, hq);
    const nd::NodeId gh = codebook::apply_mlp_tape(g, tcb.g_w1, tcb.g_b1, tcb.g_w2, tcb.g_b2, h);
    const nd::NodeId logits =
        g.scale(g.matmul(gh, g.transpose(fp)), 1.0 / std::sqrt(static_cast<double>(cfg.K)));
    const nd::NodeId s = g.softmax_rows(logits);

    const Tensor eps = gumbel_on ? sampling::gumbel_noise(noise_stream, cfg.K)
                                 : Tensor(1, cfg.K, 0.0);
    const nd::NodeId s_hat =
        sampling::perturbed_scores(g, s, eps, cfg.gumbel_temperature, clamp_count);
    const nd::NodeId indicator = sampling::straight_through_topk(g, s_hat, cfg.k);
    const sampling::GatedUnits gated = sampling::gate_units(g, tcb.P, indicator, cfg.k);
    return {gated.rows, s};
}

double scoring_grad_norm(nd::Graph& g, const codebook::TapeCodebook& tcb) {
    double sq = 0.0;
    for (std::size_t i = 1; i < tcb.all.size(); ++i) { // all but P
        const Tensor grad = g.grad(tcb.all[i]);
        for (std::size_t e = 0; e < grad.size(); ++e) sq += grad[e] * grad[e];
    }
    return std::sqrt(sq);
}

void finish_phase(PhaseResult& result) {
    const std::size_t n = result.trace.size();
    if (n == 0) return;
    // Window 50, shrunk so the start and end windows never overlap.
    const std::size_t w = std::min<std::size_t>(50, std::max<std::size_t>(1, n / 2));
    double start = 0.0, end = 0.0;
    for (std::size_t i = 0; i < w; ++i) {
        start += result.trace[i].loss;
        end += result.trace[n - w + i].loss;
    }
    result.start_ma = start / static_cast<double>(w);
    result.end_ma = end / static_cast<double>(w);
    std::size_t live = 0;
    for (const auto& rec : result.trace) {
        if (rec.scoring_grad_norm > 0.0) ++live;
    }
    result.scoring_grad_live_fraction = static_cast<double>(live) / static_cast<double>(n);
}

using LossBuilderFn = std::function<nd::NodeId(nd::Graph&, const codebook::TapeCodebook&,
                                               const backbone::TapeBackbone&, nd::NodeId fp,
                                               std::size_t example_index, std::uint64_t stream)>;

PhaseResult run_phase(const backbone::BackboneModel& m, codebook::Codebook& cb,
                      const std::vector<reflectgen::ReflectionTriple>& triples,
                      const TrainConfig& cfg, int phase, double lr, std::size_t epochs,
                      const LossBuilderFn& example_loss, RunLog* log) {
    if (triples.empty()) throw ConfigError("train: empty dataset");
    Adam adam(lr);
    Rng rng(cfg.seed ^ (phase == 1 ? 0x70310aULL : 0x70320aULL));

    std::vector<std::size_t> order(triples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    PhaseResult result;
    std::size_t step = 0;
    const auto cb_params = cb.param_list();
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch, ++step) {
            const std::size_t batch_end = std::min(pos + cfg.batch, order.size());
            nd::Graph g;
            const codebook::TapeCodebook tcb = codebook::bind(g, cb, true);
            const backbone::TapeBackbone tb = backbone::bind(g, m, false);
            const nd::NodeId fp =
                codebook::apply_mlp_tape(g, tcb.f_w1, tcb.f_b1, tcb.f_w2, tcb.f_b2, tcb.P);

            nd::NodeId total = g.constant(Tensor::scalar(0.0));
            std::size_t current = order[pos];
            double loss_value = 0.0;
            try {
                for (std::size_t bi = pos; bi < batch_end; ++bi) {
                    current = order[bi];
                    const std::uint64_t stream =
                        cfg.seed ^ (static_cast<std::uint64_t>(phase) << 56) ^
                        (static_cast<std::uint64_t>(epoch) << 32) ^ current;
                    total = g.add(total, example_loss(g, tcb, tb, fp, current, stream));
                }
                const nd::NodeId loss =
                    g.scale(total, 1.0 / static_cast<double>(batch_end - pos));
                loss_value = g.value(loss).item();
                g.backward(loss);
            } catch (const NumericError& e) {
                throw NumericError("phase " + std::to_string(phase) + " aborted at step " +
                                   std::to_string(step) + ", example " + triples[current].id +
                                   ": " + e.what());
            }

            std::vector<Tensor> grads;
            grads.reserve(tcb.all.size());
            for (nd::NodeId id : tcb.all) grads.push_back(g.grad(id));
            adam.step(cb_params, grads);

            StepRecord rec;
            rec.step = step;
            rec.phase = phase;
            rec.loss = loss_value;
            rec.scoring_grad_norm = scoring_grad_norm(g, tcb);
            result.trace.push_back(rec);
        }
        cb.check_row_norms();
        if (log) {
            log->note("phase " + std::to_string(phase) + " epoch " + std::to_string(epoch + 1) +
                      "/" + std::to_string(epochs) + " done, loss " +
                      std::to_string(result.trace.back().loss));
        }
    }
    finish_phase(result);
    return result;
}

} // namespace

// ---- phase 1: OT alignment ---------------------------------------------------------------

PhaseResult align_phase(const backbone::BackboneModel& m, codebook::Codebook& cb,
                        const std::vector<reflectgen::ReflectionTriple>& triples,
                        const TrainConfig& cfg, RunLog* log) {
    const std::size_t L = cfg.insertion_layer(m.cfg.layers);
    if (cb.cfg.L != L) {
        throw ConfigError("align: codebook insertion layer " + std::to_string(cb.cfg.L) +
                          " does not match config layer " + std::to_string(L));
    }
    std::vector<TripleCache> caches;
    caches.reserve(triples.size());
    for (const auto& t : triples) caches.push_back(build_cache(m, t, L));

    std::size_t clamp_count = 0;
    ot::AlignmentStats ot_stats;

    const LossBuilderFn example_loss = [&](nd::Graph& g, const codebook::TapeCodebook& tcb,
                                           const backbone::TapeBackbone& tb, nd::NodeId fp,
                                           std::size_t idx, std::uint64_t stream) {
        const TripleCache& cache = caches[idx];
        const ExamplePath path = retrieval_path(g, tcb, fp, cache.h_query_prompt, cfg,
                                                cfg.gumbel_phase1, stream, &clamp_count);

        const nd::NodeId x = g.concat_rows({g.constant(cache.h_query_prompt), path.gated_rows});
        std::vector<nd::NodeId> taps;
        continue_blocks_tape(g, tb, x, L, &taps);

        const std::size_t tq = cache.h_query_prompt.rows();
        std::vector<ot::AlignmentPair> pairs;
        if (cfg.align_include_boundary_layer) {
            pairs.push_back({path.gated_rows, cache.teacher_ref[0]});
        }
        for (std::size_t i = 0; i < taps.size(); ++i) {
            pairs.push_back({g.slice_rows(taps[i], tq, cfg.k), cache.teacher_ref[i + 1]});
        }
        nd::NodeId loss =
            ot::alignment_loss_tape(g, pairs, cfg.lambda, cfg.sinkhorn_iters, &ot_stats);
        if (cfg.phase1_token_loss) {
            // Optional ablation: add the supervised token loss on top.
            const TripleCache& c2 = caches[idx];
            const std::size_t m_rows = c2.h_query_with_answer.rows() - tq;
            const nd::NodeId ans =
                g.constant(Tensor(m_rows, m.cfg.dim,
                                  std::vector<double>(c2.h_query_with_answer.data() + tq * m.cfg.dim,
                                                      c2.h_query_with_answer.data() +
                                                          c2.h_query_with_answer.size())));
            const nd::NodeId x2 = g.concat_rows(
                {g.constant(cache.h_query_prompt), path.gated_rows, ans});
            const nd::NodeId xN = continue_blocks_tape(g, tb, x2, L);
            const nd::NodeId rows = g.slice_rows(xN, tq + cfg.k - 1, m_rows + 1);
            std::vector<int> targets = triples[idx].answer;
            targets.push_back(vc::EOS);
            const nd::NodeId ce = g.cross_entropy_logits(
                logits_tape(g, tb, rows), targets, std::vector<double>(targets.size(), 1.0));
            loss = g.add(loss, ce);
        }
        return loss;
    };

    PhaseResult result =
        run_phase(m, cb, triples, cfg, 1, cfg.phase1_lr, cfg.phase1_epochs, example_loss, log);
    if (log) {
        if (clamp_count > 0) {
            log->note("phase 1: clamped " + std::to_string(clamp_count) + " zero scores");
        }
        if (ot_stats.uniform_fallbacks > 0) {
            log->note("phase 1: " + std::to_string(ot_stats.uniform_fallbacks) +
                      " uniform marginal fallbacks");
        }
        if (ot_stats.zero_norm_rows > 0) {
            log->note("phase 1: " + std::to_string(ot_stats.zero_norm_rows) +
                      " zero-norm rows in cost matrices");
        }
    }
    return result;
}

// ---- phase 2: supervised fine-tuning --------------------------------------------------------

PhaseResult sft_phase(const backbone::BackboneModel& m, codebook::Codebook& cb,
                      const std::vector<reflectgen::ReflectionTriple>& triples,
                      const TrainConfig& cfg, RunLog* log) {
    const std::size_t L = cfg.insertion_layer(m.cfg.layers);
    std::vector<TripleCache> caches;
    caches.reserve(triples.size());
    for (const auto& t : triples) caches.push_back(build_cache(m, t, L));

    std::size_t clamp_count = 0;
    const LossBuilderFn example_loss = [&](nd::Graph& g, const codebook::TapeCodebook& tcb,
                                           const backbone::TapeBackbone& tb, nd::NodeId fp,
                                           std::size_t idx, std::uint64_t stream) {
        const TripleCache& cache = caches[idx];
        const ExamplePath path = retrieval_path(g, tcb, fp, cache.h_query_prompt, cfg,
                                                cfg.gumbel_phase2, stream, &clamp_count);
        const std::size_t tq = cache.prompt_rows;
        const std::size_t m_rows = cache.h_query_with_answer.rows() - tq;

        Tensor answer_states(m_rows, m.cfg.dim);
        std::copy(cache.h_query_with_answer.data() + tq * m.cfg.dim,
                  cache.h_query_with_answer.data() + cache.h_query_with_answer.size(),
                  answer_states.data());

        const nd::NodeId x = g.concat_rows({g.constant(cache.h_query_prompt), path.gated_rows,
                                            g.constant(answer_states)});
        const nd::NodeId xN = continue_blocks_tape(g, tb, x, L);
        // Row tq+k-1 (the last unit) predicts the first answer token; each
        // answer row predicts its successor, ending at <eos>.
        const nd::NodeId rows = g.slice_rows(xN, tq + cfg.k - 1, m_rows + 1);
        const nd::NodeId logits = logits_tape(g, tb, rows);
        std::vector<int> targets = triples[idx].answer;
        targets.push_back(vc::EOS);
        return g.cross_entropy_logits(logits, targets,
                                      std::vector<double>(targets.size(), 1.0));
    };

    PhaseResult result =
        run_phase(m, cb, triples, cfg, 2, cfg.phase2_lr, cfg.phase2_epochs, example_loss, log);
    if (log && clamp_count > 0) {
        log->note("phase 2: clamped " + std::to_string(clamp_count) + " zero scores");
    }
    return result;
}

// ---- orchestration ----------------------------------------------------------------------------

TrainOutcome run_training(const backbone::BackboneModel& m,
                          const std::vector<reflectgen::ReflectionTriple>& triples,
                          const TrainConfig& cfg, RunLog* log) {
    if (!m.frozen) throw ConfigError("train: backbone must be frozen");
    codebook::CodebookConfig ccfg;
    ccfg.K = cfg.K;
    ccfg.k = cfg.k;
    ccfg.C = m.cfg.dim;
    ccfg.L = cfg.insertion_layer(m.cfg.layers);

    TrainOutcome out;
    out.backbone_checksum_before = m.checksum();
    out.cb = codebook::Codebook::init(ccfg, cfg.seed);
    out.phase1 = align_phase(m, out.cb, triples, cfg, log);
    out.phase2 = sft_phase(m, out.cb, triples, cfg, log);
    out.backbone_checksum_after = m.checksum();
    if (out.backbone_checksum_before != out.backbone_checksum_after) {
        throw NumericError("train: frozen backbone changed during codebook training");
    }
    return out;
}

std::string trace_to_jsonl(const std::vector<StepRecord>& trace) {
    std::string out;
    for (const auto& rec : trace) {
        ordered_json j;
        j["step"] = rec.step;
        j["phase"] = rec.phase;
        j["loss"] = rec.loss;
        j["grad_norm"] = rec.scoring_grad_norm;
        out += j.dump() + "\n";
    }
    return out;
}

} // namespace mrlab::train
