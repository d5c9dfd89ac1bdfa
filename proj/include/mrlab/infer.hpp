#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mrlab/backbone.hpp"
#include "mrlab/codebook.hpp"
#include "mrlab/reflectgen.hpp"
#include "mrlab/tasks.hpp"

namespace mrlab::infer {

struct InferenceTrace {
    std::string question_id;
    codebook::SelectionRecord selection;
    std::vector<int> generated;
    std::size_t retrieval_count = 0; // exactly 1 per generation
    double retrieval_seconds = 0.0;  // pool + score + top-k
    double first_token_seconds = 0.0;
    double decode_seconds = 0.0;
};

// Single-pass feedback-free inference. f(P) is precomputed at construction
// since the codebook is frozen after training.
class Engine {
public:
    Engine(const backbone::BackboneModel& model, const codebook::Codebook& cb);

    std::vector<int> answer(const tasks::TaskInstance& x, InferenceTrace* trace = nullptr,
                            std::size_t max_new = 12) const;

    const codebook::Codebook& cb() const { return cb_; }

private:
    const backbone::BackboneModel& model_;
    codebook::Codebook cb_;
    Tensor f_of_p_;
};

// ---- baselines --------------------------------------------------------------------------

// Reflection store for the simplified RAG baseline: pooled layer-L question
// embeddings paired with reflection texts from the curated dataset.
struct RagStore {
    Tensor embeddings; // n x C
    std::vector<std::vector<int>> reflections;
    std::vector<std::string> source_ids;
    std::size_t L = 2; // pooling layer of the stored embeddings
    std::size_t min_size = 1;
};
RagStore build_rag_store(const backbone::BackboneModel& model,
                         const std::vector<reflectgen::ReflectionTriple>& triples, std::size_t L);

// Cosine nearest neighbor over pooled query embeddings; the retrieved
// reflection text fills the hint slot. Falls back to a plain zero-shot
// answer when the store is below its minimum size.
std::vector<int> rag_answer(const backbone::BackboneModel& model, const RagStore& store,
                            const tasks::TaskInstance& x, std::size_t L,
                            std::size_t max_new = 12, std::size_t* retrieved_index = nullptr);

std::vector<int> zero_shot_answer(const backbone::BackboneModel& model,
                                  const tasks::TaskInstance& x, std::size_t max_new = 12);

// ---- evaluation --------------------------------------------------------------------------

enum class EvalMode { zero_shot, oracle_hint, codebook, rag };

struct EvalSummary {
    EvalMode mode;
    std::size_t total = 0;
    std::size_t passed = 0;
    double accuracy = 0.0;
    std::vector<InferenceTrace> traces; // filled in codebook mode
};

EvalSummary evaluate_split(const backbone::BackboneModel& model, const tasks::TaskCorpus& corpus,
                           const std::vector<tasks::TaskInstance>& split, EvalMode mode,
                           const Engine* engine = nullptr, const RagStore* store = nullptr,
                           std::size_t max_new = 12);

// ---- statistics ----------------------------------------------------------------------------

// Cumulative selection counts per unit; totals conserve k x traces.
std::vector<std::size_t> selection_histogram(const std::vector<InferenceTrace>& traces,
                                             std::size_t K);
std::string histogram_to_csv(const std::vector<std::size_t>& counts);

// One-dimensional feature per unit: projection onto the leading principal
// component of the codebook rows, min-max normalized to [0, 1].
std::vector<double> unit_feature_projection(const Tensor& P);
std::string features_to_csv(const std::vector<double>& features);

// ---- latency -------------------------------------------------------------------------------

struct LatencyReport {
    std::size_t queries = 0;
    double median_retrieval_seconds = 0.0;
    double median_first_token_seconds = 0.0;
    double retrieval_fraction = 0.0; // of first-token latency
};
LatencyReport bench_latency(const Engine& engine, const std::vector<tasks::TaskInstance>& queries,
                            std::size_t warmup = 3);
std::string latency_to_json(const LatencyReport& report);

} // namespace mrlab::infer
