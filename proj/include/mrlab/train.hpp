#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mrlab/backbone.hpp"
#include "mrlab/codebook.hpp"
#include "mrlab/io.hpp"
#include "mrlab/reflectgen.hpp"

namespace mrlab::train {

struct TrainConfig {
    std::size_t phase1_epochs = 2; // 1 or 2
    double phase1_lr = 1e-4;
    std::size_t phase2_epochs = 3; // 2 or 3
    double phase2_lr = 1e-4;       // from {1e-4, 5e-5, 1e-5}
    std::size_t batch = 8;
    double lambda = 20.0;
    std::size_t sinkhorn_iters = 10;
    std::size_t K = 512;
    std::size_t k = 16;           // from {16, 32, 64}
    std::size_t L_from_last = 6;  // insertion at layer N - L_from_last
    std::uint64_t seed = 7;
    bool gumbel_phase1 = true;
    bool gumbel_phase2 = true;
    double gumbel_temperature = 1.0;
    // Eq. 8 layer-set switch: false averages layers L+1..N (N-L terms, the
    // printed divisor); true also includes the raw inserted rows at layer L.
    bool align_include_boundary_layer = false;
    // Phase 1 is pure alignment by default; this switch adds the token loss.
    bool phase1_token_loss = false;

    std::size_t insertion_layer(std::size_t n_layers) const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& json);
};

struct StepRecord {
    std::size_t step = 0;
    int phase = 0;
    double loss = 0.0;
    double scoring_grad_norm = 0.0; // gradient norm into g and f
};

struct PhaseResult {
    std::vector<StepRecord> trace;
    double start_ma = 0.0; // moving average (window <= 50) at the start
    double end_ma = 0.0;   // and at the end
    double scoring_grad_live_fraction = 0.0;
};

// Teacher states of the frozen model on {x, r}: per-layer hidden rows for
// layers L..N, split at the question/reflection boundary.
struct TeacherStates {
    std::vector<Tensor> reflection; // index 0 is layer L
    std::vector<Tensor> query;
};
TeacherStates teacher_hiddens(const backbone::BackboneModel& m, const std::vector<int>& question,
                              const std::vector<int>& reflection, std::size_t L);

// Phase 1: optimal-transport alignment of selected units against teacher
// reflection states. Updates the codebook (P, g, f) in place.
PhaseResult align_phase(const backbone::BackboneModel& m, codebook::Codebook& cb,
                        const std::vector<reflectgen::ReflectionTriple>& triples,
                        const TrainConfig& cfg, RunLog* log = nullptr);

// Phase 2: supervised fine-tuning on the refined answers.
PhaseResult sft_phase(const backbone::BackboneModel& m, codebook::Codebook& cb,
                      const std::vector<reflectgen::ReflectionTriple>& triples,
                      const TrainConfig& cfg, RunLog* log = nullptr);

struct TrainOutcome {
    codebook::Codebook cb;
    PhaseResult phase1, phase2;
    std::uint64_t backbone_checksum_before = 0;
    std::uint64_t backbone_checksum_after = 0;
};

// Progressive optimization: align_phase then sft_phase, backbone frozen.
TrainOutcome run_training(const backbone::BackboneModel& m,
                          const std::vector<reflectgen::ReflectionTriple>& triples,
                          const TrainConfig& cfg, RunLog* log = nullptr);

// Metrics report lines: step, phase, loss, grad-norm.
std::string trace_to_jsonl(const std::vector<StepRecord>& trace);

} // namespace mrlab::train
