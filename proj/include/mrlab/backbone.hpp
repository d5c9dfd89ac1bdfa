#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mrlab/checkpoint.hpp"
#include "mrlab/graph.hpp"
#include "mrlab/tasks.hpp"
#include "mrlab/tensor.hpp"

namespace mrlab::backbone {

struct BackboneConfig {
    std::size_t vocab = 512;
    std::size_t dim = 128;   // C
    std::size_t layers = 8;  // N
    std::size_t heads = 4;
    std::size_t max_seq = 64;
    std::size_t mlp_hidden = 256;
    double ln_eps = 1e-5;

    std::size_t head_dim() const { return dim / heads; }
    std::string to_json() const;
    static BackboneConfig from_json(const std::string& json);
};

struct LayerParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
};

// Pre-LN causal decoder with learned absolute positions. States H^l denote
// the residual stream after l blocks; H^0 is the embedded input.
struct BackboneModel {
    BackboneConfig cfg;
    bool frozen = false;
    Tensor tok_embed; // V x C
    Tensor pos_embed; // max_seq x C
    std::vector<LayerParams> blocks;
    Tensor lnf_g, lnf_b;
    Tensor unembed; // C x V

    static BackboneModel init(const BackboneConfig& cfg, std::uint64_t seed);

    std::vector<Tensor*> param_list();
    std::vector<const Tensor*> param_list() const;
    std::vector<std::string> param_names() const;
    std::uint64_t checksum() const;

    Checkpoint to_checkpoint() const;
    static BackboneModel from_checkpoint(const Checkpoint& ckpt);
};

// ---- fast engine (no tape) -------------------------------------------------------

// Per-layer key/value rows. Layers below the insertion point never see unit
// rows, so per-layer lengths may differ once units are inserted.
struct KvCache {
    struct LayerKv {
        std::vector<double> k, v;
        std::size_t rows = 0;
    };
    std::vector<LayerKv> layers;
    explicit KvCache(const BackboneModel& m) : layers(m.cfg.layers) {}
    std::size_t rows(std::size_t layer) const { return layers[layer].rows; }
};

// Embeds `toks` at positions pos_start.. and runs all blocks, extending the
// cache. Returns the final residual states of the chunk; `tap_layer` > 0
// additionally captures H^tap_layer of the chunk rows.
Tensor process_tokens(const BackboneModel& m, KvCache& cache, const std::vector<int>& toks,
                      std::size_t pos_start, std::size_t tap_layer = 0, Tensor* tap_out = nullptr);

// Inserts raw rows at layer L and runs blocks L..N-1, extending only those
// caches. slot_states (when requested) holds H^l of the rows for l = L..N.
Tensor process_inserted_rows(const BackboneModel& m, KvCache& cache, const Tensor& rows,
                             std::size_t L, std::vector<Tensor>* slot_states = nullptr);

// Final layer norm + unembedding for one residual row.
Tensor logits_for_row(const BackboneModel& m, const Tensor& states, std::size_t row);

// H^L of a token prefix (plain forward, no insertion).
Tensor forward_prefix(const BackboneModel& m, const std::vector<int>& toks, std::size_t L);

// All residual states H^0..H^N of a plain forward pass.
std::vector<Tensor> forward_all_states(const BackboneModel& m, const std::vector<int>& toks);

// Joint forward of {H^L_query; units} through the remaining blocks: logits at
// the generation position (last row) plus per-layer unit-slot states.
struct InsertionResult {
    Tensor logits;                   // 1 x V
    std::vector<Tensor> slot_states; // H^l of the unit rows, l = L..N
};
InsertionResult forward_with_insertion(const BackboneModel& m, const Tensor& h_query,
                                       const Tensor& units, std::size_t L);

// Greedy decoding. Units (possibly empty) are injected once at layer L after
// the prompt; generated tokens take position ids continuing after the prompt.
// Decoding stops at <eos> (excluded from the result).
std::vector<int> decode_with_cache(const BackboneModel& m, const std::vector<int>& prompt,
                                   const Tensor& units, std::size_t L, std::size_t max_new,
                                   std::vector<Tensor>* step_logits = nullptr);

// Same contract, recomputing everything from scratch for every generated
// token. Dual path for the cache-equivalence checks.
std::vector<int> decode_uncached(const BackboneModel& m, const std::vector<int>& prompt,
                                 const Tensor& units, std::size_t L, std::size_t max_new,
                                 std::vector<Tensor>* step_logits = nullptr);

// ---- tape forward (training) -------------------------------------------------------

// Backbone parameters bound to a graph in declared order.
struct TapeBackbone {
    const BackboneModel* model = nullptr;
    std::vector<nd::NodeId> ids;
    nd::NodeId id_of(const Tensor* p) const;
};
TapeBackbone bind(nd::Graph& g, const BackboneModel& m, bool trainable);

// Embeds tokens at positions pos_start.. on the tape.
nd::NodeId embed_tape(nd::Graph& g, const TapeBackbone& tb, const std::vector<int>& toks,
                      std::size_t pos_start);

// Runs blocks first_block..N-1 over rows x with a standard causal mask.
// `taps` (when given) receives the states after each block.
nd::NodeId continue_blocks_tape(nd::Graph& g, const TapeBackbone& tb, nd::NodeId x,
                                std::size_t first_block, std::vector<nd::NodeId>* taps = nullptr);

// Final layer norm + unembedding over all rows.
nd::NodeId logits_tape(nd::Graph& g, const TapeBackbone& tb, nd::NodeId states);

// Next-token cross entropy of one sequence under the given loss weights.
nd::NodeId lm_loss_tape(nd::Graph& g, const TapeBackbone& tb, const tasks::PretrainSeq& seq);

// ---- pretraining ----------------------------------------------------------------------

struct PretrainConfig {
    BackboneConfig arch;
    std::size_t steps = 2400;
    std::size_t batch = 8;
    double lr = 1e-3;
    std::size_t warmup_steps = 100; // linear ramp into the constant rate
    std::uint64_t seed = 7;
    double accuracy_floor = 0.90; // held-out format-token accuracy
    std::size_t eval_every = 400;
};

struct HeldoutMetrics {
    double format_accuracy = 0.0;  // positions whose target is structural
    double weighted_accuracy = 0.0; // all loss-carrying positions
};

struct PretrainReport {
    std::vector<double> losses;
    HeldoutMetrics final_metrics;
    std::size_t steps_run = 0;
};

// Trains from scratch on the corpus and returns the model frozen. Throws
// NumericError (with the step index) if the loss diverges, ConfigError if the
// held-out floor is not met.
BackboneModel pretrain_backbone(const tasks::PretrainCorpus& corpus, const PretrainConfig& cfg,
                                PretrainReport* report = nullptr);

// Teacher-forced next-token metrics on a batch of sequences (fast path).
HeldoutMetrics teacher_forced_metrics(const BackboneModel& m,
                                      const std::vector<tasks::PretrainSeq>& seqs);

} // namespace mrlab::backbone
