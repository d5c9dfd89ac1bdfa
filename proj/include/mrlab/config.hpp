#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "mrlab/backbone.hpp"
#include "mrlab/tasks.hpp"
#include "mrlab/train.hpp"

namespace mrlab::config {

// Flat key-value run configuration: one `key = value` per line, '#' comments.
// CLI flags override file values; MRLAB_SEED overrides the seed last. Every
// run persists its resolved snapshot next to the outputs.
struct RunConfig {
    std::uint64_t seed = 7;

    // task generation
    int families = 8;
    int per_family = 100;
    int digits = 4;
    int digit_range = 6;
    int neutral = 2;

    // backbone architecture
    std::size_t vocab = 512;
    std::size_t dim = 128;
    std::size_t layers = 8;
    std::size_t heads = 4;
    std::size_t max_seq = 64;
    std::size_t mlp_hidden = 256;

    // pretraining
    bool extended_ops = false;
    int pretrain_sequences = 4096;
    int pretrain_heldout = 256;
    double hint_fraction = 0.9;
    std::size_t pretrain_steps = 2400;
    std::size_t pretrain_batch = 16;
    double pretrain_lr = 1e-3;
    double pretrain_floor = 0.90;

    // curation
    int max_iters = 4;
    std::size_t max_new = 12;

    // codebook training
    train::TrainConfig train;

    static RunConfig from_file(const std::filesystem::path& path);
    void apply_override(const std::string& key, const std::string& value);
    void apply_env_seed();
    std::string resolved_text() const;

    backbone::BackboneConfig backbone_config() const;
    backbone::PretrainConfig pretrain_config() const;
    tasks::GenConfig gen_config() const;
    tasks::PretrainCorpusConfig pretrain_corpus_config() const;
};

} // namespace mrlab::config
