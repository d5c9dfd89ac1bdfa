#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mrlab/vocab.hpp"

namespace mrlab::tasks {

// A family is a hidden transformation on digit sequences, keyed by a filler
// pair in the question surface. The surface template is shared across
// families, so a single instance does not reveal which rule applies.
struct TaskFamily {
    int id = 0;
    int op = vocab::OP_ADD; // OP_ADD | OP_MUL | OP_REV | OP_SWP
    int operand = 1;        // offset (add/rev/swp) or factor (mul)
    int modulus = 10;
    int filler_a = vocab::FILLER0;
    int filler_b = vocab::FILLER0 + 1;

    std::vector<int> apply(const std::vector<int>& digits) const;
    std::string rule_name() const;
};

struct TaskInstance {
    std::string id;
    int family = 0;
    std::vector<int> question; // Q u fa u fb SEP d1..dn
    std::vector<int> answer;   // digit tokens
};

struct TaskCorpus {
    std::uint64_t seed = 0;
    int n_digits = 4;
    std::vector<TaskFamily> families;
    std::vector<TaskInstance> train;
    std::vector<TaskInstance> test;
};

struct GenConfig {
    int n_families = 8;
    int n_per_family = 100;
    int n_digits = 4;
    int digit_range = 6; // question digits drawn from 0..digit_range-1
    int n_neutral = 2;   // per-instance neutral filler tokens in the question
    // Extends the rule pool with multiplication and positional permutation
    // ops, a harder regime than the default backbone budget is tuned for.
    bool extended_ops = false;
};

// Deterministic per seed; 7:3 train/test split per family.
TaskCorpus generate_family_dataset(const GenConfig& cfg, std::uint64_t seed);

// Structured grading feedback.
struct Feedback {
    bool pass = false;
    int first_mismatch = -1; // -1 when lengths differ before any mismatch or empty
    std::vector<int> expected;
    std::vector<int> produced;
    std::string detail;
};

// Exact match on the final answer span (anything before a trailing answer
// marker in the produced tokens is ignored).
bool grade(const TaskInstance& x, const std::vector<int>& produced);
Feedback evaluate(const TaskInstance& x, const std::vector<int>& produced);

// Scripted reflector content: names the family rule; when a diff is present
// the first mismatched position is included after POS.
std::vector<int> oracle_hint(const TaskFamily& family, const std::optional<Feedback>& diff);

// Every question surface template (digits and fillers anonymized) must be
// shared by at least two families.
bool surface_templates_ambiguous(const TaskCorpus& corpus);

// ---- pretraining corpus ---------------------------------------------------------
//
// Teaches the frozen backbone the output format and how to follow hints.
// Fillers are drawn uniformly at random here, so no filler-to-rule mapping
// exists to learn; the rule is recoverable only from the hint.
struct PretrainSeq {
    std::vector<int> tokens;
    std::vector<double> loss_weights; // per next-token position (size tokens-1)
    std::vector<bool> format_target;  // target is a structural token
};

struct PretrainCorpusConfig {
    int n_train = 4096;
    int n_heldout = 256;
    int n_digits = 4;
    int digit_range = 6;
    int n_neutral = 2;
    double hint_fraction = 0.9;
    bool extended_ops = false;
};

struct PretrainCorpus {
    std::vector<PretrainSeq> train;
    std::vector<PretrainSeq> heldout;
};

PretrainCorpus build_pretrain_corpus(const PretrainCorpusConfig& cfg, std::uint64_t seed);

// All (op, operand, modulus) combinations hints are drawn from.
std::vector<TaskFamily> rule_pool(bool extended_ops = false);

// ---- serialization ----------------------------------------------------------------
std::string corpus_to_json(const TaskCorpus& corpus);
TaskCorpus corpus_from_json(const std::string& families_json, const std::string& train_jsonl,
                            const std::string& test_jsonl);
std::string instances_to_jsonl(const std::vector<TaskInstance>& instances);
std::string families_to_json(const TaskCorpus& corpus);

} // namespace mrlab::tasks
