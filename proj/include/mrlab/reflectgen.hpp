#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mrlab/backbone.hpp"
#include "mrlab/tasks.hpp"

namespace mrlab::reflectgen {

// One curated record from the generation loop: the question, the reflection
// that made the difference, and the refined answer that passed the grader.
struct ReflectionTriple {
    std::string id;
    int family = 0;
    std::vector<int> question;
    std::vector<int> reflection;
    std::vector<int> answer;
    int iterations = 0; // reflection rounds used, 1..max_iters
};

struct CurationStats {
    std::size_t total = 0;
    std::size_t solved_first_try = 0;      // excluded from the dataset
    std::size_t solved_with_reflection = 0;
    std::size_t discarded = 0;             // unsolved after max_iters rounds
};

struct CurationResult {
    std::vector<ReflectionTriple> triples;
    CurationStats stats;
};

// Greedy answer of the frozen actor; the reflection (when present) fills the
// prompt's hint slot.
std::vector<int> act(const backbone::BackboneModel& actor, const std::vector<int>& question,
                     const std::vector<int>& reflection, std::size_t max_new = 12);

// Exact-match grading against the task's gold answer; errors on a family id
// the corpus does not know.
tasks::Feedback evaluate_env(const tasks::TaskCorpus& corpus, const tasks::TaskInstance& x,
                             const std::vector<int>& produced);

// Scripted reflector: the family's oracle hint, parameterized by the diff.
// Errors when called on a passing verdict.
std::vector<int> reflect(const tasks::TaskCorpus& corpus, const tasks::TaskInstance& x,
                         const tasks::Feedback& feedback);

// The generation-feedback-reflection-refinement loop over `instances`.
CurationResult curate_dataset(const backbone::BackboneModel& actor,
                              const tasks::TaskCorpus& corpus,
                              const std::vector<tasks::TaskInstance>& instances,
                              int max_iters = 4, std::size_t max_new = 12);

// Same loop over any actor behavior (tests drive it with scripted actors).
using ActorFn = std::function<std::vector<int>(const tasks::TaskInstance&,
                                               const std::vector<int>& reflection)>;
CurationResult curate_dataset_with(const ActorFn& actor, const tasks::TaskCorpus& corpus,
                                   const std::vector<tasks::TaskInstance>& instances,
                                   int max_iters = 4);

// Newline-delimited records: id, family, question, reflection, answer,
// iterations.
std::string triples_to_jsonl(const std::vector<ReflectionTriple>& triples);
std::vector<ReflectionTriple> triples_from_jsonl(const std::string& text);

} // namespace mrlab::reflectgen
