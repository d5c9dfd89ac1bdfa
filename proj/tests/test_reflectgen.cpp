#include <doctest.h>

#include <map>

#include "mrlab/error.hpp"
#include "mrlab/reflectgen.hpp"

using namespace mrlab;
namespace vc = mrlab::vocab;

namespace {

tasks::TaskCorpus small_corpus() {
    tasks::GenConfig cfg;
    cfg.n_families = 4;
    cfg.n_per_family = 10;
    return tasks::generate_family_dataset(cfg, 3);
}

} // namespace

TEST_CASE("reflect is only defined on failures") {
    const auto corpus = small_corpus();
    const auto& x = corpus.train.front();
    tasks::Feedback pass;
    pass.pass = true;
    CHECK_THROWS_AS(reflectgen::reflect(corpus, x, pass), ConfigError);

    tasks::Feedback fail;
    fail.first_mismatch = 1;
    const auto r1 = reflectgen::reflect(corpus, x, fail);
    const auto r2 = reflectgen::reflect(corpus, x, fail);
    CHECK(r1 == r2);
    CHECK_FALSE(r1.empty());
}

TEST_CASE("evaluate_env validates the family") {
    const auto corpus = small_corpus();
    tasks::TaskInstance ghost = corpus.train.front();
    ghost.family = 99;
    CHECK_THROWS_AS(reflectgen::evaluate_env(corpus, ghost, {}), ConfigError);
    CHECK(reflectgen::evaluate_env(corpus, corpus.train.front(),
                                   corpus.train.front().answer)
              .pass);
}

TEST_CASE("curation loop") {
    const auto corpus = small_corpus();
    const std::vector<tasks::TaskInstance> instances(corpus.train.begin(),
                                                     corpus.train.begin() + 8);

    SUBCASE("an actor that always fails discards everything") {
        std::size_t calls = 0;
        const reflectgen::ActorFn hopeless = [&calls](const tasks::TaskInstance&,
                                                      const std::vector<int>&) {
            ++calls;
            return std::vector<int>{vc::digit(0)};
        };
        const auto result = reflectgen::curate_dataset_with(hopeless, corpus, instances, 4);
        CHECK(result.triples.empty());
        CHECK(result.stats.discarded == instances.size());
        // One unaided attempt plus the reflection budget per task.
        CHECK(calls == instances.size() * 5);
    }
    SUBCASE("first-try successes stay out of the dataset") {
        const reflectgen::ActorFn oracle = [](const tasks::TaskInstance& x,
                                              const std::vector<int>&) { return x.answer; };
        const auto result = reflectgen::curate_dataset_with(oracle, corpus, instances, 4);
        CHECK(result.triples.empty());
        CHECK(result.stats.solved_first_try == instances.size());
    }
    SUBCASE("a pass on the second reflection records iterations = 2") {
        // Scripted actor: fails unaided, fails once with a hint, then follows it.
        std::map<std::string, int> hinted_calls;
        const reflectgen::ActorFn slow_learner =
            [&hinted_calls](const tasks::TaskInstance& x, const std::vector<int>& reflection) {
                if (reflection.empty()) return std::vector<int>{vc::digit(0)};
                if (++hinted_calls[x.id] < 2) return std::vector<int>{vc::digit(1)};
                return x.answer;
            };
        const auto result = reflectgen::curate_dataset_with(slow_learner, corpus, instances, 4);
        REQUIRE(result.triples.size() == instances.size());
        for (const auto& t : result.triples) {
            CHECK(t.iterations == 2);
            CHECK_FALSE(t.reflection.empty());
        }
    }
    SUBCASE("every stored answer passes the grader and budgets hold") {
        // Follows the hint immediately.
        const reflectgen::ActorFn learner = [](const tasks::TaskInstance& x,
                                               const std::vector<int>& reflection) {
            return reflection.empty() ? std::vector<int>{vc::digit(5)} : x.answer;
        };
        const auto result = reflectgen::curate_dataset_with(learner, corpus, instances, 4);
        REQUIRE(result.triples.size() == instances.size());
        for (std::size_t i = 0; i < result.triples.size(); ++i) {
            const auto& t = result.triples[i];
            CHECK(t.iterations == 1);
            CHECK(tasks::grade(instances[i], t.answer));
        }
    }
    SUBCASE("empty task list is rejected") {
        const reflectgen::ActorFn noop = [](const tasks::TaskInstance&,
                                            const std::vector<int>&) {
            return std::vector<int>{};
        };
        CHECK_THROWS_AS(reflectgen::curate_dataset_with(noop, corpus, {}, 4), ConfigError);
    }
}

TEST_CASE("curation is deterministic byte for byte") {
    const auto corpus = small_corpus();
    const reflectgen::ActorFn learner = [](const tasks::TaskInstance& x,
                                           const std::vector<int>& reflection) {
        return reflection.empty() ? std::vector<int>{vc::digit(3)} : x.answer;
    };
    const auto a = reflectgen::curate_dataset_with(learner, corpus, corpus.train, 4);
    const auto b = reflectgen::curate_dataset_with(learner, corpus, corpus.train, 4);
    CHECK(reflectgen::triples_to_jsonl(a.triples) == reflectgen::triples_to_jsonl(b.triples));
}

TEST_CASE("dataset serialization round trip") {
    const auto corpus = small_corpus();
    const reflectgen::ActorFn learner = [](const tasks::TaskInstance& x,
                                           const std::vector<int>& reflection) {
        return reflection.empty() ? std::vector<int>{vc::digit(3)} : x.answer;
    };
    const auto result = reflectgen::curate_dataset_with(learner, corpus, corpus.train, 4);
    REQUIRE_FALSE(result.triples.empty());
    const std::string jsonl = reflectgen::triples_to_jsonl(result.triples);
    const auto back = reflectgen::triples_from_jsonl(jsonl);
    REQUIRE(back.size() == result.triples.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].id == result.triples[i].id);
        CHECK(back[i].question == result.triples[i].question);
        CHECK(back[i].reflection == result.triples[i].reflection);
        CHECK(back[i].answer == result.triples[i].answer);
        CHECK(back[i].iterations == result.triples[i].iterations);
    }
    // Required field order in each record.
    const std::string first_line = jsonl.substr(0, jsonl.find('\n'));
    CHECK(first_line.find("\"id\"") < first_line.find("\"family\""));
    CHECK(first_line.find("\"family\"") < first_line.find("\"question\""));
    CHECK(first_line.find("\"question\"") < first_line.find("\"reflection\""));
    CHECK(first_line.find("\"reflection\"") < first_line.find("\"answer\""));
    CHECK(first_line.find("\"answer\"") < first_line.find("\"iterations\""));
}
