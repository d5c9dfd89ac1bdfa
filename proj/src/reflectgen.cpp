#include "mrlab/reflectgen.hpp"

#include <sstream>

#include <json.hpp>

#include "mrlab/error.hpp"
#include "mrlab/vocab.hpp"

using ordered_json = nlohmann::ordered_json;

namespace mrlab::reflectgen {

namespace vc = mrlab::vocab;

std::vector<int> act(const backbone::BackboneModel& actor, const std::vector<int>& question,
                     const std::vector<int>& reflection, std::size_t max_new) {
    const std::vector<int> prompt = vc::make_prompt(question, reflection);
    // Plain decoding: no unit insertion on the actor path.
    return backbone::decode_with_cache(actor, prompt, Tensor(0, actor.cfg.dim), 1, max_new);
}

tasks::Feedback evaluate_env(const tasks::TaskCorpus& corpus, const tasks::TaskInstance& x,
                             const std::vector<int>& produced) {
    if (x.family < 0 || static_cast<std::size_t>(x.family) >= corpus.families.size()) {
        throw ConfigError("evaluate_env: unknown family " + std::to_string(x.family));
    }
    return tasks::evaluate(x, produced);
}

std::vector<int> reflect(const tasks::TaskCorpus& corpus, const tasks::TaskInstance& x,
                         const tasks::Feedback& feedback) {
    if (feedback.pass) {
        throw ConfigError("reflect: called on a passing verdict for task " + x.id);
    }
    if (x.family < 0 || static_cast<std::size_t>(x.family) >= corpus.families.size()) {
        throw ConfigError("reflect: unknown family " + std::to_string(x.family));
    }
    return tasks::oracle_hint(corpus.families[x.family], feedback);
}

CurationResult curate_dataset(const backbone::BackboneModel& actor,
                              const tasks::TaskCorpus& corpus,
                              const std::vector<tasks::TaskInstance>& instances, int max_iters,
                              std::size_t max_new) {
    const ActorFn fn = [&actor, max_new](const tasks::TaskInstance& x,
                                         const std::vector<int>& reflection) {
        return act(actor, x.question, reflection, max_new);
    };
    return curate_dataset_with(fn, corpus, instances, max_iters);
}

CurationResult curate_dataset_with(const ActorFn& actor, const tasks::TaskCorpus& corpus,
                                   const std::vector<tasks::TaskInstance>& instances,
                                   int max_iters) {
    if (instances.empty()) throw ConfigError("curate: empty task list");
    if (max_iters < 1) throw ConfigError("curate: max_iters must be at least 1");

    CurationResult out;
    out.stats.total = instances.size();
    for (const tasks::TaskInstance& x : instances) {
        std::vector<int> produced = actor(x, {});
        tasks::Feedback fb = evaluate_env(corpus, x, produced);
        if (fb.pass) {
            ++out.stats.solved_first_try; // no reflection exists; stays out of the set
            continue;
        }
        bool solved = false;
        for (int round = 1; round <= max_iters && !solved; ++round) {
            const std::vector<int> reflection = reflect(corpus, x, fb);
            produced = actor(x, reflection);
            fb = evaluate_env(corpus, x, produced);
            if (fb.pass) {
                ReflectionTriple triple;
                triple.id = x.id;
                triple.family = x.family;
                triple.question = x.question;
                triple.reflection = reflection;
                triple.answer = fb.produced;
                triple.iterations = round;
                out.triples.push_back(std::move(triple));
                solved = true;
            }
        }
        if (solved) ++out.stats.solved_with_reflection;
        else ++out.stats.discarded;
    }
    return out;
}

std::string triples_to_jsonl(const std::vector<ReflectionTriple>& triples) {
    std::string out;
    for (const auto& t : triples) {
        ordered_json j;
        j["id"] = t.id;
        j["family"] = t.family;
        j["question"] = vc::render(t.question);
        j["reflection"] = vc::render(t.reflection);
        j["answer"] = vc::render(t.answer);
        j["iterations"] = t.iterations;
        out += j.dump() + "\n";
    }
    return out;
}

std::vector<ReflectionTriple> triples_from_jsonl(const std::string& text) {
    std::vector<ReflectionTriple> out;
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        const ordered_json j = ordered_json::parse(line);
        ReflectionTriple t;
        t.id = j.at("id").get<std::string>();
        t.family = j.at("family").get<int>();
        t.question = vc::parse(j.at("question").get<std::string>());
        t.reflection = vc::parse(j.at("reflection").get<std::string>());
        t.answer = vc::parse(j.at("answer").get<std::string>());
        t.iterations = j.at("iterations").get<int>();
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace mrlab::reflectgen
