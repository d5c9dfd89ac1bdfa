#include "mrlab/config.hpp"

#include <cstdlib>
#include <functional>
#include <map>
#include <sstream>

#include "mrlab/error.hpp"
#include "mrlab/io.hpp"

namespace mrlab::config {

namespace {

struct Field {
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    std::istringstream ss(value);
    T out;
    ss >> out;
    if (ss.fail() || !(ss >> std::ws).eof()) {
        throw ConfigError("config: bad value '" + value + "' for key '" + key + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config: bad boolean '" + value + "' for key '" + key + "'");
}

std::string fmt(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

#define NUM_FIELD(name, expr)                                                            \
    {                                                                                    \
        name, Field{[](const RunConfig& c) { return std::to_string(c.expr); },           \
                    [](RunConfig& c, const std::string& v) {                             \
                        c.expr = parse_number<decltype(c.expr)>(name, v);                \
                    }}                                                                   \
    }
#define DBL_FIELD(name, expr)                                                            \
    {                                                                                    \
        name, Field{[](const RunConfig& c) { return fmt(c.expr); },                     \
                    [](RunConfig& c, const std::string& v) {                             \
                        c.expr = parse_number<double>(name, v);                          \
                    }}                                                                   \
    }
#define BOOL_FIELD(name, expr)                                                           \
    {                                                                                    \
        name, Field{[](const RunConfig& c) { return c.expr ? "true" : "false"; },        \
                    [](RunConfig& c, const std::string& v) {                             \
                        c.expr = parse_bool(name, v);                                    \
                    }}                                                                   \
    }

const std::map<std::string, Field>& registry() {
    static const std::map<std::string, Field> fields = {
        NUM_FIELD("seed", seed),
        NUM_FIELD("families", families),
        NUM_FIELD("per_family", per_family),
        NUM_FIELD("digits", digits),
        NUM_FIELD("digit_range", digit_range),
        NUM_FIELD("neutral", neutral),
        NUM_FIELD("vocab", vocab),
        NUM_FIELD("dim", dim),
        NUM_FIELD("layers", layers),
        NUM_FIELD("heads", heads),
        NUM_FIELD("max_seq", max_seq),
        NUM_FIELD("mlp_hidden", mlp_hidden),
        BOOL_FIELD("extended_ops", extended_ops),
        NUM_FIELD("pretrain_sequences", pretrain_sequences),
        NUM_FIELD("pretrain_heldout", pretrain_heldout),
        DBL_FIELD("hint_fraction", hint_fraction),
        NUM_FIELD("pretrain_steps", pretrain_steps),
        NUM_FIELD("pretrain_batch", pretrain_batch),
        DBL_FIELD("pretrain_lr", pretrain_lr),
        DBL_FIELD("pretrain_floor", pretrain_floor),
        NUM_FIELD("max_iters", max_iters),
        NUM_FIELD("max_new", max_new),
        NUM_FIELD("phase1_epochs", train.phase1_epochs),
        DBL_FIELD("phase1_lr", train.phase1_lr),
        NUM_FIELD("phase2_epochs", train.phase2_epochs),
        DBL_FIELD("phase2_lr", train.phase2_lr),
        NUM_FIELD("batch", train.batch),
        DBL_FIELD("lambda", train.lambda),
        NUM_FIELD("sinkhorn_iters", train.sinkhorn_iters),
        NUM_FIELD("K", train.K),
        NUM_FIELD("k", train.k),
        NUM_FIELD("L_from_last", train.L_from_last),
        BOOL_FIELD("gumbel_phase1", train.gumbel_phase1),
        BOOL_FIELD("gumbel_phase2", train.gumbel_phase2),
        DBL_FIELD("gumbel_temperature", train.gumbel_temperature),
        BOOL_FIELD("align_include_boundary_layer", train.align_include_boundary_layer),
        BOOL_FIELD("phase1_token_loss", train.phase1_token_loss),
    };
    return fields;
}

#undef NUM_FIELD
#undef DBL_FIELD
#undef BOOL_FIELD

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

} // namespace

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    RunConfig cfg;
    std::istringstream ss(read_file(path));
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        const auto comment = line.find('#');
        if (comment != std::string::npos) line.erase(comment);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(line_no) +
                              " is not 'key = value': " + line);
        }
        cfg.apply_override(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

void RunConfig::apply_override(const std::string& key, const std::string& value) {
    const auto it = registry().find(key);
    if (it == registry().end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second.set(*this, value);
}

void RunConfig::apply_env_seed() {
    if (const char* env = std::getenv("MRLAB_SEED")) {
        seed = parse_number<std::uint64_t>("MRLAB_SEED", env);
    }
    train.seed = seed;
}

std::string RunConfig::resolved_text() const {
    std::string out = "# resolved mrlab configuration\n";
    for (const auto& [key, field] : registry()) {
        out += key + " = " + field.get(*this) + "\n";
    }
    return out;
}

backbone::BackboneConfig RunConfig::backbone_config() const {
    backbone::BackboneConfig cfg;
    cfg.vocab = vocab;
    cfg.dim = dim;
    cfg.layers = layers;
    cfg.heads = heads;
    cfg.max_seq = max_seq;
    cfg.mlp_hidden = mlp_hidden;
    return cfg;
}

backbone::PretrainConfig RunConfig::pretrain_config() const {
    backbone::PretrainConfig cfg;
    cfg.arch = backbone_config();
    cfg.steps = pretrain_steps;
    cfg.batch = pretrain_batch;
    cfg.lr = pretrain_lr;
    cfg.seed = seed;
    cfg.accuracy_floor = pretrain_floor;
    return cfg;
}

tasks::GenConfig RunConfig::gen_config() const {
    tasks::GenConfig cfg;
    cfg.n_families = families;
    cfg.n_per_family = per_family;
    cfg.n_digits = digits;
    cfg.digit_range = digit_range;
    cfg.n_neutral = neutral;
    cfg.extended_ops = extended_ops;
    return cfg;
}

tasks::PretrainCorpusConfig RunConfig::pretrain_corpus_config() const {
    tasks::PretrainCorpusConfig cfg;
    cfg.n_train = pretrain_sequences;
    cfg.n_heldout = pretrain_heldout;
    cfg.n_digits = digits;
    cfg.digit_range = digit_range;
    cfg.n_neutral = neutral;
    cfg.hint_fraction = hint_fraction;
    cfg.extended_ops = extended_ops;
    return cfg;
}

} // namespace mrlab::config
