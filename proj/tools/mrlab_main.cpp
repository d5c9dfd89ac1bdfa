// mrlab: deterministic command-line driver for the meta-reflection codebook
// pipeline. Subcommands wire gen-tasks -> pretrain -> curate -> train ->
// eval / inspect / bench end to end over checkpointed artifacts.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>

#include "mrlab/backbone.hpp"
#include "mrlab/checkpoint.hpp"
#include "mrlab/config.hpp"
#include "mrlab/error.hpp"
#include "mrlab/infer.hpp"
#include "mrlab/io.hpp"
#include "mrlab/reflectgen.hpp"
#include "mrlab/tasks.hpp"
#include "mrlab/train.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;
using namespace mrlab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides; // key=value
    std::string out_dir = "runs/out";
};

config::RunConfig resolve_config(const CommonArgs& args) {
    config::RunConfig cfg;
    if (!args.config_path.empty()) cfg = config::RunConfig::from_file(args.config_path);
    for (const std::string& kv : args.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        }
        cfg.apply_override(kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.apply_env_seed();
    return cfg;
}

void require_exists(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("missing artifact: " + path.string());
}

void write_snapshot(const fs::path& dir, const config::RunConfig& cfg) {
    atomic_write_file(dir / "resolved_config.txt", cfg.resolved_text());
}

tasks::TaskCorpus load_corpus(const fs::path& dir) {
    require_exists(dir / "families.json");
    require_exists(dir / "tasks_train.jsonl");
    require_exists(dir / "tasks_test.jsonl");
    return tasks::corpus_from_json(read_file(dir / "families.json"),
                                   read_file(dir / "tasks_train.jsonl"),
                                   read_file(dir / "tasks_test.jsonl"));
}

backbone::BackboneModel load_backbone(const fs::path& path) {
    require_exists(path);
    return backbone::BackboneModel::from_checkpoint(load_checkpoint(path, "backbone"));
}

codebook::Codebook load_codebook(const fs::path& path) {
    require_exists(path);
    return codebook::Codebook::from_checkpoint(load_checkpoint(path, "codebook"));
}

std::vector<reflectgen::ReflectionTriple> load_dataset(const fs::path& path) {
    require_exists(path);
    return reflectgen::triples_from_jsonl(read_file(path));
}

void progress(const std::string& line) { std::cerr << "[mrlab] " << line << "\n"; }

// ---- subcommand bodies ----------------------------------------------------------------

int cmd_gen_tasks(const CommonArgs& args, std::uint64_t seed_flag, bool seed_given) {
    config::RunConfig cfg = resolve_config(args);
    if (seed_given) cfg.seed = seed_flag;
    cfg.apply_env_seed();

    const fs::path out(args.out_dir);
    DirLock lock(out);
    const tasks::TaskCorpus corpus = tasks::generate_family_dataset(cfg.gen_config(), cfg.seed);
    if (!tasks::surface_templates_ambiguous(corpus)) {
        throw ConfigError("gen-tasks: surface templates do not collide across families");
    }
    atomic_write_file(out / "families.json", tasks::families_to_json(corpus));
    atomic_write_file(out / "tasks_train.jsonl", tasks::instances_to_jsonl(corpus.train));
    atomic_write_file(out / "tasks_test.jsonl", tasks::instances_to_jsonl(corpus.test));
    write_snapshot(out, cfg);
    progress("wrote task corpus to " + out.string());

    ordered_json j;
    j["command"] = "gen-tasks";
    j["seed"] = cfg.seed;
    j["families"] = cfg.families;
    j["train_instances"] = corpus.train.size();
    j["test_instances"] = corpus.test.size();
    j["out_dir"] = out.string();
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_pretrain(const CommonArgs& args) {
    config::RunConfig cfg = resolve_config(args);
    const fs::path out(args.out_dir);
    DirLock lock(out);

    progress("building pretraining corpus (" + std::to_string(cfg.pretrain_sequences) +
             " sequences)");
    const tasks::PretrainCorpus corpus =
        tasks::build_pretrain_corpus(cfg.pretrain_corpus_config(), cfg.seed);
    progress("pretraining for " + std::to_string(cfg.pretrain_steps) + " steps");
    backbone::PretrainReport report;
    const backbone::BackboneModel model =
        backbone::pretrain_backbone(corpus, cfg.pretrain_config(), &report);

    save_checkpoint(out / "backbone.ckpt", model.to_checkpoint());
    write_snapshot(out, cfg);

    std::string losses;
    for (std::size_t i = 0; i < report.losses.size(); ++i) {
        ordered_json j;
        j["step"] = i;
        j["loss"] = report.losses[i];
        losses += j.dump() + "\n";
    }
    atomic_write_file(out / "pretrain_losses.jsonl", losses);
    progress("pretraining done, format accuracy " +
             std::to_string(report.final_metrics.format_accuracy));

    ordered_json j;
    j["command"] = "pretrain";
    j["seed"] = cfg.seed;
    j["steps"] = report.steps_run;
    j["format_accuracy"] = report.final_metrics.format_accuracy;
    j["weighted_accuracy"] = report.final_metrics.weighted_accuracy;
    j["checksum"] = model.checksum();
    j["checkpoint"] = (out / "backbone.ckpt").string();
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_curate(const CommonArgs& args, const std::string& tasks_dir,
               const std::string& backbone_path) {
    config::RunConfig cfg = resolve_config(args);
    const tasks::TaskCorpus corpus = load_corpus(tasks_dir);
    const backbone::BackboneModel model = load_backbone(backbone_path);

    const fs::path out(args.out_dir);
    DirLock lock(out);
    progress("curating over " + std::to_string(corpus.train.size()) + " train tasks");
    const reflectgen::CurationResult result =
        reflectgen::curate_dataset(model, corpus, corpus.train, cfg.max_iters, cfg.max_new);

    atomic_write_file(out / "dataset.jsonl", reflectgen::triples_to_jsonl(result.triples));
    write_snapshot(out, cfg);
    progress("curated " + std::to_string(result.triples.size()) + " triples");

    ordered_json j;
    j["command"] = "curate";
    j["total"] = result.stats.total;
    j["solved_first_try"] = result.stats.solved_first_try;
    j["solved_with_reflection"] = result.stats.solved_with_reflection;
    j["discarded"] = result.stats.discarded;
    j["dataset"] = (out / "dataset.jsonl").string();
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_train(const CommonArgs& args, const std::string& tasks_dir,
              const std::string& backbone_path, const std::string& dataset_path) {
    config::RunConfig cfg = resolve_config(args);
    const tasks::TaskCorpus corpus = load_corpus(tasks_dir);
    const backbone::BackboneModel model = load_backbone(backbone_path);
    const auto triples = load_dataset(dataset_path);
    if (triples.empty()) throw ConfigError("train: the curated dataset is empty");

    const fs::path out(args.out_dir);
    DirLock lock(out);
    RunLog log;
    log.echo_stderr = true;

    const infer::EvalSummary before = infer::evaluate_split(
        model, corpus, corpus.test, infer::EvalMode::zero_shot, nullptr, nullptr, cfg.max_new);
    progress("frozen zero-shot test accuracy " + std::to_string(before.accuracy));

    codebook::CodebookConfig ccfg;
    ccfg.K = cfg.train.K;
    ccfg.k = cfg.train.k;
    ccfg.C = model.cfg.dim;
    ccfg.L = cfg.train.insertion_layer(model.cfg.layers);
    codebook::Codebook cb = codebook::Codebook::init(ccfg, cfg.train.seed);

    const std::uint64_t checksum_before = model.checksum();
    const train::PhaseResult phase1 = train::align_phase(model, cb, triples, cfg.train, &log);
    save_checkpoint(out / "codebook_phase1.ckpt", cb.to_checkpoint());
    const train::PhaseResult phase2 = train::sft_phase(model, cb, triples, cfg.train, &log);
    save_checkpoint(out / "codebook.ckpt", cb.to_checkpoint());
    if (model.checksum() != checksum_before) {
        throw NumericError("train: frozen backbone changed during codebook training");
    }

    std::vector<train::StepRecord> trace = phase1.trace;
    trace.insert(trace.end(), phase2.trace.begin(), phase2.trace.end());
    atomic_write_file(out / "metrics.jsonl", train::trace_to_jsonl(trace));
    write_snapshot(out, cfg);

    const infer::Engine engine(model, cb);
    const infer::EvalSummary after = infer::evaluate_split(
        model, corpus, corpus.test, infer::EvalMode::codebook, &engine, nullptr, cfg.max_new);
    progress("codebook test accuracy " + std::to_string(after.accuracy));

    ordered_json j;
    j["command"] = "train";
    j["triples"] = triples.size();
    j["phase1_start_ma"] = phase1.start_ma;
    j["phase1_end_ma"] = phase1.end_ma;
    j["phase1_grad_live_fraction"] = phase1.scoring_grad_live_fraction;
    j["accuracy_before"] = before.accuracy;
    j["accuracy_after"] = after.accuracy;
    j["backbone_checksum"] = checksum_before;
    j["codebook_checkpoint"] = (out / "codebook.ckpt").string();
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_eval(const CommonArgs& args, const std::string& tasks_dir,
             const std::string& backbone_path, const std::string& codebook_path,
             const std::string& dataset_path, const std::string& baseline) {
    config::RunConfig cfg = resolve_config(args);
    const tasks::TaskCorpus corpus = load_corpus(tasks_dir);
    const backbone::BackboneModel model = load_backbone(backbone_path);
    const codebook::Codebook cb = load_codebook(codebook_path);
    const infer::Engine engine(model, cb);

    const fs::path out(args.out_dir);
    DirLock lock(out);

    progress("evaluating " + std::to_string(corpus.test.size()) + " test tasks");
    const auto zero = infer::evaluate_split(model, corpus, corpus.test,
                                            infer::EvalMode::zero_shot, nullptr, nullptr,
                                            cfg.max_new);
    const auto oracle = infer::evaluate_split(model, corpus, corpus.test,
                                              infer::EvalMode::oracle_hint, nullptr, nullptr,
                                              cfg.max_new);
    const auto with_cb = infer::evaluate_split(model, corpus, corpus.test,
                                               infer::EvalMode::codebook, &engine, nullptr,
                                               cfg.max_new);

    ordered_json j;
    j["command"] = "eval";
    j["test_instances"] = corpus.test.size();
    j["zero_shot_accuracy"] = zero.accuracy;
    j["oracle_hint_accuracy"] = oracle.accuracy;
    j["codebook_accuracy"] = with_cb.accuracy;

    if (baseline == "rag") {
        const auto triples = load_dataset(dataset_path);
        const infer::RagStore store = infer::build_rag_store(model, triples, cb.cfg.L);
        const auto rag = infer::evaluate_split(model, corpus, corpus.test, infer::EvalMode::rag,
                                               nullptr, &store, cfg.max_new);
        j["rag_accuracy"] = rag.accuracy;
    }

    // Trace file for inspect: selection indices plus the timing split.
    std::string traces;
    for (const auto& t : with_cb.traces) {
        ordered_json jt;
        jt["id"] = t.question_id;
        jt["indices"] = t.selection.indices;
        jt["generated"] = vocab::render(t.generated);
        jt["retrieval_count"] = t.retrieval_count;
        jt["retrieval_seconds"] = t.retrieval_seconds;
        jt["first_token_seconds"] = t.first_token_seconds;
        traces += jt.dump() + "\n";
    }
    atomic_write_file(out / "traces.jsonl", traces);
    atomic_write_file(out / "eval.json", j.dump(2) + "\n");
    write_snapshot(out, cfg);

    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_inspect(const CommonArgs& args, const std::string& codebook_path,
                const std::string& traces_path, bool histogram, bool features) {
    config::RunConfig cfg = resolve_config(args);
    const codebook::Codebook cb = load_codebook(codebook_path);
    const fs::path out(args.out_dir);
    DirLock lock(out);

    ordered_json j;
    j["command"] = "inspect";
    j["K"] = cb.cfg.K;
    if (histogram) {
        require_exists(traces_path);
        std::vector<infer::InferenceTrace> traces;
        std::istringstream ss(read_file(traces_path));
        std::string line;
        while (std::getline(ss, line)) {
            if (line.empty()) continue;
            const ordered_json jt = ordered_json::parse(line);
            infer::InferenceTrace t;
            t.question_id = jt.at("id").get<std::string>();
            t.selection.indices = jt.at("indices").get<std::vector<std::size_t>>();
            t.retrieval_count = jt.at("retrieval_count").get<std::size_t>();
            traces.push_back(std::move(t));
        }
        const auto counts = infer::selection_histogram(traces, cb.cfg.K);
        atomic_write_file(out / "selection_histogram.csv", infer::histogram_to_csv(counts));
        std::size_t distinct = 0, total = 0;
        for (std::size_t c : counts) {
            if (c > 0) ++distinct;
            total += c;
        }
        j["traces"] = traces.size();
        j["distinct_units_selected"] = distinct;
        j["total_selections"] = total;
        j["histogram"] = (out / "selection_histogram.csv").string();
    }
    if (features) {
        const auto feats = infer::unit_feature_projection(cb.P);
        atomic_write_file(out / "unit_features.csv", infer::features_to_csv(feats));
        j["features"] = (out / "unit_features.csv").string();
    }
    write_snapshot(out, cfg);
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_bench(const CommonArgs& args, const std::string& tasks_dir,
              const std::string& backbone_path, const std::string& codebook_path) {
    config::RunConfig cfg = resolve_config(args);
    const tasks::TaskCorpus corpus = load_corpus(tasks_dir);
    const backbone::BackboneModel model = load_backbone(backbone_path);
    const codebook::Codebook cb = load_codebook(codebook_path);
    const infer::Engine engine(model, cb);

    const fs::path out(args.out_dir);
    DirLock lock(out);
    progress("benchmarking first-token latency over " + std::to_string(corpus.test.size()) +
             " queries");
    const infer::LatencyReport report = infer::bench_latency(engine, corpus.test);
    atomic_write_file(out / "latency.json", infer::latency_to_json(report));
    write_snapshot(out, cfg);
    std::cout << infer::latency_to_json(report);
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"meta-reflection codebook lab"};
    app.require_subcommand(1);

    CommonArgs common;
    app.add_option("--config", common.config_path, "flat key = value configuration file");
    app.add_option("--set", common.overrides, "override a config key (key=value)");

    // gen-tasks
    auto* gen = app.add_subcommand("gen-tasks", "generate the synthetic family task corpus");
    std::uint64_t seed_flag = 0;
    int families_flag = -1, per_family_flag = -1;
    auto* seed_opt = gen->add_option("--seed", seed_flag, "generation seed")->required();
    gen->add_option("--families", families_flag, "number of task families");
    gen->add_option("--per-family", per_family_flag, "instances per family");
    gen->add_option("--out", common.out_dir, "output directory");

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "pretrain and freeze the backbone");
    pre->add_option("--out", common.out_dir, "output directory");

    // curate
    auto* cur = app.add_subcommand("curate", "run the reflection generation loop");
    std::string tasks_dir, backbone_path, codebook_path, dataset_path, traces_path;
    cur->add_option("--tasks", tasks_dir, "task corpus directory")->required();
    cur->add_option("--backbone", backbone_path, "backbone checkpoint")->required();
    cur->add_option("--out", common.out_dir, "output directory");

    // train
    auto* trn = app.add_subcommand("train", "progressive codebook optimization");
    trn->add_option("--tasks", tasks_dir, "task corpus directory")->required();
    trn->add_option("--backbone", backbone_path, "backbone checkpoint")->required();
    trn->add_option("--dataset", dataset_path, "curated dataset (jsonl)")->required();
    trn->add_option("--out", common.out_dir, "output directory");

    // eval
    auto* evl = app.add_subcommand("eval", "accuracy of codebook vs baselines on the test split");
    std::string baseline;
    evl->add_option("--tasks", tasks_dir, "task corpus directory")->required();
    evl->add_option("--backbone", backbone_path, "backbone checkpoint")->required();
    evl->add_option("--codebook", codebook_path, "codebook checkpoint")->required();
    evl->add_option("--dataset", dataset_path, "curated dataset (needed for --baseline rag)");
    evl->add_option("--baseline", baseline, "additional baseline to run (rag)");
    evl->add_option("--out", common.out_dir, "output directory");

    // inspect
    auto* ins = app.add_subcommand("inspect", "selection and unit-feature statistics");
    bool histogram = false, features = false;
    ins->add_option("--codebook", codebook_path, "codebook checkpoint")->required();
    ins->add_option("--traces", traces_path, "traces.jsonl from eval");
    ins->add_flag("--histogram", histogram, "emit the selection histogram CSV");
    ins->add_flag("--features", features, "emit the unit feature CSV");
    ins->add_option("--out", common.out_dir, "output directory");

    // bench
    auto* ben = app.add_subcommand("bench", "first-token latency split");
    ben->add_option("--tasks", tasks_dir, "task corpus directory")->required();
    ben->add_option("--backbone", backbone_path, "backbone checkpoint")->required();
    ben->add_option("--codebook", codebook_path, "codebook checkpoint")->required();
    ben->add_option("--out", common.out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (gen->parsed()) {
            if (families_flag > 0) {
                common.overrides.push_back("families=" + std::to_string(families_flag));
            }
            if (per_family_flag > 0) {
                common.overrides.push_back("per_family=" + std::to_string(per_family_flag));
            }
            return cmd_gen_tasks(common, seed_flag, seed_opt->count() > 0);
        }
        if (pre->parsed()) return cmd_pretrain(common);
        if (cur->parsed()) return cmd_curate(common, tasks_dir, backbone_path);
        if (trn->parsed()) return cmd_train(common, tasks_dir, backbone_path, dataset_path);
        if (evl->parsed()) {
            if (baseline == "rag" && dataset_path.empty()) {
                throw ConfigError("eval: --baseline rag requires --dataset");
            }
            return cmd_eval(common, tasks_dir, backbone_path, codebook_path, dataset_path,
                            baseline);
        }
        if (ins->parsed()) {
            if (histogram && traces_path.empty()) {
                throw ConfigError("inspect: --histogram requires --traces");
            }
            return cmd_inspect(common, codebook_path, traces_path, histogram, features);
        }
        if (ben->parsed()) return cmd_bench(common, tasks_dir, backbone_path, codebook_path);
        throw ConfigError("no subcommand selected");
    } catch (const ConfigError& e) {
        std::cerr << "[mrlab] config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "[mrlab] " << e.what() << "\n";
        return kExitMissing;
    } catch (const std::exception& e) {
        std::cerr << "[mrlab] error: " << e.what() << "\n";
        return kExitFailure;
    }
}
