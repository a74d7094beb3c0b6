#include "btlab/cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "btlab/checkpoint.hpp"
#include "btlab/dataset.hpp"
#include "btlab/eval.hpp"
#include "btlab/improve.hpp"
#include "btlab/search.hpp"
#include "btlab/trainer.hpp"

namespace btlab::harness {

namespace cd = btlab::countdown;
namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct AppConfig {
    data::CorpusConfig data;
    lm::ModelConfig model;
    train::TrainConfig train;
    search::SearchConfig search;
    uint64_t eval_seed{0};
    int eval_limit{0};
    int eval_max_new{96};
};

void load_config_file(const std::string& path, AppConfig& cfg) {
    std::ifstream in(path);
    if (!in) {
        throw std::invalid_argument("cannot open config file: " + path);
    }
    json j = json::parse(in);
    if (j.contains("data")) data::from_json(j.at("data"), cfg.data);
    if (j.contains("model")) lm::from_json(j.at("model"), cfg.model);
    if (j.contains("train")) train::from_json(j.at("train"), cfg.train);
    if (j.contains("search")) search::from_json(j.at("search"), cfg.search);
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        cfg.eval_seed = e.value("seed", cfg.eval_seed);
        cfg.eval_limit = e.value("limit", cfg.eval_limit);
        cfg.eval_max_new = e.value("max_new", cfg.eval_max_new);
    }
}

void apply_global_seed(AppConfig& cfg, uint64_t seed) {
    cfg.data.seed = seed;
    cfg.model.seed = seed;
    cfg.train.seed = seed;
    cfg.search.seed = seed;
    cfg.eval_seed = seed;
}

std::string gen_error_name(data::GenError err) {
    return err == data::GenError::ExhaustedRetries ? "exhausted_retries" : "no_error_injectable";
}

std::vector<train::TrainingExample> tokenize_corpus(const lm::Vocab& vocab,
                                                    const std::vector<data::RenderedSample>& samples,
                                                    int context_len) {
    std::vector<train::TrainingExample> examples;
    examples.reserve(samples.size());
    std::size_t longest = 0;
    for (const auto& s : samples) {
        examples.push_back(train::make_training_example(vocab, s));
        longest = std::max(longest, examples.back().ids.size());
    }
    if (static_cast<int>(longest) > context_len) {
        throw std::invalid_argument("longest sample (" + std::to_string(longest) +
                                    " tokens) exceeds context_len " +
                                    std::to_string(context_len));
    }
    return examples;
}

int cmd_gen_data(const AppConfig& cfg, const std::string& out_dir) {
    auto corpus = data::build_corpus(cfg.data);
    if (!corpus) {
        std::cerr << ordered_json{{"error", "corpus generation failed"},
                                  {"reason", gen_error_name(corpus.error())}}
                         .dump()
                  << '\n';
        return kExitConfig;
    }
    data::write_corpus(*corpus, cfg.data, out_dir);
    ordered_json summary;
    summary["out"] = out_dir;
    summary["train_samples"] = corpus->train.size();
    summary["test_seen"] = corpus->test_seen.size();
    summary["test_new"] = corpus->test_new.size();
    std::cout << summary.dump(2) << '\n';
    return kExitOk;
}

int cmd_train(AppConfig cfg, const std::string& data_path, const std::string& out_dir) {
    const fs::path in(data_path);
    const std::string train_file =
        fs::is_directory(in) ? (in / "train.jsonl").string() : data_path;
    const auto samples = data::load_train_jsonl(train_file);
    const lm::Vocab& vocab = lm::Vocab::canonical();
    cfg.model.vocab_size = vocab.size();
    const auto examples = tokenize_corpus(vocab, samples, cfg.model.context_len);

    lm::Model model(cfg.model);
    fs::create_directories(out_dir);
    std::ofstream metrics(fs::path(out_dir) / "metrics.csv", std::ios::trunc);
    const train::TrainStats stats = train::train(model, examples, cfg.train, &metrics);

    const std::string ckpt = (fs::path(out_dir) / "checkpoint.bin").string();
    lm::save_checkpoint(model, vocab, ckpt);

    ordered_json summary;
    summary["checkpoint"] = ckpt;
    summary["steps"] = stats.steps;
    summary["first_epoch_mean_loss"] = stats.first_epoch_mean_loss;
    summary["last_epoch_mean_loss"] = stats.last_epoch_mean_loss;
    summary["heldout_loss_before"] = stats.heldout_loss_before;
    summary["heldout_loss_after"] = stats.heldout_loss_after;
    summary["heldout_examples"] = stats.heldout_examples;
    {
        std::ofstream out(fs::path(out_dir) / "train_stats.json", std::ios::trunc);
        out << summary.dump(2) << '\n';
    }
    std::cout << summary.dump(2) << '\n';
    return kExitOk;
}

MethodSpec make_method(const std::string& name, const AppConfig& cfg, int beam_width,
                       int64_t dfs_budget) {
    MethodSpec spec;
    if (name == "greedy") {
        spec.kind = MethodKind::Greedy;
    } else if (name == "beam") {
        spec.kind = MethodKind::Beam;
        spec.beam_width = beam_width;
    } else if (name == "dfs") {
        spec.kind = MethodKind::Dfs;
        spec.dfs_budget = dfs_budget;
    } else if (name == "self_backtrack") {
        spec.kind = MethodKind::SelfBacktrack;
        spec.search = cfg.search;
    } else {
        throw std::invalid_argument("unknown method: " + name);
    }
    return spec;
}

int cmd_eval(const AppConfig& cfg, const std::string& model_path, const std::string& testset_path,
             const std::string& split, const std::string& method_name, int beam_width,
             int64_t dfs_budget, bool audits, const std::string& out_dir,
             const std::string& stem) {
    const auto testset = data::load_test_jsonl(testset_path);
    const MethodSpec method = make_method(method_name, cfg, beam_width, dfs_budget);

    std::unique_ptr<lm::Model> model;
    std::unique_ptr<lm::Vocab> vocab;
    if (method.kind != MethodKind::Dfs) {
        if (model_path.empty()) {
            throw std::invalid_argument("--model is required for method " + method_name);
        }
        auto loaded = lm::load_checkpoint(model_path);
        model = std::move(loaded.model);
        vocab = std::move(loaded.vocab);
    }

    EvalConfig ec;
    ec.seed = cfg.eval_seed;
    ec.max_new = cfg.eval_max_new;
    ec.limit = cfg.eval_limit;
    ec.keep_audits = audits;
    const EvalReport report =
        evaluate(model.get(), vocab.get(), testset, split, method, ec);

    std::cout << report_to_json(report, false).dump(2) << '\n';
    if (!out_dir.empty()) {
        write_report(report, out_dir, stem.empty() ? split + "_" + method_name : stem);
    }
    return kExitOk;
}

int cmd_search(const AppConfig& cfg, const std::string& model_path, int64_t target,
               std::vector<int64_t> numbers, const std::string& testset_path, int index,
               const std::string& out_dir) {
    auto loaded = lm::load_checkpoint(model_path);
    cd::Problem problem;
    if (!testset_path.empty()) {
        const auto testset = data::load_test_jsonl(testset_path);
        if (index < 0 || index >= static_cast<int>(testset.size())) {
            throw std::invalid_argument("--index out of range for the test set");
        }
        problem = testset[static_cast<std::size_t>(index)];
    } else {
        if (numbers.empty() || target <= 0) {
            throw std::invalid_argument("search needs --target and --numbers, or a test set");
        }
        problem.numbers = std::move(numbers);
        problem.target = target;
        problem.id = "cli";
    }

    search::LmBackend backend(*loaded.model, *loaded.vocab, cfg.search.temperature,
                              cfg.search.max_new);
    const auto outcome =
        search::self_backtrack_search(backend, cd::render_prompt(problem), cfg.search);
    const cd::Verdict verdict = cd::verify_path(problem, outcome.best_text);

    ordered_json summary;
    summary["problem"] = ordered_json{{"target", problem.target}, {"numbers", problem.numbers}};
    summary["best_text"] = outcome.best_text;
    summary["verdict"] = cd::verdict_kind_name(verdict.kind);
    summary["used_fallback"] = outcome.used_fallback;
    summary["total_samples"] = outcome.total_samples;
    summary["total_rollbacks"] = outcome.total_rollbacks;
    std::cout << summary.dump(2) << '\n';
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream out(fs::path(out_dir) / "audit.json", std::ios::trunc);
        out << outcome.audit.dump(2) << '\n';
    }
    return kExitOk;
}

int cmd_self_improve(const AppConfig& cfg, const std::string& model_path,
                     const std::string& problems_path, const std::string& eval_path, int rounds,
                     const std::string& out_dir) {
    auto loaded = lm::load_checkpoint(model_path);
    const auto problems = data::load_test_jsonl(problems_path);
    const auto eval_problems = data::load_test_jsonl(eval_path);

    improve::ImproveConfig icfg;
    icfg.rounds = rounds;
    icfg.search = cfg.search;
    icfg.seed = cfg.eval_seed;
    icfg.eval_max_new = cfg.eval_max_new;
    icfg.finetune.seed = cfg.train.seed;

    const auto outcome = improve::expert_iteration(*loaded.model, *loaded.vocab, problems,
                                                   eval_problems, icfg, out_dir);
    ordered_json reports = ordered_json::array();
    for (const auto& r : outcome.reports) {
        ordered_json j;
        to_json(j, r);
        reports.push_back(std::move(j));
    }
    ordered_json summary;
    summary["reports"] = std::move(reports);
    summary["halted_empty_expert_set"] = outcome.halted_empty_expert_set;
    std::cout << summary.dump(2) << '\n';
    return outcome.halted_empty_expert_set ? kExitRuntime : kExitOk;
}

int cmd_sweep(const AppConfig& cfg, const std::string& axis, const std::string& values_csv,
              const std::string& model_path, const std::string& seen_path,
              const std::string& new_path, const std::string& out_dir) {
    std::vector<double> values;
    {
        std::stringstream ss(values_csv);
        std::string item;
        while (std::getline(ss, item, ',')) {
            values.push_back(std::stod(item));
        }
    }
    if (values.empty()) {
        throw std::invalid_argument("--values must list at least one number");
    }
    fs::create_directories(out_dir);
    std::string csv = eval_csv_header();

    if (axis == "ratio_back") {
        // Full pipeline per value: fresh corpus, fresh training run, then a
        // fixed-method eval on the freshly generated splits.
        for (double value : values) {
            AppConfig round_cfg = cfg;
            round_cfg.data.ratio_back = value;
            auto corpus = data::build_corpus(round_cfg.data);
            if (!corpus) {
                throw std::runtime_error("corpus generation failed at ratio " +
                                         std::to_string(value));
            }
            const lm::Vocab& vocab = lm::Vocab::canonical();
            round_cfg.model.vocab_size = vocab.size();
            std::vector<data::RenderedSample> train_samples = corpus->train;
            const auto examples =
                tokenize_corpus(vocab, train_samples, round_cfg.model.context_len);
            lm::Model model(round_cfg.model);
            train::train(model, examples, round_cfg.train);

            MethodSpec method;
            method.kind = MethodKind::SelfBacktrack;
            method.search = round_cfg.search;
            EvalConfig ec;
            ec.seed = round_cfg.eval_seed;
            ec.max_new = round_cfg.eval_max_new;
            ec.limit = round_cfg.eval_limit;
            csv += eval_csv_row(axis, value,
                                evaluate(&model, &vocab, corpus->test_seen, "seen_targets",
                                         method, ec));
            csv += eval_csv_row(axis, value,
                                evaluate(&model, &vocab, corpus->test_new, "new_targets",
                                         method, ec));
        }
    } else {
        if (model_path.empty() || seen_path.empty()) {
            throw std::invalid_argument("sweep over " + axis +
                                        " needs --model and --testset-seen");
        }
        auto loaded = lm::load_checkpoint(model_path);
        const auto seen = data::load_test_jsonl(seen_path);
        std::vector<cd::Problem> new_problems;
        std::vector<NamedTestset> testsets = {{"seen_targets", &seen}};
        if (!new_path.empty()) {
            new_problems = data::load_test_jsonl(new_path);
            testsets.push_back({"new_targets", &new_problems});
        }
        MethodSpec base;
        base.kind = MethodKind::SelfBacktrack;
        base.search = cfg.search;
        EvalConfig ec;
        ec.seed = cfg.eval_seed;
        ec.max_new = cfg.eval_max_new;
        ec.limit = cfg.eval_limit;
        const auto rows = sweep_search_axis(*loaded.model, *loaded.vocab, testsets, axis, values,
                                            base, ec);
        for (const auto& [value, report] : rows) {
            csv += eval_csv_row(axis, value, report);
        }
    }
    const fs::path csv_path = fs::path(out_dir) / ("sweep_" + axis + ".csv");
    std::ofstream out(csv_path, std::ios::trunc);
    out << csv;
    std::cout << csv;
    return kExitOk;
}

int cmd_replay_trace(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::invalid_argument("cannot open trace file: " + path);
    }
    int checked = 0;
    int failed = 0;
    std::vector<std::string> problems;
    if (path.size() >= 6 && path.substr(path.size() - 6) == ".jsonl") {
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) {
                continue;
            }
            const auto result = search::replay_audit(json::parse(line));
            ++checked;
            if (!result.ok) {
                ++failed;
                problems.insert(problems.end(), result.problems.begin(), result.problems.end());
            }
        }
    } else {
        const auto result = search::replay_audit(json::parse(in));
        ++checked;
        if (!result.ok) {
            ++failed;
            problems = result.problems;
        }
    }
    ordered_json summary;
    summary["traces_checked"] = checked;
    summary["traces_failed"] = failed;
    summary["problems"] = problems;
    std::cout << summary.dump(2) << '\n';
    return failed == 0 ? kExitOk : kExitRuntime;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Countdown backtracking laboratory"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::optional<uint64_t> seed;
    app.add_option("--config", config_path, "JSON config file with data/model/train/search/eval sections");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed", seed, "override every section seed");

    auto* gen = app.add_subcommand("gen-data", "generate the training corpus and test splits");
    gen->fallthrough();  // global flags may follow the subcommand

    auto* tr = app.add_subcommand("train", "train a model on a generated corpus");
    tr->fallthrough();  // global flags may follow the subcommand
    std::string data_path;
    tr->add_option("--data", data_path, "corpus directory or train.jsonl")->required();

    auto* ev = app.add_subcommand("eval", "evaluate a method on a test split");
    ev->fallthrough();  // global flags may follow the subcommand
    std::string model_path, testset_path, split_name = "test", method_name = "greedy", stem;
    int beam_width = 16;
    int64_t dfs_budget = cd::kUnlimitedBudget;
    int opt_n = -1, opt_b = -1;
    double opt_temp = -1.0;
    int eval_limit = -1;
    bool audits = false;
    ev->add_option("--model", model_path, "checkpoint path");
    ev->add_option("--testset", testset_path, "test JSONL")->required();
    ev->add_option("--split", split_name, "split label for the report");
    ev->add_option("--method", method_name, "greedy|beam|dfs|self_backtrack");
    ev->add_option("--beam-width", beam_width, "beam width");
    ev->add_option("--dfs-budget", dfs_budget, "DFS retraction budget");
    ev->add_option("--N", opt_n, "search breadth");
    ev->add_option("--b", opt_b, "search budget");
    ev->add_option("--temperature", opt_temp, "sampling temperature");
    ev->add_option("--limit", eval_limit, "evaluate only the first N problems");
    ev->add_option("--stem", stem, "report file stem");
    ev->add_flag("--audits", audits, "persist search audit traces");

    auto* se = app.add_subcommand("search", "run the backtracking search on one problem");
    se->fallthrough();  // global flags may follow the subcommand
    int64_t target = 0;
    std::vector<int64_t> numbers;
    int index = 0;
    std::string search_testset;
    se->add_option("--model", model_path, "checkpoint path")->required();
    se->add_option("--target", target, "target value");
    se->add_option("--numbers", numbers, "operand list");
    se->add_option("--testset", search_testset, "test JSONL to pick a problem from");
    se->add_option("--index", index, "problem index in the test set");
    se->add_option("--N", opt_n, "search breadth");
    se->add_option("--b", opt_b, "search budget");
    se->add_option("--temperature", opt_temp, "sampling temperature");

    auto* im = app.add_subcommand("self-improve", "expert iteration rounds");
    im->fallthrough();  // global flags may follow the subcommand
    std::string problems_path, eval_path;
    int rounds = 1;
    im->add_option("--model", model_path, "starting checkpoint")->required();
    im->add_option("--problems", problems_path, "problem JSONL for generation")->required();
    im->add_option("--eval-testset", eval_path, "held-out JSONL for accuracy reports")->required();
    im->add_option("--rounds", rounds, "iteration count");
    im->add_option("--N", opt_n, "search breadth");
    im->add_option("--b", opt_b, "search budget");

    auto* sw = app.add_subcommand("sweep", "evaluate along one axis and emit CSV");
    sw->fallthrough();  // global flags may follow the subcommand
    std::string axis, values_csv, seen_path, new_path;
    sw->add_option("--axis", axis, "N|b|temperature|ratio_back")->required();
    sw->add_option("--values", values_csv, "comma-separated values")->required();
    sw->add_option("--model", model_path, "checkpoint (N/b/temperature axes)");
    sw->add_option("--testset-seen", seen_path, "seen-targets JSONL");
    sw->add_option("--testset-new", new_path, "new-targets JSONL");
    sw->add_option("--N", opt_n, "base search breadth");
    sw->add_option("--b", opt_b, "base search budget");
    sw->add_option("--temperature", opt_temp, "base temperature");

    auto* rp = app.add_subcommand("replay-trace", "re-verify a persisted audit trace");
    rp->fallthrough();  // global flags may follow the subcommand
    std::string trace_path;
    rp->add_option("trace", trace_path, "audit.json or .audits.jsonl")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);  // --help and friends
        }
        std::cerr << ordered_json{{"error", e.what()}, {"exit_code", kExitConfig}}.dump() << '\n';
        return kExitConfig;
    }

    try {
        AppConfig cfg;
        if (!config_path.empty()) {
            load_config_file(config_path, cfg);
        }
        if (seed) {
            apply_global_seed(cfg, *seed);
        }
        if (opt_n > 0) {
            cfg.search.breadth_n = opt_n;
        }
        if (opt_b >= 0) {
            cfg.search.budget_b = opt_b;
        }
        if (opt_temp > 0.0) {
            cfg.search.temperature = opt_temp;
        }
        if (eval_limit >= 0) {
            cfg.eval_limit = eval_limit;
        }

        if (gen->parsed()) {
            if (out_dir.empty()) {
                throw std::invalid_argument("gen-data needs --out");
            }
            return cmd_gen_data(cfg, out_dir);
        }
        if (tr->parsed()) {
            if (out_dir.empty()) {
                throw std::invalid_argument("train needs --out");
            }
            return cmd_train(cfg, data_path, out_dir);
        }
        if (ev->parsed()) {
            return cmd_eval(cfg, model_path, testset_path, split_name, method_name, beam_width,
                            dfs_budget, audits, out_dir, stem);
        }
        if (se->parsed()) {
            return cmd_search(cfg, model_path, target, numbers, search_testset, index, out_dir);
        }
        if (im->parsed()) {
            if (out_dir.empty()) {
                throw std::invalid_argument("self-improve needs --out");
            }
            return cmd_self_improve(cfg, model_path, problems_path, eval_path, rounds, out_dir);
        }
        if (sw->parsed()) {
            if (out_dir.empty()) {
                throw std::invalid_argument("sweep needs --out");
            }
            return cmd_sweep(cfg, axis, values_csv, model_path, seen_path, new_path, out_dir);
        }
        if (rp->parsed()) {
            return cmd_replay_trace(trace_path);
        }
        throw std::invalid_argument("no subcommand given");
    } catch (const std::invalid_argument& e) {
        std::cerr << ordered_json{{"error", e.what()}, {"exit_code", kExitConfig}}.dump() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << ordered_json{{"error", e.what()}, {"exit_code", kExitRuntime}}.dump() << '\n';
        return kExitRuntime;
    }
}

}  // namespace btlab::harness
