#include "btlab/improve.hpp"

#include <filesystem>
#include <fstream>
#include <map>

#include "btlab/checkpoint.hpp"
#include "btlab/util.hpp"

namespace btlab::improve {

namespace cd = btlab::countdown;
using nlohmann::json;
using nlohmann::ordered_json;

void to_json(ordered_json& j, const ImproveConfig& cfg) {
    ordered_json search_json;
    to_json(search_json, cfg.search);
    ordered_json ft_json;
    to_json(ft_json, cfg.finetune);
    j = ordered_json{{"rounds", cfg.rounds},
                     {"search", std::move(search_json)},
                     {"finetune", std::move(ft_json)},
                     {"seed", cfg.seed},
                     {"eval_max_new", cfg.eval_max_new}};
}

void from_json(const json& j, ImproveConfig& cfg) {
    cfg.rounds = j.value("rounds", cfg.rounds);
    if (j.contains("search")) {
        from_json(j.at("search"), cfg.search);
    }
    if (j.contains("finetune")) {
        from_json(j.at("finetune"), cfg.finetune);
    }
    cfg.seed = j.value("seed", cfg.seed);
    cfg.eval_max_new = j.value("eval_max_new", cfg.eval_max_new);
}

void to_json(ordered_json& j, const IterationReport& r) {
    j = ordered_json{{"round", r.round},
                     {"n_generated", r.n_generated},
                     {"n_correct_kept", r.n_correct_kept},
                     {"slow_accuracy", r.slow_accuracy},
                     {"fast_accuracy", r.fast_accuracy},
                     {"checkpoint", r.checkpoint}};
}

namespace {

struct GenResult {
    std::string answer;
    bool correct{false};
    double score{0.0};
};

// Slow-thinking pass over the problem set; one search per problem with a
// stable per-(round, problem) seed.
std::vector<GenResult> generate_round(const lm::Model& model, const lm::Vocab& vocab,
                                      const std::vector<cd::Problem>& problems,
                                      const ImproveConfig& cfg, int round) {
    std::vector<GenResult> results(problems.size());
    const Rng round_rng = Rng(cfg.seed).child(static_cast<uint64_t>(round));
    parallel_for(problems.size(), [&](std::size_t i) {
        const cd::Problem& problem = problems[i];
        search::SearchConfig sc = cfg.search;
        sc.seed = round_rng.child_str(problem.id).seed();
        search::LmBackend backend(model, vocab, sc.temperature, sc.max_new);
        const search::SearchOutcome outcome =
            search::self_backtrack_search(backend, cd::render_prompt(problem), sc);
        GenResult& r = results[i];
        r.answer = outcome.best_text;
        r.correct = cd::verify_path(problem, outcome.best_text).correct();
        // Mean log-prob of the chosen candidate, for per-problem dedup.
        r.score = 0.0;
        if (r.correct) {
            std::vector<int> prompt_ids = {vocab.bos_id()};
            for (int id : vocab.encode(cd::render_prompt(problem))) {
                prompt_ids.push_back(id);
            }
            const auto score =
                lm::score_completion(model, prompt_ids, vocab.encode(outcome.best_text));
            r.score = score.mean_logprob;
        }
    }, cfg.n_threads == 0 ? 0 : static_cast<unsigned>(cfg.n_threads));
    return results;
}

IterationReport measure(lm::Model& model, const lm::Vocab& vocab,
                        const std::vector<cd::Problem>& eval_problems, const ImproveConfig& cfg,
                        int round) {
    IterationReport report;
    report.round = round;
    harness::EvalConfig ec;
    ec.seed = Rng(cfg.seed).child_str("eval").child(static_cast<uint64_t>(round)).seed();
    ec.max_new = cfg.eval_max_new;
    ec.n_threads = cfg.n_threads;

    harness::MethodSpec slow;
    slow.kind = harness::MethodKind::SelfBacktrack;
    slow.search = cfg.search;
    report.slow_accuracy =
        harness::evaluate(&model, &vocab, eval_problems, "improve-eval", slow, ec).accuracy;

    harness::MethodSpec fast;
    fast.kind = harness::MethodKind::Greedy;
    report.fast_accuracy =
        harness::evaluate(&model, &vocab, eval_problems, "improve-eval", fast, ec).accuracy;
    return report;
}

void persist_round(const std::string& out_dir, const lm::Model& model, const lm::Vocab& vocab,
                   IterationReport& report, const std::vector<KeptPair>& kept) {
    if (out_dir.empty()) {
        return;
    }
    namespace fs = std::filesystem;
    const fs::path dir = fs::path(out_dir) / ("round_" + std::to_string(report.round));
    fs::create_directories(dir);
    const fs::path ckpt = dir / "checkpoint.bin";
    lm::save_checkpoint(model, vocab, ckpt.string());
    report.checkpoint = ckpt.string();
    {
        std::ofstream out(dir / "kept.jsonl", std::ios::trunc);
        for (const KeptPair& p : kept) {
            out << ordered_json{{"id", p.problem_id},
                                {"prompt", p.prompt},
                                {"completion", p.completion},
                                {"score", p.score}}
                       .dump()
                << '\n';
        }
    }
    {
        ordered_json j;
        to_json(j, report);
        std::ofstream out(dir / "report.json", std::ios::trunc);
        out << j.dump(2) << '\n';
    }
}

}  // namespace

ImproveOutcome expert_iteration(lm::Model& model, const lm::Vocab& vocab,
                                const std::vector<cd::Problem>& problems,
                                const std::vector<cd::Problem>& eval_problems,
                                const ImproveConfig& cfg, const std::string& out_dir) {
    if (cfg.rounds < 1) {
        throw std::invalid_argument("expert iteration needs at least one round");
    }
    if (problems.empty()) {
        throw std::invalid_argument("expert iteration needs a problem set");
    }
    ImproveOutcome outcome;

    IterationReport base = measure(model, vocab, eval_problems, cfg, 0);
    persist_round(out_dir, model, vocab, base, {});
    outcome.reports.push_back(base);
    outcome.kept_per_round.emplace_back();

    for (int round = 1; round <= cfg.rounds; ++round) {
        const auto generated = generate_round(model, vocab, problems, cfg, round);

        // One pair per problem: the best-scoring verifier-correct path.
        std::map<std::string, KeptPair> best;
        for (std::size_t i = 0; i < problems.size(); ++i) {
            if (!generated[i].correct) {
                continue;
            }
            KeptPair pair{problems[i].id, cd::render_prompt(problems[i]), generated[i].answer,
                          generated[i].score};
            auto [it, inserted] = best.try_emplace(pair.problem_id, pair);
            if (!inserted && pair.score > it->second.score) {
                it->second = pair;
            }
        }
        std::vector<KeptPair> kept;
        kept.reserve(best.size());
        for (auto& [id, pair] : best) {
            kept.push_back(std::move(pair));
        }

        if (kept.empty()) {
            outcome.halted_empty_expert_set = true;
            break;
        }

        std::vector<train::TrainingExample> examples;
        examples.reserve(kept.size());
        for (const KeptPair& pair : kept) {
            data::RenderedSample sample;
            sample.id = pair.problem_id;
            sample.prompt = pair.prompt;
            sample.completion = pair.completion;
            sample.kind = data::SampleKind::Optimal;
            examples.push_back(train::make_training_example(vocab, sample));
        }
        train::TrainConfig ft = cfg.finetune;
        ft.seed = Rng(cfg.seed).child_str("finetune").child(static_cast<uint64_t>(round)).seed();
        train::train(model, examples, ft);

        IterationReport report = measure(model, vocab, eval_problems, cfg, round);
        report.n_generated = static_cast<int>(problems.size());
        report.n_correct_kept = static_cast<int>(kept.size());
        persist_round(out_dir, model, vocab, report, kept);
        outcome.reports.push_back(report);
        outcome.kept_per_round.push_back(std::move(kept));
    }
    return outcome;
}

}  // namespace btlab::improve
