#include "btlab/eval.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>

#include "btlab/decoding.hpp"
#include "btlab/util.hpp"

namespace btlab::harness {

namespace cd = btlab::countdown;
using nlohmann::json;
using nlohmann::ordered_json;

std::string MethodSpec::descriptor() const {
    switch (kind) {
        case MethodKind::Greedy:
            return "greedy";
        case MethodKind::Beam:
            return "beam(" + std::to_string(beam_width) + ")";
        case MethodKind::Dfs:
            return dfs_budget == cd::kUnlimitedBudget
                       ? "dfs(unlimited)"
                       : "dfs(" + std::to_string(dfs_budget) + ")";
        case MethodKind::SelfBacktrack:
            return "self_backtrack(b=" + std::to_string(search.budget_b) +
                   ",N=" + std::to_string(search.breadth_n) + ")";
    }
    return "?";
}

namespace {

std::string answer_for_problem(const lm::Model* model, const lm::Vocab* vocab,
                               const cd::Problem& problem, const MethodSpec& method,
                               const EvalConfig& cfg, uint64_t problem_seed,
                               ordered_json* audit_out) {
    if (method.kind == MethodKind::Dfs) {
        auto path = cd::dfs_with_budget(problem, method.dfs_budget);
        return path ? cd::render_solution(problem, *path) : std::string();
    }

    const std::string prompt = cd::render_prompt(problem);
    std::vector<int> prompt_ids = {vocab->bos_id()};
    for (int id : vocab->encode(prompt)) {
        prompt_ids.push_back(id);
    }
    const std::vector<int> stops = {vocab->eos_id(), vocab->backtrack_id()};

    switch (method.kind) {
        case MethodKind::Greedy:
            return vocab->decode(lm::greedy(*model, prompt_ids, cfg.max_new, stops));
        case MethodKind::Beam:
            return vocab->decode(
                lm::beam_search(*model, prompt_ids, method.beam_width, cfg.max_new, stops).ids);
        case MethodKind::SelfBacktrack: {
            search::SearchConfig sc = method.search;
            sc.seed = problem_seed;
            search::LmBackend backend(*model, *vocab, sc.temperature, sc.max_new);
            search::SearchOutcome outcome = search::self_backtrack_search(backend, prompt, sc);
            if (audit_out) {
                outcome.audit["problem_id"] = problem.id;
                *audit_out = std::move(outcome.audit);
            }
            return outcome.best_text;
        }
        default:
            return {};
    }
}

}  // namespace

EvalReport evaluate(const lm::Model* model, const lm::Vocab* vocab,
                    const std::vector<cd::Problem>& testset, const std::string& split_name,
                    const MethodSpec& method, const EvalConfig& cfg) {
    if (testset.empty()) {
        throw std::invalid_argument("test set is empty");
    }
    if (method.kind != MethodKind::Dfs && (model == nullptr || vocab == nullptr)) {
        throw std::invalid_argument(method.descriptor() + " needs a model");
    }
    const int n = cfg.limit > 0 ? std::min<int>(cfg.limit, static_cast<int>(testset.size()))
                                : static_cast<int>(testset.size());

    EvalReport report;
    report.split = split_name;
    report.method = method.descriptor();
    report.n_problems = n;
    report.answers.resize(static_cast<std::size_t>(n));
    if (cfg.keep_audits && method.kind == MethodKind::SelfBacktrack) {
        report.audits.resize(static_cast<std::size_t>(n));
    }

    const Rng root(cfg.seed);
    const auto t0 = std::chrono::steady_clock::now();
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
        const cd::Problem& problem = testset[i];
        const uint64_t problem_seed = root.child_str(problem.id).seed();
        ordered_json* audit = report.audits.empty() ? nullptr : &report.audits[i];
        const std::string answer =
            answer_for_problem(model, vocab, problem, method, cfg, problem_seed, audit);
        report.answers[i] = {problem.id, answer, cd::verify_path(problem, answer).kind};
    }, cfg.n_threads == 0 ? 0 : static_cast<unsigned>(cfg.n_threads));
    report.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    int correct = 0;
    std::map<cd::VerdictKind, int> errors;
    for (const auto& r : report.answers) {
        if (r.verdict == cd::VerdictKind::Correct) {
            ++correct;
        } else {
            ++errors[r.verdict];
        }
    }
    report.accuracy = static_cast<double>(correct) / n;
    for (cd::VerdictKind kind :
         {cd::VerdictKind::NotReachedTarget, cd::VerdictKind::InvalidStepFormat,
          cd::VerdictKind::IncorrectResultInStep, cd::VerdictKind::UnknownNumbersInStep}) {
        report.error_fractions[std::string(cd::verdict_kind_name(kind))] =
            static_cast<double>(errors[kind]) / n;
    }

    ordered_json snapshot;
    snapshot["method"] = report.method;
    snapshot["seed"] = cfg.seed;
    snapshot["max_new"] = cfg.max_new;
    snapshot["limit"] = cfg.limit;
    if (method.kind == MethodKind::SelfBacktrack) {
        ordered_json sc;
        to_json(sc, method.search);
        sc.erase("seed");  // per-problem seeds derive from the eval seed
        snapshot["search"] = std::move(sc);
    }
    if (method.kind == MethodKind::Beam) {
        snapshot["beam_width"] = method.beam_width;
    }
    if (method.kind == MethodKind::Dfs) {
        snapshot["dfs_budget"] = method.dfs_budget;
    }
    report.config_snapshot = std::move(snapshot);
    return report;
}

ordered_json report_to_json(const EvalReport& report, bool include_answers) {
    ordered_json j;
    j["version"] = 1;
    j["split"] = report.split;
    j["method"] = report.method;
    j["n_problems"] = report.n_problems;
    j["accuracy"] = report.accuracy;
    ordered_json errs;
    for (const auto& [key, value] : report.error_fractions) {
        errs[key] = value;
    }
    j["errors"] = std::move(errs);
    j["config"] = report.config_snapshot;
    if (include_answers) {
        ordered_json answers = ordered_json::array();
        for (const auto& a : report.answers) {
            answers.push_back(ordered_json{{"id", a.id},
                                           {"answer", a.answer},
                                           {"verdict", cd::verdict_kind_name(a.verdict)}});
        }
        j["answers"] = std::move(answers);
    }
    return j;
}

void write_report(const EvalReport& report, const std::string& out_dir, const std::string& stem) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    {
        std::ofstream out(fs::path(out_dir) / (stem + ".json"), std::ios::trunc);
        out << report_to_json(report).dump(2) << '\n';
    }
    {
        ordered_json meta;
        meta["wall_time_s"] = report.wall_time_s;
        std::ofstream out(fs::path(out_dir) / (stem + ".meta.json"), std::ios::trunc);
        out << meta.dump(2) << '\n';
    }
    if (!report.audits.empty()) {
        std::ofstream out(fs::path(out_dir) / (stem + ".audits.jsonl"), std::ios::trunc);
        for (const auto& audit : report.audits) {
            out << audit.dump() << '\n';
        }
    }
}

std::string eval_csv_header() {
    return "axis,value,split,method,n_problems,accuracy,not_reached_target,"
           "invalid_step_format,incorrect_result_in_step,unknown_numbers_in_step\n";
}

std::string eval_csv_row(const std::string& axis, double value, const EvalReport& report) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%s,%.10g,%s,%s,%d,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                  axis.c_str(), value, report.split.c_str(), report.method.c_str(),
                  report.n_problems, report.accuracy,
                  report.error_fractions.at("not_reached_target"),
                  report.error_fractions.at("invalid_step_format"),
                  report.error_fractions.at("incorrect_result_in_step"),
                  report.error_fractions.at("unknown_numbers_in_step"));
    return buf;
}

std::vector<std::pair<double, EvalReport>> sweep_search_axis(
    const lm::Model& model, const lm::Vocab& vocab, const std::vector<NamedTestset>& testsets,
    const std::string& axis, const std::vector<double>& values, const MethodSpec& base,
    const EvalConfig& cfg) {
    if (values.empty()) {
        throw std::invalid_argument("sweep needs at least one value");
    }
    std::vector<std::pair<double, EvalReport>> rows;
    for (double value : values) {
        MethodSpec spec = base;
        spec.kind = MethodKind::SelfBacktrack;
        if (axis == "N") {
            spec.search.breadth_n = static_cast<int>(value);
        } else if (axis == "b") {
            spec.search.budget_b = static_cast<int>(value);
        } else if (axis == "temperature") {
            spec.search.temperature = value;
        } else {
            throw std::invalid_argument("unknown sweep axis: " + axis);
        }
        for (const NamedTestset& ts : testsets) {
            rows.emplace_back(value, evaluate(&model, &vocab, *ts.problems, ts.name, spec, cfg));
        }
    }
    return rows;
}

}  // namespace btlab::harness
