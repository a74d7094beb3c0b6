#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "btlab/countdown.hpp"
#include "btlab/model.hpp"
#include "btlab/search.hpp"
#include "btlab/vocab.hpp"

namespace btlab::harness {

enum class MethodKind { Greedy, Beam, Dfs, SelfBacktrack };

struct MethodSpec {
    MethodKind kind{MethodKind::Greedy};
    int beam_width{16};
    int64_t dfs_budget{countdown::kUnlimitedBudget};
    search::SearchConfig search;  // used by SelfBacktrack

    std::string descriptor() const;  // e.g. "self_backtrack(b=1,N=32)"
};

struct EvalConfig {
    uint64_t seed{0};
    int max_new{96};
    double temperature{0.7};  // sampling methods only
    int n_threads{0};
    int limit{0};  // evaluate only the first `limit` problems when > 0
    bool keep_audits{false};
};

struct ProblemResult {
    std::string id;
    std::string answer;
    countdown::VerdictKind verdict{countdown::VerdictKind::InvalidStepFormat};
};

struct EvalReport {
    std::string split;
    std::string method;
    int n_problems{0};
    double accuracy{0.0};
    // Keyed by verdict_kind_name of the four error kinds; fractions of n.
    std::map<std::string, double> error_fractions;
    double wall_time_s{0.0};
    nlohmann::ordered_json config_snapshot;
    std::vector<ProblemResult> answers;
    std::vector<nlohmann::ordered_json> audits;  // populated when keep_audits
};

// Runs the method over the test set (parallel over problems, deterministic
// per-problem seeds derived from (seed, problem id)) and classifies every
// answer with the symbolic verifier. Model decoding stops at EOS or the
// backtrack token, which is terminal in the training distribution.
EvalReport evaluate(const lm::Model* model, const lm::Vocab* vocab,
                    const std::vector<countdown::Problem>& testset, const std::string& split_name,
                    const MethodSpec& method, const EvalConfig& cfg);

// Deterministic report body: everything except wall time, which varies by
// machine and lives in the sidecar written by write_report.
nlohmann::ordered_json report_to_json(const EvalReport& report, bool include_answers = true);

// Writes <stem>.json (byte-stable for a fixed seed+config) and
// <stem>.meta.json (timings).
void write_report(const EvalReport& report, const std::string& out_dir, const std::string& stem);

std::string eval_csv_header();
std::string eval_csv_row(const std::string& axis, double value, const EvalReport& report);

// Sweeps a search-side axis ("N", "b" or "temperature") over `values`,
// evaluating each setting on every test split. Returns plot-ready rows in
// input order. The data-side ratio sweep composes the full pipeline and
// lives with the CLI.
struct NamedTestset {
    std::string name;
    const std::vector<countdown::Problem>* problems;
};

std::vector<std::pair<double, EvalReport>> sweep_search_axis(
    const lm::Model& model, const lm::Vocab& vocab, const std::vector<NamedTestset>& testsets,
    const std::string& axis, const std::vector<double>& values, const MethodSpec& base,
    const EvalConfig& cfg);

}  // namespace btlab::harness
