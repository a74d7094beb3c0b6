#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "btlab/countdown.hpp"
#include "btlab/rng.hpp"
#include "btlab/util.hpp"

namespace btlab::data {

enum class SampleKind : uint8_t { Optimal, Backtrack };
enum class ErrorMode : uint8_t { Exploration, Computational, RuleViolation };

std::string_view sample_kind_name(SampleKind kind);
std::string_view error_mode_name(ErrorMode mode);
SampleKind sample_kind_from_name(std::string_view name);
ErrorMode error_mode_from_name(std::string_view name);

// Character range [begin, end) of the completion excluded from the loss.
struct MaskSpan {
    int begin{0};
    int end{0};

    friend bool operator==(const MaskSpan&, const MaskSpan&) = default;
};

struct RenderedSample {
    std::string id;
    std::string prompt;
    std::string completion;
    SampleKind kind{SampleKind::Optimal};
    std::optional<ErrorMode> error_mode;
    std::vector<MaskSpan> mask_spans;  // for Backtrack: exactly the bad-step line
};

struct CorpusConfig {
    int n_optimal{20000};
    double ratio_back{1.0};  // backtrack samples as a multiple of n_optimal
    // exploration : computational : rule-violation, normalized before use
    std::array<double, 3> error_mix{1.0, 2.0, 2.0};
    int k{3};
    int64_t number_min{1};
    int64_t number_max{20};
    int64_t target_min{1};
    int64_t target_max{30};
    double new_target_fraction{0.2};  // share of target values held out
    int n_test_per_split{1000};
    uint64_t seed{0};

    void validate() const;
};

void to_json(nlohmann::ordered_json& j, const CorpusConfig& cfg);
void from_json(const nlohmann::json& j, CorpusConfig& cfg);

enum class GenError { ExhaustedRetries, NoErrorInjectable };

// Disjoint partition of the target values: problems in the training corpus
// and the seen-targets test split draw from `seen`; the new-targets split
// draws from `held_out`.
struct TargetSplit {
    std::vector<int64_t> seen;
    std::vector<int64_t> held_out;
};

TargetSplit split_targets(const CorpusConfig& cfg);

// Rejection-samples a solvable problem whose target comes from target_pool.
// Fails with ExhaustedRetries after 10,000 consecutive rejections.
Result<countdown::Problem, GenError> gen_problem(Rng& rng, const CorpusConfig& cfg,
                                                 const std::vector<int64_t>& target_pool);

// Canonical (prompt, completion) pair for an optimal path.
std::pair<std::string, std::string> render(const countdown::Problem& problem,
                                           const countdown::SolutionPath& path);

// Builds one backtracking sample: a uniform prefix of the optimal path, one
// injected bad step of the given mode, then the backtrack token. The mask
// span covers exactly the injected line. Exploration errors are steps that
// apply cleanly but from which the exhaustive solver finds no completion;
// if no prefix of this path admits one, fails with NoErrorInjectable.
Result<RenderedSample, GenError> make_backtrack_sample(const countdown::Problem& problem,
                                                       const countdown::SolutionPath& path,
                                                       ErrorMode mode, Rng& rng);

// Exact per-mode counts for n_back samples using largest-remainder rounding.
std::array<int, 3> error_mode_counts(int n_back, const std::array<double, 3>& mix);

struct Corpus {
    std::vector<RenderedSample> train;
    std::vector<countdown::Problem> test_seen;
    std::vector<countdown::Problem> test_new;
    TargetSplit targets;
};

Result<Corpus, GenError> build_corpus(const CorpusConfig& cfg);

// Writes train.jsonl, test_seen.jsonl, test_new.jsonl and manifest.json.
// Output bytes are a pure function of the corpus (and config echo).
void write_corpus(const Corpus& corpus, const CorpusConfig& cfg, const std::string& out_dir);

std::vector<RenderedSample> load_train_jsonl(const std::string& path);
std::vector<countdown::Problem> load_test_jsonl(const std::string& path);

}  // namespace btlab::data
