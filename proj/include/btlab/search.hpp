#pragma once

#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "btlab/decoding.hpp"
#include "btlab/model.hpp"
#include "btlab/rng.hpp"
#include "btlab/vocab.hpp"

namespace btlab::search {

struct SearchConfig {
    int breadth_n{32};       // samples per expansion of the root
    int budget_b{1};         // backtracking rounds
    double temperature{0.7};
    int max_new{96};
    uint64_t seed{0};

    void validate() const;
};

void to_json(nlohmann::ordered_json& j, const SearchConfig& cfg);
void from_json(const nlohmann::json& j, SearchConfig& cfg);

struct TokenLp {
    int id{0};
    double logprob{0.0};
};

// One sampled continuation of prompt + state_text. `text` ends with the
// literal backtrack marker when the model emitted it; `tokens` carries the
// model's own log-probabilities (including EOS when sampled, which `text`
// omits).
struct SampledContinuation {
    std::string text;
    bool contains_backtrack{false};
    std::vector<TokenLp> tokens;
};

// The model surface the search needs. Production wraps the language model;
// tests drive the search with scripted tables.
class GenerationBackend {
public:
    virtual ~GenerationBackend() = default;

    // n lockstep samples continuing prompt + state_text; sample i must draw
    // from rng.child(i) so slot streams are stable across different n.
    virtual std::vector<SampledContinuation> sample_n(const std::string& prompt,
                                                      const std::string& state_text, int n,
                                                      Rng& rng) = 0;

    // Token count of a continuation text under the backend's tokenizer
    // (used to slice inherited token log-probs at a rollback boundary).
    virtual std::size_t token_count(const std::string& text) const = 0;
};

class LmBackend : public GenerationBackend {
public:
    LmBackend(const lm::Model& model, const lm::Vocab& vocab, double temperature, int max_new);

    std::vector<SampledContinuation> sample_n(const std::string& prompt,
                                              const std::string& state_text, int n,
                                              Rng& rng) override;
    std::size_t token_count(const std::string& text) const override;

    const lm::Vocab& vocab() const { return vocab_; }

private:
    const lm::Model& model_;
    const lm::Vocab& vocab_;
    double temperature_;
    int max_new_;
};

struct Candidate {
    std::string full_text;  // whole continuation, inherited prefix included
    bool contains_backtrack{false};
    std::vector<TokenLp> tokens;  // log-probs for the whole continuation
    int round{0};
    int parent{-1};            // global index of the rolled-back source, -1 = root
    std::string parent_state;  // continuation text this expansion started from
};

inline constexpr double kMinusInf = -std::numeric_limits<double>::infinity();

// Mean token log-prob of the whole continuation (the selection score).
double candidate_score(const Candidate& c);

// Same, excluding the trailing backtrack token (backtracker priority).
double pre_backtrack_score(const Candidate& c);

// Removes the trailing backtrack marker plus one reasoning step: a trailing
// partial line when present, otherwise the last complete line. Returns the
// empty continuation when nothing precedes the marker.
std::string rollback(const std::string& candidate_text);

struct Partition {
    std::vector<Candidate> clean;
    std::vector<Candidate> backtrackers;
};

// Samples n continuations of prompt + state_text and partitions them by
// backtrack-marker presence. `inherited` are the token log-probs of
// state_text itself.
Partition expand(GenerationBackend& backend, const std::string& prompt,
                 const std::string& state_text, const std::vector<TokenLp>& inherited, int n,
                 int round, int parent, Rng& rng);

struct SearchOutcome {
    std::string best_text;
    bool used_fallback{false};  // no clean candidate survived
    int total_samples{0};
    int total_rollbacks{0};
    nlohmann::ordered_json audit;
};

// Expansion / Backtracking / Selection. Breadth N at the root; each of
// budget_b rounds rolls back up to floor(sqrt(N)) backtrackers and
// re-expands each with floor(sqrt(N)) fresh samples. Selection returns the
// clean candidate with the highest mean token log-prob; if none exists, the
// best backtracker truncated at its marker. The audit trace records every
// candidate, partition, rollback and score for offline replay.
SearchOutcome self_backtrack_search(GenerationBackend& backend, const std::string& prompt,
                                    const SearchConfig& config);

struct ReplayResult {
    bool ok{true};
    std::vector<std::string> problems;
};

// Structurally re-verifies an audit trace without the model: partitions
// must match the recorded texts, rollbacks must reproduce, budgets must
// hold, and the recorded selection must be the argmax of recorded scores.
ReplayResult replay_audit(const nlohmann::json& audit);

}  // namespace btlab::search
