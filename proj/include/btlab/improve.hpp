#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "btlab/eval.hpp"
#include "btlab/model.hpp"
#include "btlab/search.hpp"
#include "btlab/trainer.hpp"
#include "btlab/vocab.hpp"

namespace btlab::improve {

struct ImproveConfig {
    int rounds{1};
    search::SearchConfig search;        // slow-thinking generation settings
    train::TrainConfig finetune;        // per-round SFT settings
    uint64_t seed{0};                   // drives per-problem generation seeds
    int eval_max_new{96};
    int n_threads{0};

    ImproveConfig() {
        search.breadth_n = 16;
        search.budget_b = 1;
        finetune.epochs = 1;
        finetune.learning_rate = 1e-4;
        finetune.heldout_fraction = 0.0;
    }
};

void to_json(nlohmann::ordered_json& j, const ImproveConfig& cfg);
void from_json(const nlohmann::json& j, ImproveConfig& cfg);

struct IterationReport {
    int round{0};
    int n_generated{0};
    int n_correct_kept{0};
    double slow_accuracy{0.0};  // search on the eval problems
    double fast_accuracy{0.0};  // greedy on the eval problems
    std::string checkpoint;     // persisted path, empty when not saved
};

void to_json(nlohmann::ordered_json& j, const IterationReport& r);

struct KeptPair {
    std::string problem_id;
    std::string prompt;
    std::string completion;
    double score{0.0};
};

struct ImproveOutcome {
    // reports[0] describes the starting model; reports[t] the model after
    // round t. Rounds stop early (halted flag) when a generation pass keeps
    // zero verifier-correct paths.
    std::vector<IterationReport> reports;
    std::vector<std::vector<KeptPair>> kept_per_round;
    bool halted_empty_expert_set{false};
};

// Expert iteration: generate with the backtracking search on `problems`,
// keep only verifier-correct paths (one per problem, best score), fine-tune
// the model on them, and report slow/fast accuracy on `eval_problems` after
// every round. Writes per-round kept pairs, checkpoints and reports under
// out_dir when non-empty.
ImproveOutcome expert_iteration(lm::Model& model, const lm::Vocab& vocab,
                                const std::vector<countdown::Problem>& problems,
                                const std::vector<countdown::Problem>& eval_problems,
                                const ImproveConfig& cfg, const std::string& out_dir = "");

}  // namespace btlab::improve
