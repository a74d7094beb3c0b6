#pragma once

#include <vector>

#include "btlab/model.hpp"
#include "btlab/rng.hpp"

namespace btlab::lm {

// Mean token log-probability of a completion; the candidate-selection
// metric (monotone in negative perplexity, same argmax, no overflow).
struct SequenceScore {
    double total_logprob{0.0};
    int n_scored_tokens{0};
    double mean_logprob{0.0};
};

// Scoring core over precomputed log-prob rows: rows[t] must be the
// distribution for position t+1 of `ids`. Only tokens at positions
// >= prompt_len are scored. Kept free of the model so tests can drive it
// with hand-built tables.
SequenceScore sequence_score_from_rows(const Mat& logprob_rows, const std::vector<int>& ids,
                                       int prompt_len);

// Mean log-prob of completion_ids given prompt_ids; prompt tokens are
// excluded from the score. Throws ContextOverflowError when the combined
// sequence exceeds the context and std::invalid_argument on an empty
// completion.
SequenceScore score_completion(const Model& model, const std::vector<int>& prompt_ids,
                               const std::vector<int>& completion_ids);

struct SampleResult {
    std::vector<int> ids;          // generated tokens; stop token retained
    std::vector<double> logprobs;  // untempered log p of each generated token
    bool hit_stop{false};          // true when EOS or a stop token ended it
};

// Temperature sampling of one continuation. Tokens are drawn from the
// tempered distribution but logprobs record the model's own (T=1)
// distribution. Generation halts on EOS, any stop token (retained in ids),
// max_new tokens, or the context limit.
SampleResult sample(const Model& model, const std::vector<int>& prompt_ids, double temperature,
                    int max_new, const std::vector<int>& stop_set, Rng& rng);

// n independent samples sharing one prompt prefill, advanced in lockstep.
// Stream i draws from rng.child(i), so results are independent of n and of
// which other streams exist (slot i is identical across different n).
std::vector<SampleResult> sample_batch(const Model& model, const std::vector<int>& prompt_ids,
                                       int n, double temperature, int max_new,
                                       const std::vector<int>& stop_set, Rng& rng);

// Greedy decoding (argmax at every step; ties go to the lowest token id).
std::vector<int> greedy(const Model& model, const std::vector<int>& prompt_ids, int max_new,
                        const std::vector<int>& stop_set = {});

struct BeamResult {
    std::vector<int> ids;
    double mean_logprob{0.0};
};

// Beam search pruned by total log-prob during expansion and ranked by mean
// token log-prob at the end. Width 1 reproduces greedy token for token.
BeamResult beam_search(const Model& model, const std::vector<int>& prompt_ids, int width,
                       int max_new, const std::vector<int>& stop_set = {});

}  // namespace btlab::lm
