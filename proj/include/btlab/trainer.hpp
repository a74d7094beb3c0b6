#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "btlab/dataset.hpp"
#include "btlab/model.hpp"
#include "btlab/vocab.hpp"

namespace btlab::train {

class EmptyMaskError : public std::runtime_error {
public:
    explicit EmptyMaskError(const std::string& what) : std::runtime_error(what) {}
};

// Tokenized sample. loss_mask[t] == 1 marks ids[t] as a prediction target
// (scored from the logits at position t-1). Prompt tokens are never
// targets; for backtracking samples the injected bad-step tokens are
// excluded while the prefix and the backtrack token itself stay in.
struct TrainingExample {
    std::vector<int> ids;
    std::vector<uint8_t> loss_mask;
    data::SampleKind kind{data::SampleKind::Optimal};
};

TrainingExample make_training_example(const lm::Vocab& vocab, const data::RenderedSample& sample);

// Right-padded batch. target_mask(b, t) weights the prediction of
// ids(b, t); pads and prompts carry weight zero.
struct MaskedBatch {
    lm::IntMat ids;
    lm::Mat target_mask;
    std::vector<data::SampleKind> kinds;
};

MaskedBatch build_batch(const std::vector<TrainingExample>& examples,
                        const std::vector<int>& indices, int pad_id);

struct LossOutput {
    double loss{0.0};
    long n_target_tokens{0};
};

// Mean negative log-likelihood over mask=1 targets. Gradients accumulate
// into *grads when given; dlogits_capture receives d(loss)/d(logits) rows
// (exactly zero at positions whose target is masked out). Throws
// EmptyMaskError when the batch has no unmasked target.
LossOutput composite_loss(const lm::Model& model, const MaskedBatch& batch,
                          lm::Params* grads = nullptr, lm::Mat* dlogits_capture = nullptr,
                          int n_threads = 1);

struct TrainConfig {
    double learning_rate{3e-4};
    int warmup_steps{1};
    int batch_size{16};
    int epochs{3};
    uint64_t seed{0};
    double beta1{0.9};
    double beta2{0.999};
    double adam_eps{1e-8};
    double weight_decay{0.0};
    double clip_norm{1.0};             // 0 disables clipping
    double heldout_fraction{0.02};     // slice kept out of training
    int max_heldout{512};
    int n_threads{0};                  // 0 = hardware concurrency
};

void to_json(nlohmann::ordered_json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

// Cosine decay to zero after linear warmup; step is 1-based.
double lr_schedule(const TrainConfig& cfg, int step, int total_steps);

struct AdamState {
    lm::Params m;
    lm::Params v;
    int t{0};
};

AdamState make_adam_state(const lm::Model& model);
void adam_step(lm::Model& model, const lm::Params& grads, AdamState& state, double lr,
               const TrainConfig& cfg);

struct TrainStats {
    int steps{0};
    double first_epoch_mean_loss{0.0};
    double last_epoch_mean_loss{0.0};
    double heldout_loss_before{0.0};
    double heldout_loss_after{0.0};
    long heldout_examples{0};
};

// SFT over the tokenized corpus. Metrics rows "step,epoch,loss,lr" go to
// *metrics when given (loss is the per-target-token batch mean). Fully
// deterministic for a fixed seed and config.
TrainStats train(lm::Model& model, const std::vector<TrainingExample>& examples,
                 const TrainConfig& cfg, std::ostream* metrics = nullptr);

// Share of contexts (prompt + tokens before the backtrack token) whose
// top-1 next token is the backtrack token. Samples must be Backtrack kind.
double backtrack_trigger_rate(const lm::Model& model, const lm::Vocab& vocab,
                              const std::vector<data::RenderedSample>& samples,
                              int n_threads = 0);

}  // namespace btlab::train
