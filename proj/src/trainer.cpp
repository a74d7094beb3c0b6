#include "btlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "btlab/rng.hpp"
#include "btlab/util.hpp"

namespace btlab::train {

using lm::IntMat;
using lm::Mat;
using nlohmann::json;
using nlohmann::ordered_json;

TrainingExample make_training_example(const lm::Vocab& vocab, const data::RenderedSample& sample) {
    TrainingExample ex;
    ex.kind = sample.kind;

    const std::vector<int> prompt_ids = vocab.encode(sample.prompt);
    std::vector<int> offsets;
    const std::vector<int> completion_ids = vocab.encode(sample.completion, &offsets);

    ex.ids.push_back(vocab.bos_id());
    ex.ids.insert(ex.ids.end(), prompt_ids.begin(), prompt_ids.end());
    ex.loss_mask.assign(ex.ids.size(), 0);  // BOS and prompt are never targets

    for (std::size_t i = 0; i < completion_ids.size(); ++i) {
        bool masked_out = false;
        for (const data::MaskSpan& span : sample.mask_spans) {
            if (offsets[i] >= span.begin && offsets[i] < span.end) {
                masked_out = true;
                break;
            }
        }
        ex.ids.push_back(completion_ids[i]);
        ex.loss_mask.push_back(masked_out ? 0 : 1);
    }
    if (sample.kind == data::SampleKind::Optimal) {
        // Optimal solutions learn to terminate; backtrack samples end on the
        // token itself.
        ex.ids.push_back(vocab.eos_id());
        ex.loss_mask.push_back(1);
    }
    return ex;
}

MaskedBatch build_batch(const std::vector<TrainingExample>& examples,
                        const std::vector<int>& indices, int pad_id) {
    int max_len = 0;
    for (int idx : indices) {
        max_len = std::max(max_len, static_cast<int>(examples[idx].ids.size()));
    }
    MaskedBatch batch;
    const int B = static_cast<int>(indices.size());
    batch.ids = IntMat::Constant(B, max_len, pad_id);
    batch.target_mask = Mat::Zero(B, max_len);
    for (int b = 0; b < B; ++b) {
        const TrainingExample& ex = examples[indices[b]];
        batch.kinds.push_back(ex.kind);
        for (std::size_t t = 0; t < ex.ids.size(); ++t) {
            batch.ids(b, static_cast<int>(t)) = ex.ids[t];
            batch.target_mask(b, static_cast<int>(t)) = ex.loss_mask[t];
        }
    }
    return batch;
}

namespace {

// Forward + masked cross-entropy (+ optional backward) over a row range of
// the batch. `weight` is the global 1/total_targets normalizer.
double loss_on_rows(const lm::Model& model, const MaskedBatch& batch, int row_begin, int row_end,
                    double weight, lm::Params* grads, Mat* dlogits_capture) {
    const int T = static_cast<int>(batch.ids.cols());
    const int B = row_end - row_begin;
    const IntMat ids = batch.ids.middleRows(row_begin, B);
    lm::Activations acts;
    model.forward_batch(ids, acts);

    const int V = static_cast<int>(acts.logits.cols());
    Mat dlogits;
    if (grads || dlogits_capture) {
        dlogits = Mat::Zero(acts.logits.rows(), V);
    }
    double loss = 0.0;
    for (int b = 0; b < B; ++b) {
        for (int t = 1; t < T; ++t) {
            if (batch.target_mask(row_begin + b, t) == 0.0) {
                continue;
            }
            const int row = b * T + (t - 1);
            const int y = ids(b, t);
            const auto logits_row = acts.logits.row(row);
            const double mx = logits_row.maxCoeff();
            const double lse = mx + std::log((logits_row.array() - mx).exp().sum());
            loss += (lse - logits_row(y)) * weight;
            if (grads || dlogits_capture) {
                dlogits.row(row) = ((logits_row.array() - lse).exp() * weight).matrix();
                dlogits(row, y) -= weight;
            }
        }
    }
    if (dlogits_capture) {
        *dlogits_capture = dlogits;
    }
    if (grads) {
        model.backward_batch(acts, dlogits, *grads);
    }
    return loss;
}

lm::Params make_zero_like(const lm::Model& model) {
    lm::Params p = model.params();
    p.setZero();
    return p;
}

void accumulate(lm::Params& into, const lm::Params& from) {
    auto dst = into.tensors();
    auto src = from.tensors();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        *dst[i] += *src[i];
    }
}

}  // namespace

LossOutput composite_loss(const lm::Model& model, const MaskedBatch& batch, lm::Params* grads,
                          Mat* dlogits_capture, int n_threads) {
    const int B = static_cast<int>(batch.ids.rows());
    const int T = static_cast<int>(batch.ids.cols());
    long total_targets = 0;
    for (int b = 0; b < B; ++b) {
        for (int t = 1; t < T; ++t) {
            if (batch.target_mask(b, t) != 0.0) {
                ++total_targets;
            }
        }
    }
    if (total_targets == 0) {
        throw EmptyMaskError("batch has no unmasked target positions");
    }
    const double weight = 1.0 / static_cast<double>(total_targets);

    if (n_threads <= 0) {
        n_threads = static_cast<int>(std::thread::hardware_concurrency());
        if (n_threads <= 0) {
            n_threads = 1;
        }
    }
    const int workers = std::min(n_threads, B);
    if (workers <= 1 || dlogits_capture) {
        // Capture implies a single forward so rows line up with the batch.
        const double loss =
            loss_on_rows(model, batch, 0, B, weight, grads, dlogits_capture);
        return {loss, total_targets};
    }

    // Split rows into contiguous chunks; sum losses and gradients in chunk
    // order so the result is independent of scheduling.
    std::vector<double> chunk_loss(static_cast<std::size_t>(workers), 0.0);
    std::vector<lm::Params> chunk_grads;
    if (grads) {
        chunk_grads.reserve(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w) {
            chunk_grads.push_back(make_zero_like(model));
        }
    }
    const int chunk = (B + workers - 1) / workers;
    parallel_for(static_cast<std::size_t>(workers), [&](std::size_t w) {
        const int lo = static_cast<int>(w) * chunk;
        const int hi = std::min(B, lo + chunk);
        if (lo >= hi) {
            return;
        }
        chunk_loss[w] = loss_on_rows(model, batch, lo, hi, weight,
                                     grads ? &chunk_grads[w] : nullptr, nullptr);
    }, static_cast<unsigned>(workers));

    double loss = 0.0;
    for (int w = 0; w < workers; ++w) {
        loss += chunk_loss[static_cast<std::size_t>(w)];
        if (grads) {
            accumulate(*grads, chunk_grads[static_cast<std::size_t>(w)]);
        }
    }
    return {loss, total_targets};
}

void to_json(ordered_json& j, const TrainConfig& cfg) {
    j = ordered_json{{"learning_rate", cfg.learning_rate},
                     {"warmup_steps", cfg.warmup_steps},
                     {"batch_size", cfg.batch_size},
                     {"epochs", cfg.epochs},
                     {"seed", cfg.seed},
                     {"beta1", cfg.beta1},
                     {"beta2", cfg.beta2},
                     {"adam_eps", cfg.adam_eps},
                     {"weight_decay", cfg.weight_decay},
                     {"clip_norm", cfg.clip_norm},
                     {"heldout_fraction", cfg.heldout_fraction},
                     {"max_heldout", cfg.max_heldout},
                     {"n_threads", cfg.n_threads}};
}

void from_json(const json& j, TrainConfig& cfg) {
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.warmup_steps = j.value("warmup_steps", cfg.warmup_steps);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.beta1 = j.value("beta1", cfg.beta1);
    cfg.beta2 = j.value("beta2", cfg.beta2);
    cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.clip_norm = j.value("clip_norm", cfg.clip_norm);
    cfg.heldout_fraction = j.value("heldout_fraction", cfg.heldout_fraction);
    cfg.max_heldout = j.value("max_heldout", cfg.max_heldout);
    cfg.n_threads = j.value("n_threads", cfg.n_threads);
}

double lr_schedule(const TrainConfig& cfg, int step, int total_steps) {
    if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) {
        return cfg.learning_rate * static_cast<double>(step) /
               static_cast<double>(cfg.warmup_steps);
    }
    const double span = std::max(1, total_steps - cfg.warmup_steps);
    const double progress = std::min(1.0, (step - cfg.warmup_steps) / span);
    return cfg.learning_rate * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

AdamState make_adam_state(const lm::Model& model) {
    AdamState state;
    state.m = model.params();
    state.m.setZero();
    state.v = model.params();
    state.v.setZero();
    state.t = 0;
    return state;
}

void adam_step(lm::Model& model, const lm::Params& grads, AdamState& state, double lr,
               const TrainConfig& cfg) {
    ++state.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, state.t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, state.t);
    auto params = model.params().tensors();
    auto gs = grads.tensors();
    auto ms = state.m.tensors();
    auto vs = state.v.tensors();
    for (std::size_t i = 0; i < params.size(); ++i) {
        Mat& p = *params[i];
        const Mat& g = *gs[i];
        Mat& m = *ms[i];
        Mat& v = *vs[i];
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v.array().matrix() + (1.0 - cfg.beta2) * g.array().square().matrix();
        const auto m_hat = m.array() / bc1;
        const auto v_hat = v.array() / bc2;
        if (cfg.weight_decay > 0.0) {
            p.array() -= lr * cfg.weight_decay * p.array();
        }
        p.array() -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

namespace {

double global_grad_norm(const lm::Params& grads) {
    double sq = 0.0;
    for (const Mat* g : grads.tensors()) {
        sq += g->squaredNorm();
    }
    return std::sqrt(sq);
}

void scale_grads(lm::Params& grads, double factor) {
    for (Mat* g : grads.tensors()) {
        *g *= factor;
    }
}

double eval_mean_loss(const lm::Model& model, const std::vector<TrainingExample>& examples,
                      const std::vector<int>& indices, const TrainConfig& cfg, int pad_id) {
    if (indices.empty()) {
        return 0.0;
    }
    double total = 0.0;
    long tokens = 0;
    for (std::size_t lo = 0; lo < indices.size(); lo += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t hi = std::min(indices.size(), lo + static_cast<std::size_t>(cfg.batch_size));
        std::vector<int> chunk(indices.begin() + static_cast<long>(lo),
                               indices.begin() + static_cast<long>(hi));
        const MaskedBatch batch = build_batch(examples, chunk, pad_id);
        const LossOutput out = composite_loss(model, batch, nullptr, nullptr, cfg.n_threads);
        total += out.loss * static_cast<double>(out.n_target_tokens);
        tokens += out.n_target_tokens;
    }
    return tokens > 0 ? total / static_cast<double>(tokens) : 0.0;
}

}  // namespace

TrainStats train(lm::Model& model, const std::vector<TrainingExample>& examples,
                 const TrainConfig& cfg, std::ostream* metrics) {
    if (examples.empty()) {
        throw std::invalid_argument("training corpus is empty");
    }
    const int pad_id = 0;  // the canonical vocab puts PAD at 0
    const int n = static_cast<int>(examples.size());

    // Held-out slice by stride so both corpus halves are represented.
    std::vector<int> train_idx;
    std::vector<int> heldout_idx;
    int stride = 0;
    if (cfg.heldout_fraction > 0.0) {
        stride = std::max(2, static_cast<int>(std::llround(1.0 / cfg.heldout_fraction)));
    }
    for (int i = 0; i < n; ++i) {
        if (stride > 0 && i % stride == stride - 1 &&
            static_cast<int>(heldout_idx.size()) < cfg.max_heldout) {
            heldout_idx.push_back(i);
        } else {
            train_idx.push_back(i);
        }
    }
    if (train_idx.empty()) {
        train_idx = heldout_idx;  // degenerate corpora train on everything
    }

    const int steps_per_epoch =
        (static_cast<int>(train_idx.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const int total_steps = steps_per_epoch * cfg.epochs;

    TrainStats stats;
    stats.heldout_examples = static_cast<long>(heldout_idx.size());
    stats.heldout_loss_before = eval_mean_loss(model, examples, heldout_idx, cfg, pad_id);

    AdamState adam = make_adam_state(model);
    lm::Params grads = model.params();
    const Rng root(cfg.seed);

    if (metrics) {
        *metrics << "step,epoch,loss,lr\n";
    }
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order = train_idx;
        Rng shuffle_rng = root.child(static_cast<uint64_t>(epoch));
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        int epoch_batches = 0;
        for (int lo = 0; lo < static_cast<int>(order.size()); lo += cfg.batch_size) {
            const int hi = std::min<int>(static_cast<int>(order.size()), lo + cfg.batch_size);
            std::vector<int> chunk(order.begin() + lo, order.begin() + hi);
            const MaskedBatch batch = build_batch(examples, chunk, pad_id);
            grads.setZero();
            const LossOutput out = composite_loss(model, batch, &grads, nullptr, cfg.n_threads);
            if (cfg.clip_norm > 0.0) {
                const double norm = global_grad_norm(grads);
                if (norm > cfg.clip_norm) {
                    scale_grads(grads, cfg.clip_norm / norm);
                }
            }
            ++step;
            const double lr = lr_schedule(cfg, step, total_steps);
            adam_step(model, grads, adam, lr, cfg);
            epoch_loss += out.loss;
            ++epoch_batches;
            if (metrics) {
                char row[128];
                std::snprintf(row, sizeof(row), "%d,%d,%.12g,%.12g\n", step, epoch, out.loss, lr);
                *metrics << row;
            }
        }
        const double mean = epoch_batches > 0 ? epoch_loss / epoch_batches : 0.0;
        if (epoch == 0) {
            stats.first_epoch_mean_loss = mean;
        }
        stats.last_epoch_mean_loss = mean;
    }
    stats.steps = step;
    stats.heldout_loss_after = eval_mean_loss(model, examples, heldout_idx, cfg, pad_id);
    return stats;
}

double backtrack_trigger_rate(const lm::Model& model, const lm::Vocab& vocab,
                              const std::vector<data::RenderedSample>& samples,
                              int n_threads) {
    if (samples.empty()) {
        return 0.0;
    }
    std::vector<uint8_t> hit(samples.size(), 0);
    parallel_for(samples.size(), [&](std::size_t i) {
        const data::RenderedSample& s = samples[i];
        const std::size_t tok = s.completion.rfind(countdown::kBacktrackToken);
        if (s.kind != data::SampleKind::Backtrack || tok == std::string::npos) {
            throw std::invalid_argument("trigger rate needs backtrack samples");
        }
        std::vector<int> ids = {vocab.bos_id()};
        for (int id : vocab.encode(s.prompt)) {
            ids.push_back(id);
        }
        for (int id : vocab.encode(s.completion.substr(0, tok))) {
            ids.push_back(id);
        }
        const Eigen::VectorXd row = model.next_logprobs(ids);
        int best = 0;
        for (int v = 1; v < row.size(); ++v) {
            if (row(v) > row(best)) {
                best = v;
            }
        }
        hit[i] = best == vocab.backtrack_id() ? 1 : 0;
    }, n_threads == 0 ? 0 : static_cast<unsigned>(n_threads));
    double count = 0.0;
    for (uint8_t h : hit) {
        count += h;
    }
    return count / static_cast<double>(samples.size());
}

}  // namespace btlab::train
