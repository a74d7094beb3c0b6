#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace btlab::lm {

using Mat = Eigen::MatrixXd;
using IntMat = Eigen::MatrixXi;

class ContextOverflowError : public std::runtime_error {
public:
    explicit ContextOverflowError(const std::string& what) : std::runtime_error(what) {}
};

struct ModelConfig {
    int n_layers{4};
    int d_model{128};
    int n_heads{4};
    int d_ff{512};
    int context_len{256};
    double dropout{0.0};
    uint64_t seed{0};
    int vocab_size{0};

    int head_dim() const { return d_model / n_heads; }
    void validate() const;  // throws std::invalid_argument on bad shapes
};

// All tensors are column-major doubles; vectors are stored as (n, 1).
struct LayerParams {
    Mat ln1_g, ln1_b;
    Mat wq, bq, wk, bk, wv, bv, wo, bo;  // weights (d, d), biases (d, 1)
    Mat ln2_g, ln2_b;
    Mat w1, b1;  // (d, d_ff), (d_ff, 1)
    Mat w2, b2;  // (d_ff, d), (d, 1)
};

struct Params {
    Mat tok_emb;  // (V, d)
    Mat pos_emb;  // (context_len, d)
    std::vector<LayerParams> layers;
    Mat lnf_g, lnf_b;
    Mat w_head;  // (d, V)
    Mat b_head;  // (V, 1)

    // Tensors in a fixed order shared by names(); the order defines the
    // checkpoint payload layout and optimizer state alignment.
    std::vector<Mat*> tensors();
    std::vector<const Mat*> tensors() const;
    static std::vector<std::string> tensor_names(int n_layers);

    void setZero();
    std::size_t scalar_count() const;
};

// Per-batch forward caches kept for the backward pass.
struct Activations {
    int B{0}, T{0};
    IntMat ids;  // (B, T)
    Mat x0;      // (B*T, d); row b*T+t
    struct LayerActs {
        Mat ln1_hat;       // (B*T, d)
        Mat ln1_rstd;      // (B*T, 1)
        Mat q, k, v;       // (B*T, d)
        std::vector<Mat> att;  // B*H entries of (T, T) softmax rows
        Mat att_out;       // (B*T, d) concatenated heads, pre-projection
        Mat x_att;         // (B*T, d) residual stream after attention
        Mat ln2_hat, ln2_rstd;
        Mat h_pre, h_act;  // (B*T, d_ff)
        Mat x_mlp;         // (B*T, d)
    };
    std::vector<LayerActs> layers;
    Mat lnf_hat, lnf_rstd;
    Mat logits;  // (B*T, V)
};

class Model {
public:
    explicit Model(const ModelConfig& config);  // deterministic random init

    const ModelConfig& config() const { return config_; }
    Params& params() { return params_; }
    const Params& params() const { return params_; }

    // Log-probability rows (T, V), one per position, each log-softmax
    // normalized. Throws ContextOverflowError when ids exceed the context.
    Mat forward(const std::vector<int>& ids) const;

    // Next-token log-probability row after the whole sequence.
    Eigen::VectorXd next_logprobs(const std::vector<int>& ids) const;

    // Full-sequence batched forward; fills `acts` for a later backward.
    // Rows of `ids` are sequences padded on the right with pad_id (pads only
    // ever carry zero loss weight, so their activations are inert).
    void forward_batch(const IntMat& ids, Activations& acts) const;

    // Accumulates parameter gradients for d(loss)/d(logits) into `grads`
    // (which must be zero-initialized or hold gradients to accumulate onto).
    void backward_batch(const Activations& acts, const Mat& dlogits, Params& grads) const;

private:
    ModelConfig config_;
    Params params_;
};

// Incremental decoding over a shared prefix with per-stream suffix KV
// caches. All active streams advance in lockstep, so they always share the
// same position; stopped streams simply leave the active set.
class InferenceSession {
public:
    explicit InferenceSession(const Model& model, int max_suffix);

    // Runs the shared prefix once; returns the log-prob row after its last
    // token. Throws ContextOverflowError if the prefix alone is too long.
    Eigen::VectorXd prefill(const std::vector<int>& ids);

    // Creates a stream on top of the prefix; returns its index.
    int add_stream();

    // Advances each listed stream by one token; returns one log-prob row per
    // stream (in the given order). All listed streams must have equal length.
    Mat step(const std::vector<int>& stream_ids, const std::vector<int>& tokens);

    // Replaces the stream set: new stream i becomes a copy of old stream
    // parents[i] (used by beam search reordering).
    void reorder_streams(const std::vector<int>& parents);

    int prefix_len() const { return prefix_len_; }
    int suffix_len(int stream) const { return stream_len_[stream]; }

private:
    const Model& model_;
    int max_suffix_;
    int prefix_len_{0};
    std::vector<Mat> prefix_k_, prefix_v_;            // per layer (prefix, d)
    std::vector<std::vector<Mat>> suffix_k_, suffix_v_;  // [stream][layer] (max_suffix, d)
    std::vector<int> stream_len_;
};

}  // namespace btlab::lm
