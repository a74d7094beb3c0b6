#include "btlab/model.hpp"

#include <cmath>

#include "btlab/rng.hpp"

namespace btlab::lm {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kMaskValue = -1e30;
constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

inline double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * std::exp(-0.5 * x * x) * kInvSqrt2Pi;
}

// y = ln(x) cached as x_hat and rstd; returns y.
Mat layernorm_forward(const Mat& x, const Mat& g, const Mat& b, Mat& x_hat, Mat& rstd) {
    const Eigen::VectorXd mu = x.rowwise().mean();
    Mat centered = x.colwise() - mu;
    const Eigen::VectorXd var = centered.array().square().rowwise().mean();
    rstd = (var.array() + kLnEps).rsqrt().matrix();
    x_hat = centered.array().colwise() * rstd.col(0).array();
    Mat y = x_hat.array().rowwise() * g.col(0).transpose().array();
    y.array().rowwise() += b.col(0).transpose().array();
    return y;
}

// Backward through layernorm; accumulates dg/db, returns dx.
Mat layernorm_backward(const Mat& dy, const Mat& x_hat, const Mat& rstd, const Mat& g,
                       Mat& dg, Mat& db) {
    dg.col(0).noalias() += (dy.array() * x_hat.array()).colwise().sum().matrix().transpose();
    db.col(0).noalias() += dy.colwise().sum().transpose();
    Mat dxhat = dy.array().rowwise() * g.col(0).transpose().array();
    const Eigen::VectorXd m1 = dxhat.rowwise().mean();
    const Eigen::VectorXd m2 = (dxhat.array() * x_hat.array()).rowwise().mean();
    Mat dx = dxhat;
    dx.colwise() -= m1;
    dx.array() -= x_hat.array().colwise() * m2.array();
    dx.array().colwise() *= rstd.col(0).array();
    return dx;
}

inline void add_bias(Mat& m, const Mat& b) {
    m.array().rowwise() += b.col(0).transpose().array();
}

// Reconstructs the layernorm output from cached normalized rows.
inline Mat ln_affine(const Mat& x_hat, const Mat& g, const Mat& b) {
    Mat y = x_hat.array().rowwise() * g.col(0).transpose().array();
    y.array().rowwise() += b.col(0).transpose().array();
    return y;
}

// In-place row-wise softmax with max subtraction.
void softmax_rows(Mat& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        auto row = m.row(i);
        const double mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
    }
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 0 || d_model <= 0 || n_heads <= 0 || d_ff <= 0 || context_len <= 0) {
        throw std::invalid_argument("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("d_model must be divisible by n_heads");
    }
    if (vocab_size <= 0) {
        throw std::invalid_argument("vocab_size must be set");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw std::invalid_argument("dropout must be in [0, 1)");
    }
}

std::vector<Mat*> Params::tensors() {
    std::vector<Mat*> out = {&tok_emb, &pos_emb};
    for (auto& l : layers) {
        for (Mat* m : {&l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv,
                       &l.wo, &l.bo, &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2}) {
            out.push_back(m);
        }
    }
    out.push_back(&lnf_g);
    out.push_back(&lnf_b);
    out.push_back(&w_head);
    out.push_back(&b_head);
    return out;
}

std::vector<const Mat*> Params::tensors() const {
    auto mut = const_cast<Params*>(this)->tensors();
    return {mut.begin(), mut.end()};
}

std::vector<std::string> Params::tensor_names(int n_layers) {
    std::vector<std::string> names = {"tok_emb", "pos_emb"};
    for (int i = 0; i < n_layers; ++i) {
        const std::string p = "layer" + std::to_string(i) + ".";
        for (const char* n : {"ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                              "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"}) {
            names.push_back(p + n);
        }
    }
    names.push_back("lnf_g");
    names.push_back("lnf_b");
    names.push_back("w_head");
    names.push_back("b_head");
    return names;
}

void Params::setZero() {
    for (Mat* m : tensors()) {
        m->setZero();
    }
}

std::size_t Params::scalar_count() const {
    std::size_t n = 0;
    for (const Mat* m : tensors()) {
        n += static_cast<std::size_t>(m->size());
    }
    return n;
}

Model::Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    const int d = config_.d_model;
    const int v = config_.vocab_size;

    params_.tok_emb.resize(v, d);
    params_.pos_emb.resize(config_.context_len, d);
    params_.layers.resize(config_.n_layers);
    for (auto& l : params_.layers) {
        l.ln1_g = Mat::Ones(d, 1);
        l.ln1_b = Mat::Zero(d, 1);
        l.wq.resize(d, d);
        l.bq = Mat::Zero(d, 1);
        l.wk.resize(d, d);
        l.bk = Mat::Zero(d, 1);
        l.wv.resize(d, d);
        l.bv = Mat::Zero(d, 1);
        l.wo.resize(d, d);
        l.bo = Mat::Zero(d, 1);
        l.ln2_g = Mat::Ones(d, 1);
        l.ln2_b = Mat::Zero(d, 1);
        l.w1.resize(d, config_.d_ff);
        l.b1 = Mat::Zero(config_.d_ff, 1);
        l.w2.resize(config_.d_ff, d);
        l.b2 = Mat::Zero(d, 1);
    }
    params_.lnf_g = Mat::Ones(d, 1);
    params_.lnf_b = Mat::Zero(d, 1);
    params_.w_head.resize(d, v);
    params_.b_head = Mat::Zero(v, 1);

    // Deterministic init: its own stream per tensor, residual projections
    // scaled down by depth.
    const double base_std = 0.02;
    const double resid_std =
        config_.n_layers > 0 ? base_std / std::sqrt(2.0 * config_.n_layers) : base_std;
    Rng root(config_.seed);
    auto names = Params::tensor_names(config_.n_layers);
    auto tensors = params_.tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const std::string& name = names[i];
        const bool is_weight = name == "tok_emb" || name == "pos_emb" ||
                               name.find(".w") != std::string::npos || name == "w_head";
        if (!is_weight) {
            continue;  // biases and layernorm params keep their constant init
        }
        const bool is_resid = name.find(".wo") != std::string::npos ||
                              name.find(".w2") != std::string::npos;
        const double std_dev = is_resid ? resid_std : base_std;
        Rng stream = root.child(i);
        Mat& m = *tensors[i];
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            for (Eigen::Index r = 0; r < m.rows(); ++r) {
                m(r, c) = stream.gauss() * std_dev;
            }
        }
    }
}

void Model::forward_batch(const IntMat& ids, Activations& acts) const {
    const int B = static_cast<int>(ids.rows());
    const int T = static_cast<int>(ids.cols());
    if (T > config_.context_len) {
        throw ContextOverflowError("sequence length " + std::to_string(T) +
                                   " exceeds context " + std::to_string(config_.context_len));
    }
    const int d = config_.d_model;
    const int H = config_.n_heads;
    const int hd = config_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const int R = B * T;

    acts.B = B;
    acts.T = T;
    acts.ids = ids;
    acts.x0.resize(R, d);
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t < T; ++t) {
            acts.x0.row(b * T + t) =
                params_.tok_emb.row(ids(b, t)) + params_.pos_emb.row(t);
        }
    }

    Mat x = acts.x0;
    acts.layers.assign(config_.n_layers, {});
    for (int li = 0; li < config_.n_layers; ++li) {
        const LayerParams& lp = params_.layers[li];
        auto& la = acts.layers[li];

        Mat normed = layernorm_forward(x, lp.ln1_g, lp.ln1_b, la.ln1_hat, la.ln1_rstd);
        la.q.noalias() = normed * lp.wq;
        add_bias(la.q, lp.bq);
        la.k.noalias() = normed * lp.wk;
        add_bias(la.k, lp.bk);
        la.v.noalias() = normed * lp.wv;
        add_bias(la.v, lp.bv);

        la.att.assign(static_cast<std::size_t>(B) * H, Mat());
        la.att_out.resize(R, d);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                auto Q = la.q.block(b * T, h * hd, T, hd);
                auto K = la.k.block(b * T, h * hd, T, hd);
                auto V = la.v.block(b * T, h * hd, T, hd);
                Mat scores = (Q * K.transpose()) * scale;
                for (int i = 0; i < T; ++i) {
                    for (int j = i + 1; j < T; ++j) {
                        scores(i, j) = kMaskValue;  // causal mask
                    }
                }
                softmax_rows(scores);
                la.att_out.block(b * T, h * hd, T, hd).noalias() = scores * V;
                la.att[static_cast<std::size_t>(b) * H + h] = std::move(scores);
            }
        }
        Mat proj = la.att_out * lp.wo;
        add_bias(proj, lp.bo);
        la.x_att = x + proj;

        Mat normed2 = layernorm_forward(la.x_att, lp.ln2_g, lp.ln2_b, la.ln2_hat, la.ln2_rstd);
        la.h_pre.noalias() = normed2 * lp.w1;
        add_bias(la.h_pre, lp.b1);
        la.h_act = la.h_pre.unaryExpr([](double v) { return gelu(v); });
        Mat mlp = la.h_act * lp.w2;
        add_bias(mlp, lp.b2);
        la.x_mlp = la.x_att + mlp;
        x = la.x_mlp;
    }

    Mat final_norm = layernorm_forward(x, params_.lnf_g, params_.lnf_b, acts.lnf_hat, acts.lnf_rstd);
    acts.logits.noalias() = final_norm * params_.w_head;
    add_bias(acts.logits, params_.b_head);
}

void Model::backward_batch(const Activations& acts, const Mat& dlogits, Params& grads) const {
    const int B = acts.B;
    const int T = acts.T;
    const int d = config_.d_model;
    const int H = config_.n_heads;
    const int hd = config_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    // Head and final layernorm.
    grads.w_head.noalias() +=
        ln_affine(acts.lnf_hat, params_.lnf_g, params_.lnf_b).transpose() * dlogits;
    grads.b_head.col(0).noalias() += dlogits.colwise().sum().transpose();
    Mat d_final_norm = dlogits * params_.w_head.transpose();
    Mat dx = layernorm_backward(d_final_norm, acts.lnf_hat, acts.lnf_rstd, params_.lnf_g,
                                grads.lnf_g, grads.lnf_b);

    for (int li = config_.n_layers - 1; li >= 0; --li) {
        const LayerParams& lp = params_.layers[li];
        const auto& la = acts.layers[li];
        LayerParams& lg = grads.layers[li];

        // MLP block: x_mlp = x_att + gelu(ln2(x_att) W1 + b1) W2 + b2
        Mat d_mlp_out = dx;  // gradient on the mlp branch output
        lg.w2.noalias() += la.h_act.transpose() * d_mlp_out;
        lg.b2.col(0).noalias() += d_mlp_out.colwise().sum().transpose();
        Mat dh_act = d_mlp_out * lp.w2.transpose();
        Mat dh_pre = dh_act.cwiseProduct(la.h_pre.unaryExpr([](double v) { return gelu_grad(v); }));
        lg.w1.noalias() += ln_affine(la.ln2_hat, lp.ln2_g, lp.ln2_b).transpose() * dh_pre;
        lg.b1.col(0).noalias() += dh_pre.colwise().sum().transpose();
        Mat d_normed2 = dh_pre * lp.w1.transpose();
        Mat d_x_att = layernorm_backward(d_normed2, la.ln2_hat, la.ln2_rstd, lp.ln2_g,
                                         lg.ln2_g, lg.ln2_b);
        d_x_att += dx;  // residual path

        // Attention block: x_att = x + (att_out) Wo + bo
        Mat d_proj = d_x_att;
        lg.wo.noalias() += la.att_out.transpose() * d_proj;
        lg.bo.col(0).noalias() += d_proj.colwise().sum().transpose();
        Mat d_att_out = d_proj * lp.wo.transpose();

        Mat dq = Mat::Zero(d_att_out.rows(), d);
        Mat dk = Mat::Zero(d_att_out.rows(), d);
        Mat dv = Mat::Zero(d_att_out.rows(), d);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                const Mat& P = la.att[static_cast<std::size_t>(b) * H + h];
                auto dO = d_att_out.block(b * T, h * hd, T, hd);
                auto Q = la.q.block(b * T, h * hd, T, hd);
                auto K = la.k.block(b * T, h * hd, T, hd);
                auto V = la.v.block(b * T, h * hd, T, hd);
                Mat dP = dO * V.transpose();
                dv.block(b * T, h * hd, T, hd).noalias() = P.transpose() * dO;
                const Eigen::VectorXd rowdot = (dP.array() * P.array()).rowwise().sum();
                Mat dS = P.array() * (dP.colwise() - rowdot).array();
                dS *= scale;
                dq.block(b * T, h * hd, T, hd).noalias() = dS * K;
                dk.block(b * T, h * hd, T, hd).noalias() = dS.transpose() * Q;
            }
        }

        // Projections share the ln1 output as input.
        Mat normed1 = ln_affine(la.ln1_hat, lp.ln1_g, lp.ln1_b);
        lg.wq.noalias() += normed1.transpose() * dq;
        lg.bq.col(0).noalias() += dq.colwise().sum().transpose();
        lg.wk.noalias() += normed1.transpose() * dk;
        lg.bk.col(0).noalias() += dk.colwise().sum().transpose();
        lg.wv.noalias() += normed1.transpose() * dv;
        lg.bv.col(0).noalias() += dv.colwise().sum().transpose();

        Mat d_normed1 = dq * lp.wq.transpose();
        d_normed1.noalias() += dk * lp.wk.transpose();
        d_normed1.noalias() += dv * lp.wv.transpose();
        Mat dx_ln1 = layernorm_backward(d_normed1, la.ln1_hat, la.ln1_rstd, lp.ln1_g,
                                        lg.ln1_g, lg.ln1_b);
        dx = d_x_att + dx_ln1;
    }

    // Embeddings.
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t < T; ++t) {
            grads.tok_emb.row(acts.ids(b, t)) += dx.row(b * T + t);
            grads.pos_emb.row(t) += dx.row(b * T + t);
        }
    }
}

Mat Model::forward(const std::vector<int>& ids) const {
    if (ids.empty()) {
        return Mat(0, config_.vocab_size);
    }
    IntMat m(1, static_cast<int>(ids.size()));
    for (std::size_t i = 0; i < ids.size(); ++i) {
        m(0, static_cast<int>(i)) = ids[i];
    }
    Activations acts;
    forward_batch(m, acts);
    Mat rows = acts.logits;
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
        auto row = rows.row(i);
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        row.array() -= lse;
    }
    return rows;
}

Eigen::VectorXd Model::next_logprobs(const std::vector<int>& ids) const {
    Mat rows = forward(ids);
    if (rows.rows() == 0) {
        throw std::invalid_argument("next_logprobs requires a non-empty sequence");
    }
    return rows.row(rows.rows() - 1).transpose();
}

// ---------------------------------------------------------------------------
// Incremental inference
// ---------------------------------------------------------------------------

InferenceSession::InferenceSession(const Model& model, int max_suffix)
    : model_(model), max_suffix_(max_suffix) {
    const auto& cfg = model_.config();
    prefix_k_.assign(cfg.n_layers, Mat());
    prefix_v_.assign(cfg.n_layers, Mat());
}

Eigen::VectorXd InferenceSession::prefill(const std::vector<int>& ids) {
    if (ids.empty()) {
        throw std::invalid_argument("prefill requires a non-empty prefix");
    }
    const auto& cfg = model_.config();
    if (static_cast<int>(ids.size()) > cfg.context_len) {
        throw ContextOverflowError("prefix exceeds the model context");
    }
    prefix_len_ = static_cast<int>(ids.size());

    // Full forward over the prefix, keeping per-layer K/V.
    IntMat m(1, prefix_len_);
    for (int i = 0; i < prefix_len_; ++i) {
        m(0, i) = ids[i];
    }
    Activations acts;
    model_.forward_batch(m, acts);
    for (int li = 0; li < cfg.n_layers; ++li) {
        prefix_k_[li] = acts.layers[li].k;
        prefix_v_[li] = acts.layers[li].v;
    }
    Eigen::VectorXd row = acts.logits.row(prefix_len_ - 1).transpose();
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    return (row.array() - lse).matrix();
}

int InferenceSession::add_stream() {
    const auto& cfg = model_.config();
    std::vector<Mat> ks(cfg.n_layers, Mat::Zero(max_suffix_, cfg.d_model));
    suffix_k_.push_back(std::move(ks));
    std::vector<Mat> vs(cfg.n_layers, Mat::Zero(max_suffix_, cfg.d_model));
    suffix_v_.push_back(std::move(vs));
    stream_len_.push_back(0);
    return static_cast<int>(stream_len_.size()) - 1;
}

void InferenceSession::reorder_streams(const std::vector<int>& parents) {
    std::vector<std::vector<Mat>> nk, nv;
    std::vector<int> nlen;
    nk.reserve(parents.size());
    nv.reserve(parents.size());
    for (int p : parents) {
        nk.push_back(suffix_k_[p]);
        nv.push_back(suffix_v_[p]);
        nlen.push_back(stream_len_[p]);
    }
    suffix_k_ = std::move(nk);
    suffix_v_ = std::move(nv);
    stream_len_ = std::move(nlen);
}

Mat InferenceSession::step(const std::vector<int>& stream_ids, const std::vector<int>& tokens) {
    const auto& cfg = model_.config();
    const int n = static_cast<int>(stream_ids.size());
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    const int suffix = stream_len_[stream_ids[0]];
    for (int s : stream_ids) {
        if (stream_len_[s] != suffix) {
            throw std::logic_error("lockstep step() requires equal stream lengths");
        }
    }
    const int pos = prefix_len_ + suffix;
    if (pos >= cfg.context_len) {
        throw ContextOverflowError("generation reached the model context");
    }
    if (suffix >= max_suffix_) {
        throw ContextOverflowError("generation reached the session suffix capacity");
    }

    Mat x(n, d);
    for (int i = 0; i < n; ++i) {
        x.row(i) = model_.params().tok_emb.row(tokens[i]) + model_.params().pos_emb.row(pos);
    }

    for (int li = 0; li < cfg.n_layers; ++li) {
        const LayerParams& lp = model_.params().layers[li];
        Mat hat, rstd;
        Mat normed = layernorm_forward(x, lp.ln1_g, lp.ln1_b, hat, rstd);
        Mat q = normed * lp.wq;
        add_bias(q, lp.bq);
        Mat k = normed * lp.wk;
        add_bias(k, lp.bk);
        Mat v = normed * lp.wv;
        add_bias(v, lp.bv);

        Mat att_out(n, d);
        for (int i = 0; i < n; ++i) {
            const int s = stream_ids[i];
            suffix_k_[s][li].row(suffix) = k.row(i);
            suffix_v_[s][li].row(suffix) = v.row(i);
            for (int h = 0; h < H; ++h) {
                const auto qh = q.row(i).segment(h * hd, hd);
                Eigen::VectorXd scores(pos + 1);
                scores.head(prefix_len_).noalias() =
                    prefix_k_[li].middleCols(h * hd, hd) * qh.transpose();
                scores.segment(prefix_len_, suffix + 1).noalias() =
                    suffix_k_[s][li].topRows(suffix + 1).middleCols(h * hd, hd) * qh.transpose();
                scores *= scale;
                const double mx = scores.maxCoeff();
                Eigen::VectorXd p = (scores.array() - mx).exp();
                p /= p.sum();
                Eigen::RowVectorXd out =
                    p.head(prefix_len_).transpose() * prefix_v_[li].middleCols(h * hd, hd);
                out.noalias() += p.segment(prefix_len_, suffix + 1).transpose() *
                                 suffix_v_[s][li].topRows(suffix + 1).middleCols(h * hd, hd);
                att_out.row(i).segment(h * hd, hd) = out;
            }
        }
        Mat proj = att_out * lp.wo;
        add_bias(proj, lp.bo);
        x += proj;

        Mat hat2, rstd2;
        Mat normed2 = layernorm_forward(x, lp.ln2_g, lp.ln2_b, hat2, rstd2);
        Mat h_pre = normed2 * lp.w1;
        add_bias(h_pre, lp.b1);
        Mat h_act = h_pre.unaryExpr([](double val) { return gelu(val); });
        Mat mlp = h_act * lp.w2;
        add_bias(mlp, lp.b2);
        x += mlp;
    }

    Mat hf, rf;
    Mat normed = layernorm_forward(x, model_.params().lnf_g, model_.params().lnf_b, hf, rf);
    Mat logits = normed * model_.params().w_head;
    add_bias(logits, model_.params().b_head);
    for (int i = 0; i < n; ++i) {
        auto row = logits.row(i);
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        row.array() -= lse;
    }
    for (int i = 0; i < n; ++i) {
        stream_len_[stream_ids[i]] = suffix + 1;
    }
    return logits;
}

}  // namespace btlab::lm
