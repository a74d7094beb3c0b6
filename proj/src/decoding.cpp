#include "btlab/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace btlab::lm {

namespace {

int argmax_row(const Eigen::VectorXd& row) {
    int best = 0;
    for (int i = 1; i < row.size(); ++i) {
        if (row(i) > row(best)) {
            best = i;
        }
    }
    return best;
}

// Draw from softmax(logprobs / temperature) by CDF walk in id order.
int draw_tempered(const Eigen::VectorXd& logprobs, double temperature, Rng& rng) {
    Eigen::VectorXd t = logprobs / temperature;
    const double mx = t.maxCoeff();
    Eigen::VectorXd p = (t.array() - mx).exp();
    p /= p.sum();
    const double u = rng.uniform();
    double c = 0.0;
    for (int i = 0; i < p.size(); ++i) {
        c += p(i);
        if (u < c) {
            return i;
        }
    }
    return static_cast<int>(p.size()) - 1;
}

}  // namespace

SequenceScore sequence_score_from_rows(const Mat& logprob_rows, const std::vector<int>& ids,
                                       int prompt_len) {
    SequenceScore score;
    for (int t = prompt_len; t < static_cast<int>(ids.size()); ++t) {
        score.total_logprob += logprob_rows(t - 1, ids[t]);
        ++score.n_scored_tokens;
    }
    if (score.n_scored_tokens == 0) {
        throw std::invalid_argument("no completion tokens to score");
    }
    score.mean_logprob = score.total_logprob / score.n_scored_tokens;
    return score;
}

SequenceScore score_completion(const Model& model, const std::vector<int>& prompt_ids,
                               const std::vector<int>& completion_ids) {
    if (completion_ids.empty()) {
        throw std::invalid_argument("completion must be non-empty");
    }
    if (prompt_ids.empty()) {
        throw std::invalid_argument("prompt must be non-empty");
    }
    std::vector<int> full = prompt_ids;
    full.insert(full.end(), completion_ids.begin(), completion_ids.end());
    const Mat rows = model.forward(full);
    return sequence_score_from_rows(rows, full, static_cast<int>(prompt_ids.size()));
}

std::vector<SampleResult> sample_batch(const Model& model, const std::vector<int>& prompt_ids,
                                       int n, double temperature, int max_new,
                                       const std::vector<int>& stop_set, Rng& rng) {
    if (temperature <= 0.0) {
        throw std::invalid_argument("temperature must be positive");
    }
    if (static_cast<int>(prompt_ids.size()) >= model.config().context_len) {
        throw ContextOverflowError("prompt leaves no room for generation");
    }
    const int cap = std::min(max_new, model.config().context_len -
                                          static_cast<int>(prompt_ids.size()));
    std::vector<SampleResult> results(n);
    if (n == 0 || cap <= 0) {
        return results;
    }

    const std::set<int> stops(stop_set.begin(), stop_set.end());
    InferenceSession session(model, cap);
    const Eigen::VectorXd first_row = session.prefill(prompt_ids);

    std::vector<Rng> streams;
    streams.reserve(n);
    std::vector<int> active;
    for (int i = 0; i < n; ++i) {
        session.add_stream();
        streams.push_back(rng.child(i));
        active.push_back(i);
    }

    // The first token of every stream comes from the shared prefill row;
    // afterwards the active set advances in lockstep.
    std::vector<int> pending_tok(n, 0);
    std::vector<double> pending_lp(n, 0.0);
    for (int i : active) {
        pending_tok[i] = draw_tempered(first_row, temperature, streams[i]);
        pending_lp[i] = first_row(pending_tok[i]);
    }
    for (int step_idx = 0; !active.empty(); ++step_idx) {
        std::vector<int> still;
        std::vector<int> step_tokens;
        for (int i : active) {
            results[i].ids.push_back(pending_tok[i]);
            results[i].logprobs.push_back(pending_lp[i]);
            if (stops.count(pending_tok[i])) {
                results[i].hit_stop = true;
                continue;
            }
            if (step_idx + 1 >= cap) {
                continue;  // token budget exhausted, stream ends open
            }
            still.push_back(i);
            step_tokens.push_back(pending_tok[i]);
        }
        active = std::move(still);
        if (active.empty()) {
            break;
        }
        const Mat rows = session.step(active, step_tokens);
        for (std::size_t r = 0; r < active.size(); ++r) {
            const int i = active[r];
            pending_tok[i] =
                draw_tempered(rows.row(static_cast<int>(r)).transpose(), temperature, streams[i]);
            pending_lp[i] = rows(static_cast<int>(r), pending_tok[i]);
        }
    }
    return results;
}

SampleResult sample(const Model& model, const std::vector<int>& prompt_ids, double temperature,
                    int max_new, const std::vector<int>& stop_set, Rng& rng) {
    if (temperature <= 0.0) {
        throw std::invalid_argument("temperature must be positive");
    }
    if (static_cast<int>(prompt_ids.size()) >= model.config().context_len) {
        throw ContextOverflowError("prompt leaves no room for generation");
    }
    const int cap = std::min(max_new, model.config().context_len -
                                          static_cast<int>(prompt_ids.size()));
    SampleResult result;
    if (cap <= 0) {
        return result;
    }
    const std::set<int> stops(stop_set.begin(), stop_set.end());
    InferenceSession session(model, cap);
    Eigen::VectorXd row = session.prefill(prompt_ids);
    session.add_stream();
    for (int step_idx = 0; step_idx < cap; ++step_idx) {
        const int tok = draw_tempered(row, temperature, rng);
        result.ids.push_back(tok);
        result.logprobs.push_back(row(tok));
        if (stops.count(tok)) {
            result.hit_stop = true;
            break;
        }
        if (step_idx + 1 >= cap) {
            break;
        }
        row = session.step({0}, {tok}).row(0).transpose();
    }
    return result;
}

std::vector<int> greedy(const Model& model, const std::vector<int>& prompt_ids, int max_new,
                        const std::vector<int>& stop_set) {
    if (static_cast<int>(prompt_ids.size()) >= model.config().context_len) {
        throw ContextOverflowError("prompt leaves no room for generation");
    }
    const int cap = std::min(max_new, model.config().context_len -
                                          static_cast<int>(prompt_ids.size()));
    std::vector<int> out;
    if (cap <= 0) {
        return out;
    }
    const std::set<int> stops(stop_set.begin(), stop_set.end());
    InferenceSession session(model, cap);
    Eigen::VectorXd row = session.prefill(prompt_ids);
    session.add_stream();
    for (int step_idx = 0; step_idx < cap; ++step_idx) {
        const int tok = argmax_row(row);
        out.push_back(tok);
        if (stops.count(tok)) {
            break;
        }
        if (step_idx + 1 >= cap) {
            break;
        }
        row = session.step({0}, {tok}).row(0).transpose();
    }
    return out;
}

BeamResult beam_search(const Model& model, const std::vector<int>& prompt_ids, int width,
                       int max_new, const std::vector<int>& stop_set) {
    if (width < 1) {
        throw std::invalid_argument("beam width must be >= 1");
    }
    if (static_cast<int>(prompt_ids.size()) >= model.config().context_len) {
        throw ContextOverflowError("prompt leaves no room for generation");
    }
    const int cap = std::min(max_new, model.config().context_len -
                                          static_cast<int>(prompt_ids.size()));
    if (cap <= 0) {
        return {};
    }
    std::set<int> stops(stop_set.begin(), stop_set.end());

    struct Beam {
        std::vector<int> ids;
        double total{0.0};
    };
    struct Expansion {
        int parent;
        int token;
        double total;
    };

    InferenceSession session(model, cap);
    const Eigen::VectorXd first_row = session.prefill(prompt_ids);

    std::vector<Beam> live;
    std::vector<Beam> finished;
    auto retire = [&](Beam&& b) { finished.push_back(std::move(b)); };

    // Seed the beams from the prefill row.
    {
        std::vector<Expansion> exps;
        for (int v = 0; v < first_row.size(); ++v) {
            exps.push_back({0, v, first_row(v)});
        }
        std::sort(exps.begin(), exps.end(), [](const Expansion& a, const Expansion& b) {
            if (a.total != b.total) return a.total > b.total;
            return a.token < b.token;
        });
        const int take = std::min<int>(width, static_cast<int>(exps.size()));
        for (int i = 0; i < take; ++i) {
            Beam b{{exps[i].token}, exps[i].total};
            if (stops.count(exps[i].token) || cap == 1) {
                retire(std::move(b));
            } else {
                live.push_back(std::move(b));
            }
        }
        for (std::size_t i = 0; i < live.size(); ++i) {
            session.add_stream();  // fresh streams atop the shared prefix
        }
    }

    for (int step_idx = 1; step_idx < cap && !live.empty(); ++step_idx) {
        std::vector<int> stream_ids(live.size());
        std::vector<int> tokens(live.size());
        for (std::size_t i = 0; i < live.size(); ++i) {
            stream_ids[i] = static_cast<int>(i);
            tokens[i] = live[i].ids.back();
        }
        const Mat rows = session.step(stream_ids, tokens);

        std::vector<Expansion> exps;
        exps.reserve(live.size() * static_cast<std::size_t>(rows.cols()));
        for (std::size_t i = 0; i < live.size(); ++i) {
            for (int v = 0; v < rows.cols(); ++v) {
                exps.push_back({static_cast<int>(i), v, live[i].total + rows(static_cast<int>(i), v)});
            }
        }
        std::sort(exps.begin(), exps.end(), [](const Expansion& a, const Expansion& b) {
            if (a.total != b.total) return a.total > b.total;
            if (a.token != b.token) return a.token < b.token;
            return a.parent < b.parent;
        });

        std::vector<Beam> next;
        std::vector<int> parents;
        for (const Expansion& e : exps) {
            if (static_cast<int>(next.size()) >= width) {
                break;
            }
            Beam b = live[e.parent];
            b.ids.push_back(e.token);
            b.total = e.total;
            if (stops.count(e.token) || step_idx + 1 >= cap) {
                retire(std::move(b));
            } else {
                next.push_back(std::move(b));
                parents.push_back(e.parent);
            }
        }
        live = std::move(next);
        session.reorder_streams(parents);
    }
    for (Beam& b : live) {
        retire(std::move(b));
    }

    BeamResult best;
    bool have = false;
    for (const Beam& b : finished) {
        const double mean = b.total / static_cast<double>(b.ids.size());
        if (!have || mean > best.mean_logprob ||
            (mean == best.mean_logprob && b.ids < best.ids)) {
            best.ids = b.ids;
            best.mean_logprob = mean;
            have = true;
        }
    }
    return best;
}

}  // namespace btlab::lm
