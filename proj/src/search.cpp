#include "btlab/search.hpp"

#include <algorithm>
#include <cmath>

#include "btlab/countdown.hpp"
#include "btlab/util.hpp"

namespace btlab::search {

using countdown::kBacktrackToken;
using nlohmann::json;
using nlohmann::ordered_json;

void SearchConfig::validate() const {
    if (breadth_n < 1) {
        throw std::invalid_argument("breadth N must be >= 1");
    }
    if (budget_b < 0) {
        throw std::invalid_argument("budget b must be >= 0");
    }
    if (temperature <= 0.0) {
        throw std::invalid_argument("temperature must be positive");
    }
    if (max_new < 1) {
        throw std::invalid_argument("max_new must be >= 1");
    }
}

void to_json(ordered_json& j, const SearchConfig& cfg) {
    j = ordered_json{{"N", cfg.breadth_n},
                     {"b", cfg.budget_b},
                     {"temperature", cfg.temperature},
                     {"max_new", cfg.max_new},
                     {"seed", cfg.seed}};
}

void from_json(const json& j, SearchConfig& cfg) {
    cfg.breadth_n = j.value("N", cfg.breadth_n);
    cfg.budget_b = j.value("b", cfg.budget_b);
    cfg.temperature = j.value("temperature", cfg.temperature);
    cfg.max_new = j.value("max_new", cfg.max_new);
    cfg.seed = j.value("seed", cfg.seed);
}

LmBackend::LmBackend(const lm::Model& model, const lm::Vocab& vocab, double temperature,
                     int max_new)
    : model_(model), vocab_(vocab), temperature_(temperature), max_new_(max_new) {}

std::vector<SampledContinuation> LmBackend::sample_n(const std::string& prompt,
                                                     const std::string& state_text, int n,
                                                     Rng& rng) {
    std::vector<int> prompt_ids = {vocab_.bos_id()};
    for (int id : vocab_.encode(prompt)) {
        prompt_ids.push_back(id);
    }
    for (int id : vocab_.encode(state_text)) {
        prompt_ids.push_back(id);
    }
    const std::vector<int> stops = {vocab_.eos_id(), vocab_.backtrack_id()};
    const auto raw =
        lm::sample_batch(model_, prompt_ids, n, temperature_, max_new_, stops, rng);
    std::vector<SampledContinuation> out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        SampledContinuation& c = out[i];
        c.text = vocab_.decode(raw[i].ids);
        for (std::size_t t = 0; t < raw[i].ids.size(); ++t) {
            c.tokens.push_back({raw[i].ids[t], raw[i].logprobs[t]});
            if (raw[i].ids[t] == vocab_.backtrack_id()) {
                c.contains_backtrack = true;
            }
        }
    }
    return out;
}

std::size_t LmBackend::token_count(const std::string& text) const {
    return vocab_.encode(text).size();
}

double candidate_score(const Candidate& c) {
    if (c.tokens.empty()) {
        return kMinusInf;
    }
    double total = 0.0;
    for (const TokenLp& t : c.tokens) {
        total += t.logprob;
    }
    return total / static_cast<double>(c.tokens.size());
}

double pre_backtrack_score(const Candidate& c) {
    if (c.tokens.size() <= 1) {
        return kMinusInf;
    }
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < c.tokens.size(); ++i) {
        total += c.tokens[i].logprob;
    }
    return total / static_cast<double>(c.tokens.size() - 1);
}

std::string rollback(const std::string& candidate_text) {
    std::string text = candidate_text;
    if (text.size() >= kBacktrackToken.size() &&
        text.compare(text.size() - kBacktrackToken.size(), kBacktrackToken.size(),
                     kBacktrackToken) == 0) {
        text.resize(text.size() - kBacktrackToken.size());
    }
    if (text.empty()) {
        return {};
    }
    // One reasoning step: the trailing partial line when present (a step the
    // model abandoned mid-way), otherwise the last complete line.
    if (text.back() != '\n') {
        const std::size_t nl = text.rfind('\n');
        return nl == std::string::npos ? std::string() : text.substr(0, nl + 1);
    }
    const std::size_t nl = text.rfind('\n', text.size() - 2);
    return nl == std::string::npos ? std::string() : text.substr(0, nl + 1);
}

Partition expand(GenerationBackend& backend, const std::string& prompt,
                 const std::string& state_text, const std::vector<TokenLp>& inherited, int n,
                 int round, int parent, Rng& rng) {
    Partition part;
    for (SampledContinuation& cont : backend.sample_n(prompt, state_text, n, rng)) {
        Candidate c;
        c.full_text = state_text + cont.text;
        c.contains_backtrack = cont.contains_backtrack;
        c.tokens = inherited;
        c.tokens.insert(c.tokens.end(), cont.tokens.begin(), cont.tokens.end());
        c.round = round;
        c.parent = parent;
        c.parent_state = state_text;
        (c.contains_backtrack ? part.backtrackers : part.clean).push_back(std::move(c));
    }
    return part;
}

namespace {

ordered_json candidate_to_json(const Candidate& c, int index) {
    return ordered_json{{"index", index},
                        {"round", c.round},
                        {"parent", c.parent},
                        {"state", c.parent_state},
                        {"text", c.full_text},
                        {"contains_backtrack", c.contains_backtrack},
                        {"n_tokens", c.tokens.size()},
                        {"score", candidate_score(c)},
                        {"pre_score", pre_backtrack_score(c)}};
}

// Finite scores only appear in the audit as JSON numbers; -inf maps to null.
double score_from_json(const json& v) {
    return v.is_null() ? kMinusInf : v.get<double>();
}

}  // namespace

SearchOutcome self_backtrack_search(GenerationBackend& backend, const std::string& prompt,
                                    const SearchConfig& config) {
    config.validate();
    const int m = std::max(1, isqrt_floor(config.breadth_n));
    const Rng root(config.seed);

    std::vector<Candidate> all;
    std::vector<int> clean_idx;
    std::vector<int> pool;  // backtrackers not yet rolled back

    SearchOutcome outcome;
    ordered_json rounds = ordered_json::array();

    auto ingest = [&](Partition&& part, ordered_json& expansion_json) {
        ordered_json samples = ordered_json::array();
        for (Candidate& c : part.clean) {
            const int index = static_cast<int>(all.size());
            all.push_back(std::move(c));
            clean_idx.push_back(index);
            samples.push_back(candidate_to_json(all.back(), index));
        }
        for (Candidate& c : part.backtrackers) {
            const int index = static_cast<int>(all.size());
            all.push_back(std::move(c));
            pool.push_back(index);
            samples.push_back(candidate_to_json(all.back(), index));
        }
        expansion_json["samples"] = std::move(samples);
        outcome.total_samples += static_cast<int>(expansion_json["samples"].size());
    };

    {
        ordered_json round_json;
        round_json["round"] = 0;
        ordered_json expansions = ordered_json::array();
        ordered_json exp_json;
        exp_json["parent"] = -1;
        exp_json["state"] = "";
        Rng rng = root.child(0);
        ingest(expand(backend, prompt, "", {}, config.breadth_n, 0, -1, rng), exp_json);
        expansions.push_back(std::move(exp_json));
        round_json["rollbacks"] = ordered_json::array();
        round_json["expansions"] = std::move(expansions);
        rounds.push_back(std::move(round_json));
    }

    for (int r = 1; r <= config.budget_b; ++r) {
        ordered_json round_json;
        round_json["round"] = r;
        ordered_json rollbacks = ordered_json::array();
        ordered_json expansions = ordered_json::array();

        // Highest-scoring backtrackers first; ties broken by text so the
        // order never depends on container layout.
        std::sort(pool.begin(), pool.end(), [&](int a, int b) {
            const double sa = pre_backtrack_score(all[a]);
            const double sb = pre_backtrack_score(all[b]);
            if (sa != sb) return sa > sb;
            if (all[a].full_text != all[b].full_text) return all[a].full_text < all[b].full_text;
            return a < b;
        });
        const int take = std::min<int>(m, static_cast<int>(pool.size()));
        std::vector<int> selected(pool.begin(), pool.begin() + take);
        pool.erase(pool.begin(), pool.begin() + take);

        const Rng round_rng = root.child(static_cast<uint64_t>(r));
        for (int slot = 0; slot < take; ++slot) {
            const int idx = selected[slot];
            const std::string state = rollback(all[idx].full_text);
            ++outcome.total_rollbacks;
            rollbacks.push_back(ordered_json{{"candidate", idx}, {"to_state", state}});

            const std::size_t keep = backend.token_count(state);
            std::vector<TokenLp> inherited(all[idx].tokens.begin(),
                                           all[idx].tokens.begin() + static_cast<long>(keep));
            ordered_json exp_json;
            exp_json["parent"] = idx;
            exp_json["state"] = state;
            Rng rng = round_rng.child(static_cast<uint64_t>(slot));
            ingest(expand(backend, prompt, state, inherited, m, r, idx, rng), exp_json);
            expansions.push_back(std::move(exp_json));
        }
        round_json["rollbacks"] = std::move(rollbacks);
        round_json["expansions"] = std::move(expansions);
        rounds.push_back(std::move(round_json));
    }

    // Selection: argmax mean log-prob over the clean candidate set, falling
    // back to the best backtracker truncated at its marker.
    int chosen = -1;
    if (!clean_idx.empty()) {
        for (int idx : clean_idx) {
            if (chosen < 0) {
                chosen = idx;
                continue;
            }
            const double s = candidate_score(all[idx]);
            const double best = candidate_score(all[chosen]);
            if (s > best || (s == best && all[idx].full_text < all[chosen].full_text)) {
                chosen = idx;
            }
        }
        outcome.best_text = all[chosen].full_text;
    } else {
        for (std::size_t i = 0; i < all.size(); ++i) {
            if (!all[i].contains_backtrack) {
                continue;
            }
            if (chosen < 0) {
                chosen = static_cast<int>(i);
                continue;
            }
            const double s = pre_backtrack_score(all[i]);
            const double best = pre_backtrack_score(all[chosen]);
            if (s > best || (s == best && all[i].full_text < all[chosen].full_text)) {
                chosen = static_cast<int>(i);
            }
        }
        outcome.used_fallback = true;
        if (chosen >= 0) {
            std::string text = all[chosen].full_text;
            if (text.size() >= kBacktrackToken.size() &&
                text.compare(text.size() - kBacktrackToken.size(), kBacktrackToken.size(),
                             kBacktrackToken) == 0) {
                text.resize(text.size() - kBacktrackToken.size());
            }
            outcome.best_text = text;
        }
    }

    ordered_json audit;
    audit["version"] = 1;
    audit["prompt"] = prompt;
    ordered_json cfg_json;
    to_json(cfg_json, config);
    audit["config"] = std::move(cfg_json);
    audit["m"] = m;
    audit["rounds"] = std::move(rounds);
    audit["selection"] = ordered_json{{"mode", outcome.used_fallback ? "fallback" : "clean"},
                                      {"chosen", chosen},
                                      {"best_text", outcome.best_text}};
    audit["totals"] = ordered_json{{"samples", outcome.total_samples},
                                   {"rollbacks", outcome.total_rollbacks}};
    // Scores are finite except for empty-token corner cases; normalize for JSON.
    for (auto& round_json : audit["rounds"]) {
        for (auto& exp : round_json["expansions"]) {
            for (auto& s : exp["samples"]) {
                for (const char* key : {"score", "pre_score"}) {
                    if (s[key].is_number() && !std::isfinite(s[key].get<double>())) {
                        s[key] = nullptr;
                    }
                }
            }
        }
    }
    outcome.audit = std::move(audit);
    return outcome;
}

ReplayResult replay_audit(const json& audit) {
    ReplayResult result;
    auto fail = [&result](std::string msg) {
        result.ok = false;
        result.problems.push_back(std::move(msg));
    };

    SearchConfig cfg;
    from_json(audit.at("config"), cfg);
    const int m = audit.at("m").get<int>();
    if (m != std::max(1, isqrt_floor(cfg.breadth_n))) {
        fail("recorded m does not match floor(sqrt(N))");
    }

    struct Entry {
        std::string text;
        bool contains_backtrack;
        double score;
        double pre_score;
    };
    std::vector<Entry> entries;
    int total_samples = 0;
    int total_rollbacks = 0;

    for (const auto& round_json : audit.at("rounds")) {
        const int r = round_json.at("round").get<int>();
        const auto& rollbacks = round_json.at("rollbacks");
        if (r == 0 && !rollbacks.empty()) {
            fail("round 0 cannot roll back");
        }
        if (static_cast<int>(rollbacks.size()) > m) {
            fail("round " + std::to_string(r) + " exceeds the rollback quota");
        }
        total_rollbacks += static_cast<int>(rollbacks.size());
        for (const auto& rb : rollbacks) {
            const int src = rb.at("candidate").get<int>();
            if (src < 0 || src >= static_cast<int>(entries.size())) {
                fail("rollback references an unknown candidate");
                continue;
            }
            if (!entries[src].contains_backtrack) {
                fail("rollback source lacks the backtrack token");
            }
            if (rollback(entries[src].text) != rb.at("to_state").get<std::string>()) {
                fail("recorded rollback state does not reproduce");
            }
        }
        for (const auto& exp : round_json.at("expansions")) {
            const auto& samples = exp.at("samples");
            const int limit = r == 0 ? cfg.breadth_n : m;
            if (static_cast<int>(samples.size()) > limit) {
                fail("round " + std::to_string(r) + " expansion exceeds its width");
            }
            const std::string state = exp.at("state").get<std::string>();
            for (const auto& s : samples) {
                Entry e;
                e.text = s.at("text").get<std::string>();
                e.contains_backtrack = s.at("contains_backtrack").get<bool>();
                e.score = score_from_json(s.at("score"));
                e.pre_score = score_from_json(s.at("pre_score"));
                if (static_cast<int>(entries.size()) != s.at("index").get<int>()) {
                    fail("candidate indices are not contiguous");
                }
                const bool has_token = e.text.find(kBacktrackToken) != std::string::npos;
                if (has_token != e.contains_backtrack) {
                    fail("partition flag does not match candidate text");
                }
                if (e.text.compare(0, state.size(), state) != 0) {
                    fail("candidate does not extend its expansion state");
                }
                total_samples += 1;
                entries.push_back(std::move(e));
            }
        }
    }

    const auto& totals = audit.at("totals");
    if (totals.at("samples").get<int>() != total_samples ||
        totals.at("rollbacks").get<int>() != total_rollbacks) {
        fail("recorded totals do not match the trace");
    }
    if (total_samples > cfg.breadth_n + cfg.budget_b * m * m) {
        fail("sample count exceeds N + b*m^2");
    }
    if (total_rollbacks > cfg.budget_b * m) {
        fail("rollback count exceeds b*m");
    }

    // Recompute the selection argmax from the recorded scores.
    const auto& selection = audit.at("selection");
    const bool fallback = selection.at("mode").get<std::string>() == "fallback";
    int expect = -1;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const Entry& e = entries[i];
        if (e.contains_backtrack != fallback) {
            continue;  // clean mode ranks clean candidates, fallback the rest
        }
        const double s = fallback ? e.pre_score : e.score;
        if (expect < 0) {
            expect = static_cast<int>(i);
            continue;
        }
        const double best = fallback ? entries[expect].pre_score : entries[expect].score;
        if (s > best || (s == best && e.text < entries[expect].text)) {
            expect = static_cast<int>(i);
        }
    }
    if (expect != selection.at("chosen").get<int>()) {
        fail("recorded selection is not the argmax of recorded scores");
    }
    if (expect >= 0) {
        std::string text = entries[expect].text;
        if (fallback && text.size() >= kBacktrackToken.size() &&
            text.compare(text.size() - kBacktrackToken.size(), kBacktrackToken.size(),
                         kBacktrackToken) == 0) {
            text.resize(text.size() - kBacktrackToken.size());
        }
        if (text != selection.at("best_text").get<std::string>()) {
            fail("recorded best text does not match the chosen candidate");
        }
    }
    return result;
}

}  // namespace btlab::search
