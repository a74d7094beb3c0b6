#include "btlab/dataset.hpp"

#include <algorithm>
#include <cassert>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

namespace btlab::data {

namespace cd = btlab::countdown;
using nlohmann::json;
using nlohmann::ordered_json;

std::string_view sample_kind_name(SampleKind kind) {
    return kind == SampleKind::Optimal ? "optimal" : "backtrack";
}

std::string_view error_mode_name(ErrorMode mode) {
    switch (mode) {
        case ErrorMode::Exploration: return "exploration";
        case ErrorMode::Computational: return "computational";
        case ErrorMode::RuleViolation: return "rule_violation";
    }
    return "?";
}

SampleKind sample_kind_from_name(std::string_view name) {
    if (name == "optimal") return SampleKind::Optimal;
    if (name == "backtrack") return SampleKind::Backtrack;
    throw std::invalid_argument("unknown sample kind: " + std::string(name));
}

ErrorMode error_mode_from_name(std::string_view name) {
    if (name == "exploration") return ErrorMode::Exploration;
    if (name == "computational") return ErrorMode::Computational;
    if (name == "rule_violation") return ErrorMode::RuleViolation;
    throw std::invalid_argument("unknown error mode: " + std::string(name));
}

void CorpusConfig::validate() const {
    if (n_optimal < 0 || ratio_back < 0.0) {
        throw std::invalid_argument("corpus sizes must be non-negative");
    }
    if (k < 2 || k > 5) {
        throw std::invalid_argument("k must be in [2, 5]");
    }
    if (number_min < 1 || number_max < number_min) {
        throw std::invalid_argument("bad number range");
    }
    if (target_min < 1 || target_max < target_min) {
        throw std::invalid_argument("bad target range");
    }
    if (new_target_fraction < 0.0 || new_target_fraction >= 1.0) {
        throw std::invalid_argument("new_target_fraction must be in [0, 1)");
    }
    const double mix_sum = error_mix[0] + error_mix[1] + error_mix[2];
    if (!(mix_sum > 0.0)) {
        throw std::invalid_argument("error_mix must have positive mass");
    }
}

void to_json(ordered_json& j, const CorpusConfig& cfg) {
    j = ordered_json{{"n_optimal", cfg.n_optimal},
                     {"ratio_back", cfg.ratio_back},
                     {"error_mix", cfg.error_mix},
                     {"k", cfg.k},
                     {"number_min", cfg.number_min},
                     {"number_max", cfg.number_max},
                     {"target_min", cfg.target_min},
                     {"target_max", cfg.target_max},
                     {"new_target_fraction", cfg.new_target_fraction},
                     {"n_test_per_split", cfg.n_test_per_split},
                     {"seed", cfg.seed}};
}

void from_json(const json& j, CorpusConfig& cfg) {
    cfg.n_optimal = j.value("n_optimal", cfg.n_optimal);
    cfg.ratio_back = j.value("ratio_back", cfg.ratio_back);
    cfg.error_mix = j.value("error_mix", cfg.error_mix);
    cfg.k = j.value("k", cfg.k);
    cfg.number_min = j.value("number_min", cfg.number_min);
    cfg.number_max = j.value("number_max", cfg.number_max);
    cfg.target_min = j.value("target_min", cfg.target_min);
    cfg.target_max = j.value("target_max", cfg.target_max);
    cfg.new_target_fraction = j.value("new_target_fraction", cfg.new_target_fraction);
    cfg.n_test_per_split = j.value("n_test_per_split", cfg.n_test_per_split);
    cfg.seed = j.value("seed", cfg.seed);
}

TargetSplit split_targets(const CorpusConfig& cfg) {
    std::vector<int64_t> values;
    for (int64_t t = cfg.target_min; t <= cfg.target_max; ++t) {
        values.push_back(t);
    }
    Rng rng = Rng(cfg.seed).child_str("target-split");
    rng.shuffle(values);
    std::size_t n_new = static_cast<std::size_t>(
        std::ceil(cfg.new_target_fraction * static_cast<double>(values.size())));
    if (cfg.new_target_fraction > 0.0 && values.size() >= 2) {
        n_new = std::max<std::size_t>(n_new, 1);
    }
    n_new = std::min(n_new, values.size() - 1);  // keep at least one seen target
    TargetSplit split;
    split.held_out.assign(values.begin(), values.begin() + static_cast<long>(n_new));
    split.seen.assign(values.begin() + static_cast<long>(n_new), values.end());
    std::sort(split.held_out.begin(), split.held_out.end());
    std::sort(split.seen.begin(), split.seen.end());
    return split;
}

namespace {

constexpr int kMaxRejections = 10000;

}  // namespace

Result<cd::Problem, GenError> gen_problem(Rng& rng, const CorpusConfig& cfg,
                                          const std::vector<int64_t>& target_pool) {
    if (target_pool.empty()) {
        return GenError::ExhaustedRetries;
    }
    for (int attempt = 0; attempt < kMaxRejections; ++attempt) {
        cd::Problem p;
        p.target = target_pool[rng.uniform_u64(target_pool.size())];
        for (int i = 0; i < cfg.k; ++i) {
            p.numbers.push_back(rng.uniform_int(cfg.number_min, cfg.number_max));
        }
        if (cd::is_solvable(p)) {
            return p;
        }
    }
    return GenError::ExhaustedRetries;
}

std::pair<std::string, std::string> render(const cd::Problem& problem,
                                           const cd::SolutionPath& path) {
    return {cd::render_prompt(problem), cd::render_solution(problem, path)};
}

namespace {

// Replays the first `len` steps of a path.
cd::CountdownState replay_prefix(const cd::Problem& problem, const cd::SolutionPath& path,
                                 std::size_t len) {
    cd::CountdownState state = cd::CountdownState::initial(problem);
    for (std::size_t i = 0; i < len; ++i) {
        auto next = cd::apply_step(state, path.steps[i]);
        assert(next.ok());
        state = std::move(*next);
    }
    return state;
}

std::vector<int64_t> left_after(const std::vector<int64_t>& remaining, int64_t used_a,
                                std::optional<int64_t> used_b, int64_t inserted) {
    std::vector<int64_t> left = remaining;
    auto erase_one = [&left](int64_t v) {
        auto it = std::find(left.begin(), left.end(), v);
        if (it != left.end()) {
            left.erase(it);
        }
    };
    erase_one(used_a);
    if (used_b) {
        erase_one(*used_b);
    }
    left.push_back(inserted);
    std::sort(left.begin(), left.end());
    return left;
}

// A step whose stated result is wrong but whose operands are available.
std::string computational_error_line(const cd::CountdownState& state, Rng& rng) {
    const auto steps = cd::legal_steps(state);
    assert(!steps.empty());  // + is always legal with >= 2 numbers
    cd::Step bad = steps[rng.uniform_u64(steps.size())];
    const int64_t truth = bad.result;
    const int64_t delta = rng.uniform_int(1, 3);
    bad.result = (rng.next_u64() & 1) && truth >= delta ? truth - delta : truth + delta;
    return cd::render_step_line(bad, left_after(state.remaining, bad.lhs, bad.rhs, bad.result));
}

// A correct equation that uses a value absent from the remaining multiset.
std::string rule_violation_line(const cd::CountdownState& state, int64_t ghost_min,
                                int64_t ghost_max, Rng& rng) {
    std::vector<int64_t> ghosts;
    for (int64_t v = ghost_min; v <= ghost_max; ++v) {
        if (!std::binary_search(state.remaining.begin(), state.remaining.end(), v)) {
            ghosts.push_back(v);
        }
    }
    const int64_t ghost = ghosts.empty() ? ghost_max + rng.uniform_int(1, 5)
                                         : ghosts[rng.uniform_u64(ghosts.size())];
    const int64_t other = state.remaining[rng.uniform_u64(state.remaining.size())];
    const bool ghost_left = (rng.next_u64() & 1) != 0;
    const int64_t lhs = ghost_left ? ghost : other;
    const int64_t rhs = ghost_left ? other : ghost;
    std::vector<cd::Step> options;
    for (cd::Op op : {cd::Op::Add, cd::Op::Sub, cd::Op::Mul, cd::Op::Div}) {
        if (auto res = cd::exact_result(lhs, op, rhs)) {
            options.push_back({lhs, op, rhs, *res});
        }
    }
    const cd::Step pick = options[rng.uniform_u64(options.size())];
    return cd::render_step_line(pick, left_after(state.remaining, other, std::nullopt, pick.result));
}

// A legal step from which the solver can no longer reach the target.
std::optional<std::string> exploration_error_line(const cd::CountdownState& state, Rng& rng) {
    std::vector<cd::Step> dead;
    for (const cd::Step& step : cd::legal_steps(state)) {
        auto next = cd::apply_step(state, step);
        assert(next.ok());
        if (!cd::solvable_from(*next)) {
            dead.push_back(step);
        }
    }
    if (dead.empty()) {
        return std::nullopt;
    }
    const cd::Step pick = dead[rng.uniform_u64(dead.size())];
    auto next = cd::apply_step(state, pick);
    return cd::render_step_line(pick, next->remaining);
}

}  // namespace

Result<RenderedSample, GenError> make_backtrack_sample(const cd::Problem& problem,
                                                       const cd::SolutionPath& path,
                                                       ErrorMode mode, Rng& rng) {
    const int k = static_cast<int>(problem.numbers.size());
    const int max_prefix = k - 2;  // leaves at least the bad step to take
    int prefix_len = static_cast<int>(rng.uniform_int(0, std::max(0, max_prefix)));

    std::string err_line;
    if (mode == ErrorMode::Exploration) {
        // The drawn prefix may have no dead step; probe the others before
        // giving up on this problem.
        std::vector<int> order;
        for (int p = 0; p <= max_prefix; ++p) {
            order.push_back(p);
        }
        std::swap(order[0], order[prefix_len]);
        bool found = false;
        for (int p : order) {
            auto line = exploration_error_line(replay_prefix(problem, path, p), rng);
            if (line) {
                prefix_len = p;
                err_line = std::move(*line);
                found = true;
                break;
            }
        }
        if (!found) {
            return GenError::NoErrorInjectable;
        }
    } else {
        const cd::CountdownState state = replay_prefix(problem, path, prefix_len);
        // Ghost operands look like plausible task numbers.
        const int64_t ghost_max =
            *std::max_element(problem.numbers.begin(), problem.numbers.end()) + 10;
        err_line = mode == ErrorMode::Computational
                       ? computational_error_line(state, rng)
                       : rule_violation_line(state, 1, ghost_max, rng);
    }

    RenderedSample sample;
    sample.prompt = cd::render_prompt(problem);
    const std::string prefix_text = cd::render_step_prefix(problem, path, prefix_len);
    sample.completion = prefix_text + err_line + std::string(cd::kBacktrackToken);
    sample.kind = SampleKind::Backtrack;
    sample.error_mode = mode;
    sample.mask_spans = {MaskSpan{static_cast<int>(prefix_text.size()),
                                  static_cast<int>(prefix_text.size() + err_line.size())}};
    return sample;
}

std::array<int, 3> error_mode_counts(int n_back, const std::array<double, 3>& mix) {
    const double total = mix[0] + mix[1] + mix[2];
    std::array<int, 3> counts{};
    std::array<double, 3> exact{};
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        exact[i] = n_back * mix[i] / total;
        counts[i] = static_cast<int>(std::floor(exact[i]));
        assigned += counts[i];
    }
    std::array<int, 3> order{0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double fa = exact[a] - std::floor(exact[a]);
        const double fb = exact[b] - std::floor(exact[b]);
        if (fa != fb) return fa > fb;
        return a < b;
    });
    for (int i = 0; assigned < n_back; ++i, ++assigned) {
        ++counts[order[static_cast<std::size_t>(i) % 3]];
    }
    return counts;
}

namespace {

std::string problem_key(const cd::Problem& p) {
    std::vector<int64_t> sorted = p.numbers;
    std::sort(sorted.begin(), sorted.end());
    std::string key = std::to_string(p.target) + "|";
    for (int64_t v : sorted) {
        key += std::to_string(v);
        key += ',';
    }
    return key;
}

std::string zero_pad(int value, int width) {
    std::string s = std::to_string(value);
    while (static_cast<int>(s.size()) < width) {
        s.insert(s.begin(), '0');
    }
    return s;
}

}  // namespace

Result<Corpus, GenError> build_corpus(const CorpusConfig& cfg) {
    cfg.validate();
    Corpus corpus;
    corpus.targets = split_targets(cfg);
    const Rng root(cfg.seed);

    // Optimal samples; each later backs a share of the backtrack samples.
    std::vector<cd::Problem> problems;
    std::vector<cd::SolutionPath> paths;
    std::set<std::string> train_keys;
    std::set<int64_t> train_targets;
    const Rng opt_root = root.child_str("optimal");
    for (int i = 0; i < cfg.n_optimal; ++i) {
        Rng rng = opt_root.child(static_cast<uint64_t>(i));
        auto problem = gen_problem(rng, cfg, corpus.targets.seen);
        if (!problem) {
            return problem.error();
        }
        problem->id = "train-" + zero_pad(i, 6);
        auto all = cd::solve_exhaustive(*problem);
        const cd::SolutionPath path = all[rng.uniform_u64(all.size())];
        RenderedSample sample;
        sample.id = "opt-" + zero_pad(i, 6);
        std::tie(sample.prompt, sample.completion) = render(*problem, path);
        sample.kind = SampleKind::Optimal;
        corpus.train.push_back(std::move(sample));
        train_keys.insert(problem_key(*problem));
        train_targets.insert(problem->target);
        problems.push_back(std::move(*problem));
        paths.push_back(path);
    }

    // Backtrack samples reuse the optimal problems so both corpus halves ask
    // the same questions.
    const int n_back = static_cast<int>(std::llround(cfg.ratio_back * cfg.n_optimal));
    const auto counts = error_mode_counts(n_back, cfg.error_mix);
    std::vector<ErrorMode> modes;
    for (int m = 0; m < 3; ++m) {
        modes.insert(modes.end(), counts[static_cast<std::size_t>(m)],
                     static_cast<ErrorMode>(m));
    }
    const Rng back_root = root.child_str("backtrack");
    for (int j = 0; j < n_back; ++j) {
        Rng rng = back_root.child(static_cast<uint64_t>(j));
        RenderedSample sample{};
        bool made = false;
        for (int probe = 0; probe < cfg.n_optimal; ++probe) {
            const int base = (j + probe) % cfg.n_optimal;
            auto attempt = make_backtrack_sample(problems[base], paths[base], modes[j], rng);
            if (attempt) {
                sample = std::move(*attempt);
                made = true;
                break;
            }
        }
        if (!made) {
            return GenError::NoErrorInjectable;
        }
        sample.id = "back-" + zero_pad(j, 6);
        corpus.train.push_back(std::move(sample));
    }

    // Test splits. Seen-target prompts reuse target values that actually
    // occur in training but never a training (numbers, target) combination.
    const std::vector<int64_t> seen_pool(train_targets.begin(), train_targets.end());
    std::set<std::string> used_keys = train_keys;
    const Rng seen_root = root.child_str("test-seen");
    for (int i = 0; i < cfg.n_test_per_split; ++i) {
        Rng rng = seen_root.child(static_cast<uint64_t>(i));
        bool accepted = false;
        for (int attempt = 0; attempt < kMaxRejections; ++attempt) {
            auto problem = gen_problem(rng, cfg, seen_pool);
            if (!problem) {
                return problem.error();
            }
            if (used_keys.insert(problem_key(*problem)).second) {
                problem->id = "seen-" + zero_pad(i, 5);
                corpus.test_seen.push_back(std::move(*problem));
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            return GenError::ExhaustedRetries;
        }
    }
    std::set<std::string> new_keys;
    const Rng new_root = root.child_str("test-new");
    for (int i = 0; i < cfg.n_test_per_split; ++i) {
        Rng rng = new_root.child(static_cast<uint64_t>(i));
        bool accepted = false;
        for (int attempt = 0; attempt < kMaxRejections; ++attempt) {
            auto problem = gen_problem(rng, cfg, corpus.targets.held_out);
            if (!problem) {
                return problem.error();
            }
            if (new_keys.insert(problem_key(*problem)).second) {
                problem->id = "new-" + zero_pad(i, 5);
                corpus.test_new.push_back(std::move(*problem));
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            return GenError::ExhaustedRetries;
        }
    }
    return corpus;
}

namespace {

ordered_json sample_to_json(const RenderedSample& s) {
    ordered_json j;
    j["id"] = s.id;
    j["prompt"] = s.prompt;
    j["completion"] = s.completion;
    j["kind"] = sample_kind_name(s.kind);
    if (s.error_mode) {
        j["error_mode"] = error_mode_name(*s.error_mode);
    } else {
        j["error_mode"] = nullptr;
    }
    ordered_json spans = ordered_json::array();
    for (const MaskSpan& span : s.mask_spans) {
        spans.push_back(ordered_json::array({span.begin, span.end}));
    }
    j["mask_spans"] = std::move(spans);
    return j;
}

ordered_json problem_to_json(const cd::Problem& p) {
    ordered_json j;
    j["id"] = p.id;
    j["prompt"] = cd::render_prompt(p);
    j["target"] = p.target;
    j["numbers"] = p.numbers;
    return j;
}

}  // namespace

void write_corpus(const Corpus& corpus, const CorpusConfig& cfg, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    {
        std::ofstream out(fs::path(out_dir) / "train.jsonl", std::ios::trunc);
        for (const auto& s : corpus.train) {
            out << sample_to_json(s).dump() << '\n';
        }
    }
    {
        std::ofstream out(fs::path(out_dir) / "test_seen.jsonl", std::ios::trunc);
        for (const auto& p : corpus.test_seen) {
            out << problem_to_json(p).dump() << '\n';
        }
    }
    {
        std::ofstream out(fs::path(out_dir) / "test_new.jsonl", std::ios::trunc);
        for (const auto& p : corpus.test_new) {
            out << problem_to_json(p).dump() << '\n';
        }
    }

    int n_back = 0;
    std::array<int, 3> by_mode{};
    for (const auto& s : corpus.train) {
        if (s.kind == SampleKind::Backtrack) {
            ++n_back;
            ++by_mode[static_cast<std::size_t>(*s.error_mode)];
        }
    }
    ordered_json manifest;
    manifest["format_version"] = 1;
    ordered_json cfg_json;
    to_json(cfg_json, cfg);
    manifest["config"] = std::move(cfg_json);
    manifest["counts"] = ordered_json{
        {"optimal", static_cast<int>(corpus.train.size()) - n_back},
        {"backtrack", n_back},
        {"exploration", by_mode[0]},
        {"computational", by_mode[1]},
        {"rule_violation", by_mode[2]},
        {"test_seen", corpus.test_seen.size()},
        {"test_new", corpus.test_new.size()}};
    manifest["seen_targets"] = corpus.targets.seen;
    manifest["new_targets"] = corpus.targets.held_out;
    manifest["files"] = ordered_json{{"train", "train.jsonl"},
                                     {"test_seen", "test_seen.jsonl"},
                                     {"test_new", "test_new.jsonl"}};
    std::ofstream out(fs::path(out_dir) / "manifest.json", std::ios::trunc);
    out << manifest.dump(2) << '\n';
}

std::vector<RenderedSample> load_train_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open train file: " + path);
    }
    std::vector<RenderedSample> samples;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        RenderedSample s;
        s.id = j.at("id").get<std::string>();
        s.prompt = j.at("prompt").get<std::string>();
        s.completion = j.at("completion").get<std::string>();
        s.kind = sample_kind_from_name(j.at("kind").get<std::string>());
        if (!j.at("error_mode").is_null()) {
            s.error_mode = error_mode_from_name(j.at("error_mode").get<std::string>());
        }
        for (const auto& span : j.at("mask_spans")) {
            s.mask_spans.push_back({span.at(0).get<int>(), span.at(1).get<int>()});
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

std::vector<cd::Problem> load_test_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open test file: " + path);
    }
    std::vector<cd::Problem> problems;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        cd::Problem p;
        p.id = j.at("id").get<std::string>();
        p.target = j.at("target").get<int64_t>();
        p.numbers = j.at("numbers").get<std::vector<int64_t>>();
        problems.push_back(std::move(p));
    }
    return problems;
}

}  // namespace btlab::data
