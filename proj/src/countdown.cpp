#include "btlab/countdown.hpp"

#include <algorithm>
#include <cassert>

namespace btlab::countdown {

char op_char(Op op) {
    switch (op) {
        case Op::Add: return '+';
        case Op::Sub: return '-';
        case Op::Mul: return '*';
        case Op::Div: return '/';
    }
    return '?';
}

std::optional<Op> op_from_char(char c) {
    switch (c) {
        case '+': return Op::Add;
        case '-': return Op::Sub;
        case '*': return Op::Mul;
        case '/': return Op::Div;
        default: return std::nullopt;
    }
}

std::optional<int64_t> exact_result(int64_t lhs, Op op, int64_t rhs) {
    switch (op) {
        case Op::Add:
            return lhs + rhs;
        case Op::Sub:
            if (lhs < rhs) {
                return std::nullopt;  // no negative intermediates
            }
            return lhs - rhs;
        case Op::Mul:
            return lhs * rhs;
        case Op::Div:
            if (rhs == 0 || lhs % rhs != 0) {
                return std::nullopt;  // exact division only
            }
            return lhs / rhs;
    }
    return std::nullopt;
}

std::string Step::to_string() const {
    std::string s = std::to_string(lhs);
    s += op_char(op);
    s += std::to_string(rhs);
    s += '=';
    s += std::to_string(result);
    return s;
}

CountdownState CountdownState::initial(const Problem& problem) {
    CountdownState state;
    state.remaining = problem.numbers;
    std::sort(state.remaining.begin(), state.remaining.end());
    state.target = problem.target;
    return state;
}

namespace {

// Removes one occurrence of v from a sorted vector; false if absent.
bool remove_one(std::vector<int64_t>& sorted, int64_t v) {
    auto it = std::lower_bound(sorted.begin(), sorted.end(), v);
    if (it == sorted.end() || *it != v) {
        return false;
    }
    sorted.erase(it);
    return true;
}

void insert_sorted(std::vector<int64_t>& sorted, int64_t v) {
    sorted.insert(std::upper_bound(sorted.begin(), sorted.end(), v), v);
}

}  // namespace

ApplyResult apply_step(const CountdownState& state, const Step& step) {
    CountdownState next = state;
    if (!remove_one(next.remaining, step.lhs)) {
        return StepError::OperandUnavailable;
    }
    if (!remove_one(next.remaining, step.rhs)) {
        return StepError::OperandUnavailable;
    }
    const auto expected = exact_result(step.lhs, step.op, step.rhs);
    if (!expected || *expected != step.result) {
        return StepError::BadArithmetic;
    }
    insert_sorted(next.remaining, step.result);
    next.trace.push_back(step);
    return next;
}

std::string step_order_key(const Step& step) {
    std::string key = step.to_string();
    // ASCII puts '*' before '+'; remapping it between '-' and '/' yields the
    // conventional + - * / operator order without touching digits.
    for (char& c : key) {
        if (c == '*') {
            c = '.';
        }
    }
    return key;
}

std::vector<Step> legal_steps(const CountdownState& state) {
    const auto& r = state.remaining;
    std::vector<Step> steps;
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (i > 0 && r[i] == r[i - 1]) {
            continue;  // duplicate value, same steps
        }
        for (std::size_t j = i + 1; j < r.size(); ++j) {
            if (j > i + 1 && r[j] == r[j - 1]) {
                continue;
            }
            const int64_t lo = r[i];
            const int64_t hi = r[j];
            // Commutative ops canonicalized as lhs >= rhs.
            steps.push_back({hi, Op::Add, lo, hi + lo});
            steps.push_back({hi, Op::Mul, lo, hi * lo});
            steps.push_back({hi, Op::Sub, lo, hi - lo});
            if (lo != 0 && hi % lo == 0) {
                steps.push_back({hi, Op::Div, lo, hi / lo});
            }
            // Reversed division is distinct when the values differ; with
            // lo < hi it is only exact for lo == 0.
            if (lo != hi && hi != 0 && lo % hi == 0) {
                steps.push_back({lo, Op::Div, hi, lo / hi});
            }
        }
    }
    std::sort(steps.begin(), steps.end(), [](const Step& a, const Step& b) {
        return step_order_key(a) < step_order_key(b);
    });
    return steps;
}

namespace {

// Shared recursive enumerator. Returns true when the caller should stop
// (used by the early-exit mode).
bool enumerate_paths(const CountdownState& state, std::vector<Step>& stack,
                     std::vector<SolutionPath>* out, bool stop_at_first) {
    if (state.remaining.size() == 1) {
        if (state.remaining[0] == state.target) {
            if (out) {
                out->push_back(SolutionPath{stack});
            }
            return stop_at_first;
        }
        return false;
    }
    for (const Step& step : legal_steps(state)) {
        auto next = apply_step(state, step);
        assert(next.ok());
        stack.push_back(step);
        const bool done = enumerate_paths(*next, stack, out, stop_at_first);
        stack.pop_back();
        if (done) {
            return true;
        }
    }
    return false;
}

}  // namespace

std::vector<SolutionPath> solve_exhaustive(const Problem& problem) {
    std::vector<SolutionPath> paths;
    std::vector<Step> stack;
    enumerate_paths(CountdownState::initial(problem), stack, &paths, false);
    return paths;
}

bool is_solvable(const Problem& problem) {
    return solvable_from(CountdownState::initial(problem));
}

bool solvable_from(const CountdownState& state) {
    std::vector<Step> stack;
    return enumerate_paths(state, stack, nullptr, true);
}

std::optional<SolutionPath> dfs_with_budget(const Problem& problem, int64_t budget) {
    struct Frame {
        CountdownState state;
        std::vector<Step> actions;
        std::size_t next{0};
    };
    std::vector<Frame> stack;
    {
        CountdownState root = CountdownState::initial(problem);
        auto actions = legal_steps(root);
        stack.push_back({std::move(root), std::move(actions), 0});
    }
    int64_t budget_left = budget;
    while (!stack.empty()) {
        Frame& top = stack.back();
        if (top.state.is_goal()) {
            return SolutionPath{top.state.trace};
        }
        if (top.next < top.actions.size()) {
            const Step& step = top.actions[top.next++];
            auto next_state = apply_step(top.state, step);
            assert(next_state.ok());
            auto actions = legal_steps(*next_state);
            stack.push_back({std::move(*next_state), std::move(actions), 0});
            continue;
        }
        // Dead end. Popping the root is not a retraction (its trace is
        // empty); popping anything else undoes one trace element.
        stack.pop_back();
        if (stack.empty()) {
            return std::nullopt;
        }
        if (budget_left == 0) {
            return std::nullopt;
        }
        if (budget_left != kUnlimitedBudget) {
            --budget_left;
        }
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

std::string render_prompt(const Problem& problem) {
    std::string s = "Target: ";
    s += std::to_string(problem.target);
    s += " | Numbers:";
    for (int64_t n : problem.numbers) {
        s += ' ';
        s += std::to_string(n);
    }
    s += '\n';
    return s;
}

std::string render_step_line(const Step& step, const std::vector<int64_t>& left_sorted) {
    std::string s = step.to_string();
    s += " (left:";
    for (int64_t v : left_sorted) {
        s += ' ';
        s += std::to_string(v);
    }
    s += ")\n";
    return s;
}

std::string render_goal_line(int64_t value) {
    return "Goal: " + std::to_string(value) + "\n";
}

std::string render_step_prefix(const Problem& problem, const SolutionPath& path,
                               std::size_t prefix_len) {
    CountdownState state = CountdownState::initial(problem);
    std::string text;
    for (std::size_t i = 0; i < prefix_len && i < path.steps.size(); ++i) {
        auto next = apply_step(state, path.steps[i]);
        assert(next.ok());
        state = std::move(*next);
        text += render_step_line(path.steps[i], state.remaining);
    }
    return text;
}

std::string render_solution(const Problem& problem, const SolutionPath& path) {
    std::string text = render_step_prefix(problem, path, path.steps.size());
    text += render_goal_line(problem.target);
    return text;
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

std::string_view verdict_kind_name(VerdictKind kind) {
    switch (kind) {
        case VerdictKind::Correct: return "correct";
        case VerdictKind::NotReachedTarget: return "not_reached_target";
        case VerdictKind::InvalidStepFormat: return "invalid_step_format";
        case VerdictKind::IncorrectResultInStep: return "incorrect_result_in_step";
        case VerdictKind::UnknownNumbersInStep: return "unknown_numbers_in_step";
    }
    return "?";
}

namespace {

// Strict INT parse: digits only, bounded length. Advances pos past them.
std::optional<int64_t> parse_int(std::string_view s, std::size_t& pos) {
    std::size_t start = pos;
    int64_t value = 0;
    while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
        if (pos - start >= 18) {
            return std::nullopt;
        }
        value = value * 10 + (s[pos] - '0');
        ++pos;
    }
    if (pos == start) {
        return std::nullopt;
    }
    return value;
}

bool consume(std::string_view s, std::size_t& pos, std::string_view literal) {
    if (s.substr(pos, literal.size()) != literal) {
        return false;
    }
    pos += literal.size();
    return true;
}

struct ParsedStepLine {
    Step step;
    std::vector<int64_t> left;
};

// step_line := INT OPCHAR INT "=" INT " (left:" (" " INT)+ ")"
// The left-list must be written in ascending (non-decreasing) order.
std::optional<ParsedStepLine> parse_step_line(std::string_view line) {
    std::size_t pos = 0;
    ParsedStepLine out;
    auto lhs = parse_int(line, pos);
    if (!lhs || pos >= line.size()) {
        return std::nullopt;
    }
    auto op = op_from_char(line[pos]);
    if (!op) {
        return std::nullopt;
    }
    ++pos;
    auto rhs = parse_int(line, pos);
    if (!rhs || !consume(line, pos, "=")) {
        return std::nullopt;
    }
    auto result = parse_int(line, pos);
    if (!result || !consume(line, pos, " (left:")) {
        return std::nullopt;
    }
    while (pos < line.size() && line[pos] == ' ') {
        ++pos;
        auto v = parse_int(line, pos);
        if (!v) {
            return std::nullopt;
        }
        out.left.push_back(*v);
    }
    if (out.left.empty() || !consume(line, pos, ")") || pos != line.size()) {
        return std::nullopt;
    }
    if (!std::is_sorted(out.left.begin(), out.left.end())) {
        return std::nullopt;
    }
    out.step = Step{*lhs, *op, *rhs, *result};
    return out;
}

std::optional<int64_t> parse_goal_line(std::string_view line) {
    std::size_t pos = 0;
    if (!consume(line, pos, "Goal: ")) {
        return std::nullopt;
    }
    auto v = parse_int(line, pos);
    if (!v || pos != line.size()) {
        return std::nullopt;
    }
    return v;
}

Verdict make_verdict(VerdictKind kind, std::string detail, std::optional<int> index = {}) {
    return Verdict{kind, std::move(detail), index};
}

}  // namespace

Verdict verify_path(const Problem& problem, const std::string& rendered_text) {
    std::string_view text = rendered_text;

    // Tolerate the prompt being echoed ahead of the completion.
    const std::string prompt = render_prompt(problem);
    if (text.substr(0, prompt.size()) == prompt) {
        text.remove_prefix(prompt.size());
    }

    // A single backtrack token is accepted only as the very last thing.
    if (auto tok = text.find(kBacktrackToken); tok != std::string_view::npos) {
        if (tok + kBacktrackToken.size() != text.size()) {
            return make_verdict(VerdictKind::InvalidStepFormat,
                                "backtrack token not at end of text");
        }
        text.remove_suffix(kBacktrackToken.size());
    }

    // Split into lines; a missing final newline is tolerated.
    std::vector<std::string_view> lines;
    while (!text.empty()) {
        const std::size_t nl = text.find('\n');
        if (nl == std::string_view::npos) {
            lines.push_back(text);
            break;
        }
        lines.push_back(text.substr(0, nl));
        text.remove_prefix(nl + 1);
    }
    if (lines.empty()) {
        return make_verdict(VerdictKind::InvalidStepFormat, "empty output");
    }

    CountdownState state = CountdownState::initial(problem);
    std::optional<int64_t> goal_value;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const int index = static_cast<int>(i);
        if (auto goal = parse_goal_line(lines[i])) {
            if (i + 1 != lines.size()) {
                return make_verdict(VerdictKind::InvalidStepFormat,
                                    "content after goal line", index + 1);
            }
            goal_value = *goal;
            break;
        }
        auto parsed = parse_step_line(lines[i]);
        if (!parsed) {
            return make_verdict(VerdictKind::InvalidStepFormat,
                                "line is neither a step nor a goal", index);
        }
        // Availability first, then arithmetic, then the claimed left-list.
        CountdownState probe = state;
        if (!remove_one(probe.remaining, parsed->step.lhs) ||
            !remove_one(probe.remaining, parsed->step.rhs)) {
            return make_verdict(VerdictKind::UnknownNumbersInStep,
                                "operand not among remaining numbers", index);
        }
        const auto expected = exact_result(parsed->step.lhs, parsed->step.op, parsed->step.rhs);
        if (!expected || *expected != parsed->step.result) {
            return make_verdict(VerdictKind::IncorrectResultInStep,
                                "stated result is not the exact outcome", index);
        }
        insert_sorted(probe.remaining, parsed->step.result);
        if (probe.remaining != parsed->left) {
            return make_verdict(VerdictKind::IncorrectResultInStep,
                                "left-list does not match the remaining numbers", index);
        }
        probe.trace.push_back(parsed->step);
        state = std::move(probe);
    }

    if (state.is_goal() && goal_value && *goal_value == problem.target) {
        return make_verdict(VerdictKind::Correct, "");
    }
    if (!goal_value) {
        return make_verdict(VerdictKind::NotReachedTarget, "no goal line");
    }
    return make_verdict(VerdictKind::NotReachedTarget,
                        "final value does not equal the target");
}

}  // namespace btlab::countdown
