#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "btlab/util.hpp"

namespace btlab::countdown {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

enum class Op : uint8_t { Add, Sub, Mul, Div };

char op_char(Op op);
std::optional<Op> op_from_char(char c);

// One arithmetic action "lhs op rhs = result". Legal only when the stated
// result is exact: subtraction may not go negative, division must be by a
// nonzero exact divisor.
struct Step {
    int64_t lhs{0};
    Op op{Op::Add};
    int64_t rhs{0};
    int64_t result{0};

    // Canonical rendering without the left-list, e.g. "6*4=24".
    std::string to_string() const;

    friend bool operator==(const Step&, const Step&) = default;
};

// Exact outcome of lhs op rhs, or nullopt when the operation is illegal.
std::optional<int64_t> exact_result(int64_t lhs, Op op, int64_t rhs);

struct Problem {
    std::vector<int64_t> numbers;  // K starting operands, in prompt order
    int64_t target{0};
    std::string id;
};

// Search state: the multiset of values still available plus the steps taken.
// `remaining` is kept sorted ascending so multiset comparisons are trivial.
struct CountdownState {
    std::vector<int64_t> remaining;
    std::vector<Step> trace;
    int64_t target{0};

    static CountdownState initial(const Problem& problem);

    // Goal: exactly one value left and it equals the target.
    bool is_goal() const { return remaining.size() == 1 && remaining[0] == target; }
};

enum class StepError { OperandUnavailable, BadArithmetic };

using ApplyResult = Result<CountdownState, StepError>;

// Applies one step: both operands are removed from `remaining` (respecting
// multiplicity), the result is inserted, and the step appended to the trace.
ApplyResult apply_step(const CountdownState& state, const Step& step);

struct SolutionPath {
    std::vector<Step> steps;

    friend bool operator==(const SolutionPath&, const SolutionPath&) = default;
};

// ---------------------------------------------------------------------------
// Solving
// ---------------------------------------------------------------------------

// Ordering key for canonical steps: the step string with operators collated
// in the order + - * / (so "1+1=2" precedes "1*1=1"). This is the fixed
// candidate order of the DFS and the output order of solve_exhaustive.
std::string step_order_key(const Step& step);

// All legal steps from a state, one per distinct (lhs, op, rhs) with
// commutative operands canonicalized as lhs >= rhs for + and *. Ordered
// by step_order_key.
std::vector<Step> legal_steps(const CountdownState& state);

// Every distinct solution path (step sequences, commutative duplicates
// canonicalized away), in lexicographic order of their step strings.
// Intended for K <= 5; unsolvable problems yield an empty list.
std::vector<SolutionPath> solve_exhaustive(const Problem& problem);

// Same search with early exit; also usable mid-path via the state overload.
bool is_solvable(const Problem& problem);
bool solvable_from(const CountdownState& state);

inline constexpr int64_t kUnlimitedBudget = std::numeric_limits<int64_t>::max();

// Depth-first search in the fixed legal_steps order. Every retraction of a
// trace element costs one unit of budget; the search stops with nullopt when
// a retraction is needed and the budget is spent.
std::optional<SolutionPath> dfs_with_budget(const Problem& problem, int64_t budget);

// ---------------------------------------------------------------------------
// Canonical text format
// ---------------------------------------------------------------------------
//
//   prompt     := "Target: " INT " | Numbers:" (" " INT)+ "\n"
//   step_line  := INT OPCHAR INT "=" INT " (left:" (" " INT)+ ")" "\n"
//   goal_line  := "Goal: " INT "\n"
//   completion := step_line* goal_line
//
// The left-list is the remaining multiset after the step, sorted ascending.
// Backtracking continuations end with the literal token below instead of a
// goal line.

inline constexpr std::string_view kBacktrackToken = "<backtrack>";

std::string render_prompt(const Problem& problem);
std::string render_step_line(const Step& step, const std::vector<int64_t>& left_sorted);
std::string render_goal_line(int64_t value);

// Full completion text for a path that replays to the goal.
std::string render_solution(const Problem& problem, const SolutionPath& path);

// Step lines for the first `prefix_len` steps of a path (no goal line).
std::string render_step_prefix(const Problem& problem, const SolutionPath& path,
                               std::size_t prefix_len);

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

enum class VerdictKind : uint8_t {
    Correct,
    NotReachedTarget,
    InvalidStepFormat,
    IncorrectResultInStep,
    UnknownNumbersInStep,
};

std::string_view verdict_kind_name(VerdictKind kind);

struct Verdict {
    VerdictKind kind{VerdictKind::InvalidStepFormat};
    std::string detail;
    std::optional<int> failing_step_index;

    bool correct() const { return kind == VerdictKind::Correct; }
};

// Classifies an arbitrary model output against the problem. Never throws;
// every input maps to a verdict. Within a step, availability is checked
// before arithmetic (UnknownNumbersInStep takes precedence over
// IncorrectResultInStep); any syntax violation anywhere wins over both.
// A leading prompt line and a single trailing backtrack token are stripped
// before parsing.
Verdict verify_path(const Problem& problem, const std::string& rendered_text);

}  // namespace btlab::countdown
