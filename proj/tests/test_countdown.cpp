#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>
#include <string>

#include "btlab/countdown.hpp"
#include "btlab/rng.hpp"

using namespace btlab;
using namespace btlab::countdown;

namespace {

Step step_of(int64_t lhs, char op, int64_t rhs, int64_t result) {
    return Step{lhs, *op_from_char(op), rhs, result};
}

// Independent brute-force enumerator used as the oracle for
// solve_exhaustive: recurses over index pairs in both orders with no
// canonicalization, then normalizes commutative steps and deduplicates at
// the end. Shares no code with the implementation under test.
void oracle_recurse(std::vector<int64_t> nums, int64_t target, std::vector<Step>& stack,
                    std::set<std::vector<std::string>>& out) {
    if (nums.size() == 1) {
        if (nums[0] == target) {
            std::vector<std::string> key;
            for (const Step& s : stack) {
                key.push_back(s.to_string());
            }
            out.insert(key);
        }
        return;
    }
    for (std::size_t i = 0; i < nums.size(); ++i) {
        for (std::size_t j = 0; j < nums.size(); ++j) {
            if (i == j) {
                continue;
            }
            const int64_t a = nums[i];
            const int64_t b = nums[j];
            for (Op op : {Op::Add, Op::Sub, Op::Mul, Op::Div}) {
                auto res = exact_result(a, op, b);
                if (!res) {
                    continue;
                }
                Step s{a, op, b, *res};
                // Normalize commutative operand order the same way the
                // canonical form does.
                if ((op == Op::Add || op == Op::Mul) && s.lhs < s.rhs) {
                    std::swap(s.lhs, s.rhs);
                }
                std::vector<int64_t> rest;
                for (std::size_t k = 0; k < nums.size(); ++k) {
                    if (k != i && k != j) {
                        rest.push_back(nums[k]);
                    }
                }
                rest.push_back(*res);
                stack.push_back(s);
                oracle_recurse(rest, target, stack, out);
                stack.pop_back();
            }
        }
    }
}

std::set<std::vector<std::string>> oracle_all_paths(const Problem& p) {
    std::set<std::vector<std::string>> out;
    std::vector<Step> stack;
    oracle_recurse(p.numbers, p.target, stack, out);
    return out;
}

Problem random_problem(Rng& rng, int k, int64_t max_number, int64_t max_target) {
    Problem p;
    p.target = rng.uniform_int(1, max_target);
    for (int i = 0; i < k; ++i) {
        p.numbers.push_back(rng.uniform_int(1, max_number));
    }
    return p;
}

}  // namespace

TEST_CASE("apply_step updates the multiset") {
    CountdownState s;
    s.remaining = {2, 3, 4, 5};
    s.target = 20;
    auto next = apply_step(s, step_of(4, '*', 5, 20));
    REQUIRE(next.ok());
    CHECK(next->remaining == std::vector<int64_t>{2, 3, 20});
    CHECK(next->trace.size() == 1);
}

TEST_CASE("apply_step enforces operand multiplicity") {
    CountdownState s;
    s.remaining = {7};
    s.target = 14;
    auto next = apply_step(s, step_of(7, '+', 7, 14));
    REQUIRE(!next.ok());
    CHECK(next.error() == StepError::OperandUnavailable);
}

TEST_CASE("apply_step rejects wrong arithmetic") {
    CountdownState s;
    s.remaining = {4, 6};
    s.target = 3;
    auto next = apply_step(s, step_of(6, '-', 4, 3));
    REQUIRE(!next.ok());
    CHECK(next.error() == StepError::BadArithmetic);
}

TEST_CASE("apply_step rejects illegal division and negatives") {
    CountdownState s;
    s.remaining = {4, 6};
    s.target = 1;
    CHECK(apply_step(s, step_of(6, '/', 4, 1)).error() == StepError::BadArithmetic);
    CHECK(apply_step(s, step_of(4, '-', 6, -2)).error() == StepError::BadArithmetic);
    // 6-6 would be legal arithmetic but 6 is only present once.
    CHECK(apply_step(s, step_of(6, '-', 6, 0)).error() == StepError::OperandUnavailable);
}

TEST_CASE("solve_exhaustive finds the expected path for 1 2 3 4 -> 24") {
    Problem p{{1, 2, 3, 4}, 24, "t"};
    auto paths = solve_exhaustive(p);
    REQUIRE(!paths.empty());
    SolutionPath wanted{{step_of(2, '*', 1, 2), step_of(3, '*', 2, 6), step_of(6, '*', 4, 24)}};
    CHECK(std::find(paths.begin(), paths.end(), wanted) != paths.end());
}

TEST_CASE("solve_exhaustive on [1,1] target 2 yields exactly one path") {
    Problem p{{1, 1}, 2, "t"};
    auto paths = solve_exhaustive(p);
    REQUIRE(paths.size() == 1);
    CHECK(paths[0] == SolutionPath{{step_of(1, '+', 1, 2)}});
}

TEST_CASE("solve_exhaustive on [1,1] target 5 is empty") {
    Problem p{{1, 1}, 5, "t"};
    CHECK(solve_exhaustive(p).empty());
}

TEST_CASE("solve_exhaustive matches the brute-force oracle on random problems") {
    Rng rng(1234);
    int solvable_seen = 0;
    for (int trial = 0; trial < 60; ++trial) {
        const int k = 2 + static_cast<int>(rng.uniform_u64(3));  // K in [2,4]
        Problem p = random_problem(rng, k, 9, 30);
        auto expected = oracle_all_paths(p);
        auto got = solve_exhaustive(p);
        std::set<std::vector<std::string>> got_keys;
        for (const auto& path : got) {
            std::vector<std::string> key;
            for (const Step& s : path.steps) {
                key.push_back(s.to_string());
            }
            CHECK(got_keys.insert(key).second);  // no duplicate paths
        }
        CHECK(got_keys == expected);
        if (!expected.empty()) {
            ++solvable_seen;
        }
    }
    CHECK(solvable_seen > 5);  // the generator exercised real instances
}

TEST_CASE("solve_exhaustive output order is lexicographic and deterministic") {
    Problem p{{2, 3, 4}, 24, "t"};
    auto paths = solve_exhaustive(p);
    REQUIRE(paths.size() >= 2);
    auto key = [](const SolutionPath& sp) {
        std::string s;
        for (const auto& st : sp.steps) {
            s += step_order_key(st);
            s += '\n';
        }
        return s;
    };
    for (std::size_t i = 1; i < paths.size(); ++i) {
        CHECK(key(paths[i - 1]) < key(paths[i]));
    }
    CHECK(solve_exhaustive(p) == paths);
}

TEST_CASE("replay soundness: every solved path replays to the goal") {
    Rng rng(99);
    for (int trial = 0; trial < 40; ++trial) {
        Problem p = random_problem(rng, 4, 10, 50);
        for (const auto& path : solve_exhaustive(p)) {
            CountdownState s = CountdownState::initial(p);
            for (const Step& st : path.steps) {
                auto next = apply_step(s, st);
                REQUIRE(next.ok());
                CHECK(next->remaining.size() == s.remaining.size() - 1);
                s = std::move(*next);
            }
            CHECK(s.is_goal());
        }
    }
}

TEST_CASE("render matches the canonical format byte for byte") {
    Problem p{{1, 2, 3, 4}, 24, "t"};
    CHECK(render_prompt(p) == "Target: 24 | Numbers: 1 2 3 4\n");
    SolutionPath path{{step_of(1, '*', 2, 2), step_of(2, '*', 3, 6), step_of(6, '*', 4, 24)}};
    CHECK(render_solution(p, path) ==
          "1*2=2 (left: 2 3 4)\n2*3=6 (left: 4 6)\n6*4=24 (left: 24)\nGoal: 24\n");
}

TEST_CASE("render then verify round-trips on random solutions") {
    Rng rng(7);
    int rendered = 0;
    for (int trial = 0; trial < 400 && rendered < 1000; ++trial) {
        Problem p = random_problem(rng, 3 + static_cast<int>(rng.uniform_u64(2)), 10, 40);
        for (const auto& path : solve_exhaustive(p)) {
            auto v = verify_path(p, render_solution(p, path));
            CHECK(v.correct());
            ++rendered;
        }
    }
    CHECK(rendered >= 200);
}

TEST_CASE("rendering is injective over the paths of one problem") {
    Problem p{{2, 3, 4, 6}, 24, "t"};
    auto paths = solve_exhaustive(p);
    REQUIRE(paths.size() >= 2);
    std::set<std::string> renders;
    for (const auto& path : paths) {
        CHECK(renders.insert(render_solution(p, path)).second);
    }
}

TEST_CASE("verify_path classifies the four error modes") {
    Problem p{{1, 2, 3, 4}, 24, "t"};
    SolutionPath path = solve_exhaustive(p).front();
    const std::string good = render_solution(p, path);

    SUBCASE("valid render is correct") { CHECK(verify_path(p, good).correct()); }

    SUBCASE("prompt echo is tolerated") {
        CHECK(verify_path(p, render_prompt(p) + good).correct());
    }

    SUBCASE("last result differing from target is NotReachedTarget") {
        Problem other = p;
        other.target = 23;  // same numbers, different goal
        auto v = verify_path(other, good);
        CHECK(v.kind == VerdictKind::NotReachedTarget);
    }

    SUBCASE("mangled syntax is InvalidStepFormat") {
        std::string bad = good;
        bad[0] = 'x';
        CHECK(verify_path(p, bad).kind == VerdictKind::InvalidStepFormat);
    }

    SUBCASE("missing goal line is NotReachedTarget") {
        std::string bad = good.substr(0, good.find("Goal:"));
        CHECK(verify_path(p, bad).kind == VerdictKind::NotReachedTarget);
    }

    SUBCASE("content after the goal line is InvalidStepFormat") {
        CHECK(verify_path(p, good + "Goal: 24\n").kind == VerdictKind::InvalidStepFormat);
    }

    SUBCASE("empty text is InvalidStepFormat") {
        CHECK(verify_path(p, "").kind == VerdictKind::InvalidStepFormat);
    }
}

TEST_CASE("verify_path flags unknown operands at the right index") {
    Problem p{{2, 3, 4, 5}, 29, "t"};
    // Second step uses 7, which was never available.
    std::string text =
        "4*5=20 (left: 2 3 20)\n"
        "7+2=9 (left: 3 9 20)\n";
    auto v = verify_path(p, text);
    CHECK(v.kind == VerdictKind::UnknownNumbersInStep);
    CHECK(v.failing_step_index == 1);
}

TEST_CASE("verify_path precedence: availability beats arithmetic") {
    Problem p{{2, 3}, 5, "t"};
    // 9 is unavailable AND the arithmetic is wrong; availability wins.
    auto v = verify_path(p, "9+2=12 (left: 3 12)\n");
    CHECK(v.kind == VerdictKind::UnknownNumbersInStep);
}

TEST_CASE("verify_path flags wrong stated results") {
    Problem p{{2, 3}, 6, "t"};
    auto v = verify_path(p, "3+2=6 (left: 6)\nGoal: 6\n");
    CHECK(v.kind == VerdictKind::IncorrectResultInStep);
    CHECK(v.failing_step_index == 0);
}

TEST_CASE("verify_path flags a wrong left-list as an incorrect result") {
    Problem p{{2, 3, 4}, 9, "t"};
    auto v = verify_path(p, "3+2=5 (left: 5 5)\n4+5=9 (left: 9)\nGoal: 9\n");
    CHECK(v.kind == VerdictKind::IncorrectResultInStep);
    CHECK(v.failing_step_index == 0);
}

TEST_CASE("verify_path rejects an unsorted left-list as a format error") {
    Problem p{{2, 3, 4}, 9, "t"};
    auto v = verify_path(p, "3+2=5 (left: 5 4)\n4+5=9 (left: 9)\nGoal: 9\n");
    CHECK(v.kind == VerdictKind::InvalidStepFormat);
}

TEST_CASE("verify_path accepts a single trailing backtrack token") {
    Problem p{{2, 3, 4}, 9, "t"};
    auto v = verify_path(p, "3+2=6 (left: 4 6)\n<backtrack>");
    CHECK(v.kind == VerdictKind::IncorrectResultInStep);
    auto v2 = verify_path(p, std::string(kBacktrackToken) + "3+2=5 (left: 4 5)\n");
    CHECK(v2.kind == VerdictKind::InvalidStepFormat);
}

TEST_CASE("oracle agreement: membership in solve_exhaustive iff verify says correct") {
    Rng rng(2024);
    for (int trial = 0; trial < 30; ++trial) {
        Problem p = random_problem(rng, 4, 10, 40);
        auto paths = solve_exhaustive(p);
        std::set<std::string> member_renders;
        for (const auto& path : paths) {
            member_renders.insert(render_solution(p, path));
        }
        for (const auto& text : member_renders) {
            CHECK(verify_path(p, text).correct());
        }
        if (!paths.empty()) {
            // Corrupt a random member: change the final goal value.
            std::string bad = *member_renders.begin();
            bad.replace(bad.rfind("Goal: "), std::string::npos,
                        "Goal: " + std::to_string(p.target + 1) + "\n");
            CHECK(!verify_path(p, bad).correct());
            CHECK(member_renders.count(bad) == 0);
        }
    }
}

TEST_CASE("dfs_with_budget: unlimited budget solves every solvable problem") {
    Rng rng(5);
    int solved = 0;
    for (int trial = 0; trial < 60; ++trial) {
        Problem p = random_problem(rng, 4, 10, 50);
        const bool solvable = is_solvable(p);
        auto got = dfs_with_budget(p, kUnlimitedBudget);
        CHECK(got.has_value() == solvable);
        if (got) {
            CHECK(verify_path(p, render_solution(p, *got)).correct());
            ++solved;
        }
    }
    CHECK(solved > 10);
}

TEST_CASE("dfs_with_budget: zero budget fails when the first descent misses") {
    // First canonical descent of {1,1},2 tries 1+1=2 and succeeds immediately.
    CHECK(dfs_with_budget(Problem{{1, 1}, 2, "t"}, 0).has_value());
    // {1,3},2: the first descent is 3+1=4, so budget 0 fails and budget 1
    // reaches 3-1=2.
    CHECK(!dfs_with_budget(Problem{{1, 3}, 2, "t"}, 0).has_value());
    CHECK(dfs_with_budget(Problem{{1, 3}, 2, "t"}, 1).has_value());
    // Find a problem where the greedy descent needs at least one retraction.
    Rng rng(11);
    bool exercised = false;
    for (int trial = 0; trial < 200 && !exercised; ++trial) {
        Problem p = random_problem(rng, 3, 9, 25);
        if (!is_solvable(p)) {
            continue;
        }
        if (!dfs_with_budget(p, 0).has_value()) {
            exercised = true;
            CHECK(dfs_with_budget(p, kUnlimitedBudget).has_value());
        }
    }
    CHECK(exercised);
}

TEST_CASE("dfs_with_budget on [1,1] target 2 succeeds at any budget") {
    for (int64_t b : {int64_t{0}, int64_t{1}, int64_t{5}, kUnlimitedBudget}) {
        auto got = dfs_with_budget(Problem{{1, 1}, 2, "t"}, b);
        REQUIRE(got.has_value());
        CHECK(got->steps == std::vector<Step>{step_of(1, '+', 1, 2)});
    }
}

TEST_CASE("dfs_with_budget is monotone in the budget") {
    Rng rng(77);
    const int64_t grid[] = {0, 1, 2, 4, 8, 64};
    for (int trial = 0; trial < 80; ++trial) {
        Problem p = random_problem(rng, 4, 9, 60);
        bool prev = false;
        for (int64_t b : grid) {
            const bool now = dfs_with_budget(p, b).has_value();
            if (prev) {
                CHECK(now);
            }
            prev = now;
        }
    }
}

TEST_CASE("legal_steps is deterministic, sorted and deduplicated") {
    CountdownState s;
    s.remaining = {2, 2, 4};
    s.target = 1;
    auto steps = legal_steps(s);
    std::set<std::string> seen;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        CHECK(seen.insert(steps[i].to_string()).second);
        if (i > 0) {
            CHECK(step_order_key(steps[i - 1]) < step_order_key(steps[i]));
        }
        auto applied = apply_step(s, steps[i]);
        CHECK(applied.ok());
    }
    // Pair (2,2) appears once despite the duplicate operand.
    CHECK(seen.count("2+2=4") == 1);
    CHECK(seen.count("2-2=0") == 1);
    CHECK(seen.count("2/2=1") == 1);
}
