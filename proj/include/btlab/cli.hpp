#pragma once

namespace btlab::harness {

// Entry point for the btlab command-line tool. Exit codes: 0 success,
// 2 configuration/usage error, 3 runtime failure.
int run_cli(int argc, const char* const* argv);

}  // namespace btlab::harness
