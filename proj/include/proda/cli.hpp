#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace proda {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

// Runs `proda <args...>` (args excludes the program name). Reports go to out,
// machine-readable errors ({"error": {...}}) to err.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// "0..19", "1,2,4" or a mix such as "0..3,7".
std::vector<unsigned long long> parse_index_list(const std::string& text);

// Worker threads for suite cells, from PRODA_THREADS (default 1).
unsigned thread_count_from_env();

}  // namespace proda
