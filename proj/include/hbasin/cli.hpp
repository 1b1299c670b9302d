#pragma once

// Command-line front end. Subcommands: analyze, detect, multibasin,
// intervene, steer-fit, simulate, report, synth.
//
// Exit codes: 0 success, 1 a module failed (a JSON error object is printed on
// the error stream), 2 usage error.

#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

namespace hbasin::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
/// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// "mid" = L/2, "last" = L, "auto" = {L/3, 2L/3}, or a comma list of indices.
std::vector<std::size_t> parse_layers(const std::string& spec, std::size_t n_layers);
/// "first:last:step".
std::vector<double> parse_grid(const std::string& spec);

}  // namespace hbasin::cli
