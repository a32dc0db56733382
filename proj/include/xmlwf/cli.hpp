#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "xmlwf/pipeline.hpp"
#include "xmlwf/tracking.hpp"

namespace xmlwf {

// Process exit codes of the `xmlwf` tool.
namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int run_failed = 1;
inline constexpr int not_empty = 2;
inline constexpr int io_error = 3;
inline constexpr int config_error = 4;
inline constexpr int not_found = 5;
inline constexpr int integrity = 6;
inline constexpr int empty_selection = 7;
}  // namespace exit_code

/// Entry point of the tool; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Default config files written by `init`, keyed by path relative to the project.
std::map<std::string, std::string> scaffold_files(const std::string& experiment);

struct Reproduction {
  std::map<std::string, double> metrics;
  FittedPipeline model;
};

/// Re-runs the train stage from a run's logged train snapshot, stage config
/// and seed, and recomputes every cv.* metric plus any recorded test.* metric
/// from the logged test snapshot.
Reproduction reproduce_run(const RunRecord& run, unsigned workers = 1);

}  // namespace xmlwf
