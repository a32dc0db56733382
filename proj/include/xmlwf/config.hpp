#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xmlwf/pipeline.hpp"
#include "xmlwf/search.hpp"

namespace xmlwf {

namespace fs = std::filesystem;

/// Parsed configuration tree; tables keep their declaration order.
using ConfigDoc = nlohmann::ordered_json;

/// TOML subset: [tables], dotted keys, basic and literal strings, integers,
/// floats, booleans, (multi-line) arrays and inline tables, # comments.
ConfigDoc parse_toml(std::string_view text, const std::string& origin = "<config>");
ConfigDoc load_toml(const fs::path& path);

/// Layer 1: fixed for the lifetime of an experiment.
struct Constants {
  fs::path store_root;
  std::string experiment;
  std::string description;
  fs::path data_path;
  std::string target_name;
  std::uint64_t seed = 0;
  double test_fraction = 0.2;
};

inline constexpr const char* kConstantKeys[] = {"store_root", "experiment",  "description", "data_path",
                                               "target_name", "seed", "test_fraction"};
bool is_constant_key(std::string_view key);

/// Relative paths resolve against `base_dir`.
Constants parse_constants(const ConfigDoc& doc, const fs::path& base_dir);

enum class Stage { train, test, explain };
std::string_view to_string(Stage stage);

enum class SearchStrategy { grid, random };

struct TrainConfig {
  PipelineSpec spec_template;
  SearchStrategy strategy = SearchStrategy::grid;
  SearchSpace space;
  int k = 5;
  Metric selection_metric = Metric::roc_auc;
  std::vector<Metric> metrics;
};

struct TestConfig {
  std::vector<Metric> metrics;
};

struct ExplainConfig {
  Eigen::Index background_m = 100;
  int top_k = 20;
  int exact_limit = 12;
  std::int64_t max_coalitions = 2048;
};

TrainConfig parse_train_stage(const ConfigDoc& stage, std::uint64_t seed);
TestConfig parse_test_stage(const ConfigDoc& stage);
ExplainConfig parse_explain_stage(const ConfigDoc& stage);

/// Applies `dotted.key=value` to a stage document. The value is read as a
/// TOML value; a bare word is taken as a string.
void apply_override(ConfigDoc& stage, const std::string& assignment);

struct LayeredConfig {
  fs::path dir;
  Stage stage = Stage::train;
  ConfigDoc constants_doc;
  ConfigDoc stage_doc;
  Constants constants;
  std::vector<std::string> overrides;

  /// Constants overlaid by the stage layer.
  ConfigDoc effective() const;
};

/// Reads `constants.toml` and `stages/<stage>.toml` under `dir`, applies the
/// overrides to the stage layer and validates both layers.
LayeredConfig load_layered_config(const fs::path& dir, Stage stage,
                                  const std::vector<std::string>& overrides = {},
                                  std::optional<std::uint64_t> seed_override = std::nullopt,
                                  std::optional<fs::path> root_override = std::nullopt);

}  // namespace xmlwf
