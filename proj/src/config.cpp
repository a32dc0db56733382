#include "xmlwf/config.hpp"

#include <algorithm>
#include <charconv>
#include <set>

#include "xmlwf/error.hpp"
#include "xmlwf/util.hpp"

namespace xmlwf {

namespace {

class TomlParser {
 public:
  TomlParser(std::string_view text, std::string origin) : text_(text), origin_(std::move(origin)) {}

  ConfigDoc parse() {
    ConfigDoc root = ConfigDoc::object();
    ConfigDoc* table = &root;
    for (;;) {
      skip_blank_lines();
      if (eof()) break;
      if (peek() == '[') {
        ++pos_;
        if (peek() == '[') fail("arrays of tables are not supported");
        const auto path = parse_key_path();
        skip_ws();
        expect(']');
        end_of_line();
        std::string joined;
        for (const auto& part : path) joined += (joined.empty() ? "" : ".") + part;
        if (!defined_tables_.insert(joined).second) fail("table [" + joined + "] defined twice");
        table = &descend(root, path, /*allow_existing=*/true);
      } else {
        const auto path = parse_key_path();
        skip_ws();
        expect('=');
        skip_ws();
        ConfigDoc value = parse_value();
        end_of_line();
        assign(*table, path, std::move(value));
      }
    }
    return root;
  }

  ConfigDoc parse_single_value() {
    skip_ws();
    ConfigDoc value = parse_value();
    skip_ws();
    if (!eof()) fail("unexpected trailing characters");
    return value;
  }

 private:
  [[noreturn]] void fail(const std::string& message) const {
    throw Error(Errc::ConfigError, origin_ + ":" + std::to_string(line_) + ": " + message);
  }

  bool eof() const { return pos_ >= text_.size(); }
  char peek() const { return eof() ? '\0' : text_[pos_]; }

  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  void skip_ws() {
    while (!eof() && (peek() == ' ' || peek() == '\t')) ++pos_;
  }

  void skip_comment() {
    if (peek() == '#') {
      while (!eof() && peek() != '\n') ++pos_;
    }
  }

  bool newline() {
    if (peek() == '\r' && pos_ + 1 < text_.size() && text_[pos_ + 1] == '\n') ++pos_;
    if (peek() == '\n') {
      ++pos_;
      ++line_;
      return true;
    }
    return false;
  }

  void skip_blank_lines() {
    for (;;) {
      skip_ws();
      skip_comment();
      if (!newline()) return;
    }
  }

  // Whitespace, comments and newlines inside arrays.
  void skip_array_space() {
    for (;;) {
      skip_ws();
      skip_comment();
      if (!newline()) return;
    }
  }

  void end_of_line() {
    skip_ws();
    skip_comment();
    if (!eof() && !newline()) fail("expected end of line");
  }

  static bool bare_key_char(char c) {
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' ||
           c == '-';
  }

  std::vector<std::string> parse_key_path() {
    std::vector<std::string> path;
    for (;;) {
      skip_ws();
      if (peek() == '"') {
        path.push_back(parse_basic_string());
      } else if (peek() == '\'') {
        path.push_back(parse_literal_string());
      } else {
        const auto start = pos_;
        while (!eof() && bare_key_char(peek())) ++pos_;
        if (pos_ == start) fail("expected a key");
        path.emplace_back(text_.substr(start, pos_ - start));
      }
      skip_ws();
      if (peek() != '.') return path;
      ++pos_;
    }
  }

  ConfigDoc& descend(ConfigDoc& root, const std::vector<std::string>& path, bool allow_existing) {
    ConfigDoc* node = &root;
    for (const auto& part : path) {
      if (!node->contains(part)) {
        (*node)[part] = ConfigDoc::object();
      } else if (!(*node)[part].is_object() || !allow_existing) {
        fail("key '" + part + "' already defined");
      }
      node = &(*node)[part];
    }
    return *node;
  }

  void assign(ConfigDoc& table, const std::vector<std::string>& path, ConfigDoc value) {
    ConfigDoc& parent =
        descend(table, std::vector<std::string>(path.begin(), path.end() - 1), true);
    if (parent.contains(path.back())) fail("key '" + path.back() + "' defined twice");
    parent[path.back()] = std::move(value);
  }

  std::string parse_basic_string() {
    expect('"');
    std::string out;
    for (;;) {
      if (eof() || peek() == '\n') fail("unterminated string");
      const char c = text_[pos_++];
      if (c == '"') return out;
      if (c != '\\') {
        out.push_back(c);
        continue;
      }
      if (eof()) fail("unterminated escape");
      const char e = text_[pos_++];
      switch (e) {
        case '"': out.push_back('"'); break;
        case '\\': out.push_back('\\'); break;
        case 'n': out.push_back('\n'); break;
        case 't': out.push_back('\t'); break;
        case 'r': out.push_back('\r'); break;
        case 'b': out.push_back('\b'); break;
        case 'f': out.push_back('\f'); break;
        default: fail(std::string("unsupported escape '\\") + e + "'");
      }
    }
  }

  std::string parse_literal_string() {
    expect('\'');
    const auto start = pos_;
    while (!eof() && peek() != '\'' && peek() != '\n') ++pos_;
    if (peek() != '\'') fail("unterminated string");
    std::string out(text_.substr(start, pos_ - start));
    ++pos_;
    return out;
  }

  ConfigDoc parse_value() {
    const char c = peek();
    if (c == '"') return parse_basic_string();
    if (c == '\'') return parse_literal_string();
    if (c == '[') return parse_array();
    if (c == '{') return parse_inline_table();
    const auto start = pos_;
    while (!eof() && (bare_key_char(peek()) || peek() == '.' || peek() == '+')) ++pos_;
    const std::string token(text_.substr(start, pos_ - start));
    if (token.empty()) fail("expected a value");
    if (token == "true") return true;
    if (token == "false") return false;
    std::string digits;
    for (char ch : token) {
      if (ch != '_') digits.push_back(ch);
    }
    const bool is_float = digits.find_first_of(".eE") != std::string::npos;
    if (!is_float) {
      std::int64_t v = 0;
      const char* first = digits.data() + (digits[0] == '+' ? 1 : 0);
      const auto [ptr, ec] = std::from_chars(first, digits.data() + digits.size(), v);
      if (ec == std::errc() && ptr == digits.data() + digits.size()) return v;
      fail("invalid value '" + token + "'");
    }
    const auto v = parse_real(digits);
    if (!v) fail("invalid value '" + token + "'");
    return *v;
  }

  ConfigDoc parse_array() {
    expect('[');
    ConfigDoc out = ConfigDoc::array();
    for (;;) {
      skip_array_space();
      if (peek() == ']') {
        ++pos_;
        return out;
      }
      out.push_back(parse_value());
      skip_array_space();
      if (peek() == ',') {
        ++pos_;
      } else if (peek() != ']') {
        fail("expected ',' or ']' in array");
      }
    }
  }

  ConfigDoc parse_inline_table() {
    expect('{');
    ConfigDoc out = ConfigDoc::object();
    skip_ws();
    if (peek() == '}') {
      ++pos_;
      return out;
    }
    for (;;) {
      const auto path = parse_key_path();
      skip_ws();
      expect('=');
      skip_ws();
      ConfigDoc value = parse_value();
      assign(out, path, std::move(value));
      skip_ws();
      if (peek() == '}') {
        ++pos_;
        return out;
      }
      expect(',');
    }
  }

  std::string_view text_;
  std::string origin_;
  std::size_t pos_ = 0;
  int line_ = 1;
  std::set<std::string> defined_tables_;
};

[[noreturn]] void config_fail(const std::string& message) { throw Error(Errc::ConfigError, message); }

void reject_unknown(const ConfigDoc& table, const std::string& where,
                    std::initializer_list<std::string_view> known) {
  for (const auto& [key, value] : table.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      config_fail("unknown key '" + (where.empty() ? key : where + "." + key) + "'");
    }
  }
}

const ConfigDoc& require_table(const ConfigDoc& doc, const std::string& key) {
  if (!doc.contains(key)) config_fail("missing table [" + key + "]");
  if (!doc.at(key).is_object()) config_fail("'" + key + "' must be a table");
  return doc.at(key);
}

std::string get_string(const ConfigDoc& doc, const std::string& key, const std::string& where) {
  if (!doc.contains(key)) config_fail("missing key '" + where + key + "'");
  if (!doc.at(key).is_string()) config_fail("'" + where + key + "' must be a string");
  return doc.at(key).get<std::string>();
}

std::int64_t get_int(const ConfigDoc& value, const std::string& name) {
  if (!value.is_number_integer()) config_fail("'" + name + "' must be an integer");
  return value.get<std::int64_t>();
}

double get_real(const ConfigDoc& value, const std::string& name) {
  if (!value.is_number() || value.is_boolean()) config_fail("'" + name + "' must be a number");
  return value.get<double>();
}

std::vector<double> get_real_list(const ConfigDoc& value, const std::string& name) {
  if (!value.is_array() || value.empty()) config_fail("'" + name + "' must be a non-empty array");
  std::vector<double> out;
  for (const auto& v : value) out.push_back(get_real(v, name));
  return out;
}

std::vector<Metric> get_metrics(const ConfigDoc& value, const std::string& name) {
  if (!value.is_array() || value.empty()) config_fail("'" + name + "' must be a non-empty array");
  std::vector<Metric> out;
  for (const auto& v : value) {
    if (!v.is_string()) config_fail("'" + name + "' entries must be strings");
    try {
      const auto m = parse_metric(v.get<std::string>());
      if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
    } catch (const Error& e) {
      config_fail(name + ": " + e.what());
    }
  }
  return out;
}

void check_hyperparam(EstimatorKind kind, const std::string& name, const std::string& where) {
  if (!is_hyperparam(kind, name)) {
    config_fail("unknown key '" + where + name + "' for estimator " + std::string(to_string(kind)));
  }
}

void reject_constants(const ConfigDoc& stage, const std::string& origin) {
  for (const auto& [key, value] : stage.items()) {
    if (is_constant_key(key)) {
      config_fail(origin + ": '" + key + "' is an experiment constant and cannot be set per stage");
    }
  }
}

}  // namespace

ConfigDoc parse_toml(std::string_view text, const std::string& origin) {
  return TomlParser(text, origin).parse();
}

ConfigDoc load_toml(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error&) {
    config_fail("cannot read " + path.string());
  }
  return parse_toml(text, path.filename().string());
}

bool is_constant_key(std::string_view key) {
  return std::find(std::begin(kConstantKeys), std::end(kConstantKeys), key) != std::end(kConstantKeys);
}

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::train: return "train";
    case Stage::test: return "test";
    case Stage::explain: return "explain";
  }
  return "?";
}

Constants parse_constants(const ConfigDoc& doc, const fs::path& base_dir) {
  for (const auto& [key, value] : doc.items()) {
    if (!is_constant_key(key)) config_fail("constants.toml: unknown key '" + key + "'");
  }
  Constants c;
  c.experiment = get_string(doc, "experiment", "");
  c.data_path = base_dir / get_string(doc, "data_path", "");
  c.target_name = get_string(doc, "target_name", "");
  c.store_root = base_dir / (doc.contains("store_root") ? get_string(doc, "store_root", "") : "store");
  if (doc.contains("description")) c.description = get_string(doc, "description", "");
  if (doc.contains("seed")) {
    const auto seed = get_int(doc.at("seed"), "seed");
    if (seed < 0) config_fail("'seed' must be non-negative");
    c.seed = static_cast<std::uint64_t>(seed);
  }
  if (doc.contains("test_fraction")) {
    c.test_fraction = get_real(doc.at("test_fraction"), "test_fraction");
    if (!(c.test_fraction > 0.0 && c.test_fraction < 1.0)) {
      config_fail("'test_fraction' must lie in (0, 1)");
    }
  }
  return c;
}

TrainConfig parse_train_stage(const ConfigDoc& stage, std::uint64_t seed) {
  reject_constants(stage, "train.toml");
  reject_unknown(stage, "", {"pipeline", "estimator", "search"});
  TrainConfig cfg;

  const auto& pipeline = require_table(stage, "pipeline");
  reject_unknown(pipeline, "pipeline", {"transformers", "estimator"});
  try {
    cfg.spec_template.estimator.kind = parse_estimator_kind(get_string(pipeline, "estimator", "pipeline."));
  } catch (const Error& e) {
    if (e.code() == Errc::ConfigError) throw;
    config_fail(std::string("pipeline.estimator: ") + e.what());
  }
  const auto kind = cfg.spec_template.estimator.kind;
  if (pipeline.contains("transformers")) {
    const auto& list = pipeline.at("transformers");
    if (!list.is_array()) config_fail("'pipeline.transformers' must be an array");
    for (const auto& t : list) {
      if (!t.is_string()) config_fail("'pipeline.transformers' entries must be strings");
      try {
        cfg.spec_template.transformers.push_back(parse_transformer_kind(t.get<std::string>()));
      } catch (const Error& e) {
        config_fail(std::string("pipeline.transformers: ") + e.what());
      }
    }
  }
  cfg.spec_template.estimator.seed = seed;

  if (stage.contains("estimator")) {
    const auto& hp = require_table(stage, "estimator");
    for (const auto& [name, value] : hp.items()) {
      check_hyperparam(kind, name, "estimator.");
      cfg.spec_template.estimator.hyperparams[name] = get_real(value, "estimator." + name);
    }
  }
  try {
    validate(cfg.spec_template);
  } catch (const Error& e) {
    config_fail(std::string("estimator: ") + e.what());
  }

  const auto& search = require_table(stage, "search");
  reject_unknown(search, "search", {"strategy", "k", "selection_metric", "metrics", "grid", "random"});
  const auto strategy = search.contains("strategy") ? get_string(search, "strategy", "search.") : "grid";
  if (strategy == "grid") {
    cfg.strategy = SearchStrategy::grid;
  } else if (strategy == "random") {
    cfg.strategy = SearchStrategy::random;
  } else {
    config_fail("search.strategy must be \"grid\" or \"random\"");
  }
  if (search.contains("k")) {
    const auto k = get_int(search.at("k"), "search.k");
    if (k < 2) config_fail("search.k must be >= 2");
    cfg.k = static_cast<int>(k);
  }
  if (search.contains("selection_metric")) {
    try {
      cfg.selection_metric = parse_metric(get_string(search, "selection_metric", "search."));
    } catch (const Error& e) {
      if (e.code() == Errc::ConfigError) throw;
      config_fail(std::string("search.selection_metric: ") + e.what());
    }
  }
  cfg.metrics = search.contains("metrics")
                    ? get_metrics(search.at("metrics"), "search.metrics")
                    : std::vector<Metric>{Metric::accuracy, Metric::balanced_accuracy, Metric::f1,
                                          Metric::roc_auc};

  if (search.contains("grid")) {
    const auto& grid = require_table(search, "grid");
    ParamGrid g;
    for (const auto& [name, values] : grid.items()) {
      check_hyperparam(kind, name, "search.grid.");
      g.entries.emplace_back(name, get_real_list(values, "search.grid." + name));
    }
    if (cfg.strategy == SearchStrategy::grid) {
      if (g.entries.empty()) config_fail("search.grid is empty");
      cfg.space = std::move(g);
    }
  }
  if (search.contains("random")) {
    const auto& random = require_table(search, "random");
    ParamDistribution dist;
    dist.n_samples = 10;
    for (const auto& [name, value] : random.items()) {
      if (name == "n_samples") {
        const auto n = get_int(value, "search.random.n_samples");
        if (n < 1) config_fail("search.random.n_samples must be >= 1");
        dist.n_samples = static_cast<int>(n);
        continue;
      }
      const std::string where = "search.random." + name;
      check_hyperparam(kind, name, "search.random.");
      if (!value.is_object()) config_fail("'" + where + "' must be an inline table");
      reject_unknown(value, where, {"kind", "lo", "hi", "values"});
      Sampler sampler;
      const auto sk = get_string(value, "kind", where + ".");
      if (sk == "choice") {
        sampler.kind = Sampler::Kind::choice;
        if (!value.contains("values")) config_fail("missing key '" + where + ".values'");
        sampler.choices = get_real_list(value.at("values"), where + ".values");
      } else if (sk == "uniform" || sk == "log_uniform") {
        sampler.kind = sk == "uniform" ? Sampler::Kind::uniform : Sampler::Kind::log_uniform;
        if (!value.contains("lo") || !value.contains("hi")) {
          config_fail("'" + where + "' needs lo and hi");
        }
        sampler.lo = get_real(value.at("lo"), where + ".lo");
        sampler.hi = get_real(value.at("hi"), where + ".hi");
        if (!(sampler.lo < sampler.hi)) config_fail("'" + where + "' requires lo < hi");
        if (sampler.kind == Sampler::Kind::log_uniform && !(sampler.lo > 0.0)) {
          config_fail("'" + where + "' log_uniform requires lo > 0");
        }
      } else {
        config_fail("'" + where + ".kind' must be choice, uniform or log_uniform");
      }
      dist.entries.emplace_back(name, std::move(sampler));
    }
    if (cfg.strategy == SearchStrategy::random) {
      if (dist.entries.empty()) config_fail("search.random has no samplers");
      cfg.space = std::move(dist);
    }
  }
  if (cfg.strategy == SearchStrategy::grid && !std::holds_alternative<ParamGrid>(cfg.space)) {
    config_fail("strategy \"grid\" needs a [search.grid] table");
  }
  if (cfg.strategy == SearchStrategy::random &&
      !std::holds_alternative<ParamDistribution>(cfg.space)) {
    config_fail("strategy \"random\" needs a [search.random] table");
  }
  return cfg;
}

TestConfig parse_test_stage(const ConfigDoc& stage) {
  reject_constants(stage, "test.toml");
  reject_unknown(stage, "", {"metrics"});
  TestConfig cfg;
  cfg.metrics = stage.contains("metrics")
                    ? get_metrics(stage.at("metrics"), "metrics")
                    : std::vector<Metric>{Metric::accuracy, Metric::balanced_accuracy, Metric::f1,
                                          Metric::roc_auc};
  return cfg;
}

ExplainConfig parse_explain_stage(const ConfigDoc& stage) {
  reject_constants(stage, "explain.toml");
  reject_unknown(stage, "", {"background_m", "top_k", "exact_limit", "max_coalitions"});
  ExplainConfig cfg;
  auto positive = [&](const char* key, auto& field) {
    if (!stage.contains(key)) return;
    const auto v = get_int(stage.at(key), key);
    if (v < 1) config_fail(std::string("'") + key + "' must be >= 1");
    field = static_cast<std::remove_reference_t<decltype(field)>>(v);
  };
  positive("background_m", cfg.background_m);
  positive("top_k", cfg.top_k);
  positive("exact_limit", cfg.exact_limit);
  positive("max_coalitions", cfg.max_coalitions);
  return cfg;
}

void apply_override(ConfigDoc& stage, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) config_fail("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  std::vector<std::string> path;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    path.push_back(key.substr(start, dot - start));
    if (path.back().empty()) config_fail("--set: malformed key '" + key + "'");
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (is_constant_key(path.front())) {
    config_fail("--set: '" + path.front() + "' is an experiment constant");
  }

  ConfigDoc value;
  try {
    value = TomlParser(text, "--set " + key).parse_single_value();
  } catch (const Error&) {
    const bool bare = !text.empty() && std::all_of(text.begin(), text.end(), [](char c) {
      return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
    });
    if (!bare) throw;
    value = text;
  }
  ConfigDoc* node = &stage;
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    if (!node->contains(path[i])) (*node)[path[i]] = ConfigDoc::object();
    node = &(*node)[path[i]];
    if (!node->is_object()) config_fail("--set: '" + path[i] + "' is not a table");
  }
  (*node)[path.back()] = std::move(value);
}

ConfigDoc LayeredConfig::effective() const {
  ConfigDoc out = constants_doc;
  for (const auto& [key, value] : stage_doc.items()) out[key] = value;
  return out;
}

LayeredConfig load_layered_config(const fs::path& dir, Stage stage,
                                  const std::vector<std::string>& overrides,
                                  std::optional<std::uint64_t> seed_override,
                                  std::optional<fs::path> root_override) {
  LayeredConfig cfg;
  cfg.dir = dir;
  cfg.stage = stage;
  cfg.constants_doc = load_toml(dir / "constants.toml");
  const auto stage_path = dir / "stages" / (std::string(to_string(stage)) + ".toml");
  cfg.stage_doc = fs::exists(stage_path) || stage == Stage::train ? load_toml(stage_path)
                                                                  : ConfigDoc::object();
  for (const auto& o : overrides) apply_override(cfg.stage_doc, o);
  cfg.overrides = overrides;

  if (seed_override) cfg.constants_doc["seed"] = static_cast<std::int64_t>(*seed_override);
  cfg.constants = parse_constants(cfg.constants_doc, dir);
  if (root_override) cfg.constants.store_root = *root_override;

  switch (stage) {
    case Stage::train: parse_train_stage(cfg.stage_doc, cfg.constants.seed); break;
    case Stage::test: parse_test_stage(cfg.stage_doc); break;
    case Stage::explain: parse_explain_stage(cfg.stage_doc); break;
  }
  return cfg;
}

}  // namespace xmlwf
