#include "xmlwf/report.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "xmlwf/error.hpp"
#include "xmlwf/util.hpp"

namespace xmlwf {

namespace {

using json = nlohmann::json;

std::string escape_xml(std::string_view text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

// JSON embedded in a <script> block must not contain "</".
std::string script_safe(std::string text) {
  std::string out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '<' && i + 1 < text.size() && text[i + 1] == '/') {
      out += "<\\/";
      ++i;
    } else {
      out.push_back(text[i]);
    }
  }
  return out;
}

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string short_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

constexpr double kChartWidth = 720.0;
constexpr double kLabelWidth = 180.0;
constexpr double kValueWidth = 90.0;
constexpr double kBarHeight = 20.0;
constexpr double kBarGap = 6.0;
constexpr double kTopMargin = 40.0;

std::string chart_svg(const FeatureImportanceSummary& summary, const std::vector<std::size_t>& bars) {
  const double plot_width = kChartWidth - kLabelWidth - kValueWidth;
  const double height = kTopMargin + static_cast<double>(bars.size()) * (kBarHeight + kBarGap) + 10.0;
  double max_value = 0.0;
  for (auto j : bars) max_value = std::max(max_value, summary.median_abs_shap(static_cast<Eigen::Index>(j)));

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" class=\"shap-chart\" width=\""
      << fixed2(kChartWidth) << "\" height=\"" << fixed2(height) << "\" viewBox=\"0 0 "
      << fixed2(kChartWidth) << " " << fixed2(height) << "\" data-split=\""
      << to_string(summary.split) << "\" data-model-run-id=\"" << escape_xml(summary.model_run_id)
      << "\" data-data-hash=\"" << escape_xml(summary.data_hash) << "\">\n";
  svg << "<metadata>model_run_id=" << escape_xml(summary.model_run_id)
      << " data_hash=" << escape_xml(summary.data_hash) << "</metadata>\n";
  svg << "<style>text{font-family:sans-serif;font-size:12px}.bar rect{fill:#3b75af}"
         ".bar:hover rect{fill:#e1812c}</style>\n";
  svg << "<text x=\"10\" y=\"22\" style=\"font-size:14px;font-weight:bold\">Median |SHAP| ("
      << to_string(summary.split) << ", n=" << summary.n_used << "/" << summary.n_total
      << " correctly predicted)</text>\n";
  for (std::size_t rank = 0; rank < bars.size(); ++rank) {
    const auto j = bars[rank];
    const double value = summary.median_abs_shap(static_cast<Eigen::Index>(j));
    const double y = kTopMargin + static_cast<double>(rank) * (kBarHeight + kBarGap);
    const double width = max_value > 0.0 ? plot_width * value / max_value : 0.0;
    const auto& name = summary.feature_names[j];
    svg << "<g class=\"bar\" data-rank=\"" << rank << "\" data-feature=\"" << escape_xml(name)
        << "\" data-value=\"" << format_real(value) << "\">"
        << "<title>" << escape_xml(name) << ": " << format_real(value) << "</title>"
        << "<text x=\"" << fixed2(kLabelWidth - 6.0) << "\" y=\"" << fixed2(y + 14.0)
        << "\" text-anchor=\"end\">" << escape_xml(name) << "</text>"
        << "<rect x=\"" << fixed2(kLabelWidth) << "\" y=\"" << fixed2(y) << "\" width=\""
        << fixed2(width) << "\" height=\"" << fixed2(kBarHeight) << "\"/>"
        << "<text x=\"" << fixed2(kLabelWidth + width + 4.0) << "\" y=\"" << fixed2(y + 14.0)
        << "\">" << short_real(value) << "</text></g>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

constexpr const char* kChartScript = R"JS(
(function () {
  var tip = document.getElementById('tip');
  document.querySelectorAll('.bar').forEach(function (bar) {
    bar.addEventListener('mousemove', function (ev) {
      tip.textContent = bar.getAttribute('data-feature') + ': ' + bar.getAttribute('data-value');
      tip.style.left = (ev.pageX + 12) + 'px';
      tip.style.top = (ev.pageY + 12) + 'px';
      tip.style.display = 'block';
    });
    bar.addEventListener('mouseleave', function () { tip.style.display = 'none'; });
  });
  document.querySelectorAll('table.sortable').forEach(function (table) {
    table.querySelectorAll('th').forEach(function (th, col) {
      th.addEventListener('click', function () {
        var body = table.tBodies[0];
        var rows = Array.prototype.slice.call(body.rows);
        var asc = th.getAttribute('data-order') !== 'asc';
        th.setAttribute('data-order', asc ? 'asc' : 'desc');
        rows.sort(function (a, b) {
          var x = a.cells[col].getAttribute('data-sort') || a.cells[col].textContent;
          var y = b.cells[col].getAttribute('data-sort') || b.cells[col].textContent;
          var nx = parseFloat(x), ny = parseFloat(y);
          var c = (!isNaN(nx) && !isNaN(ny)) ? nx - ny : (x < y ? -1 : x > y ? 1 : 0);
          return asc ? c : -c;
        });
        rows.forEach(function (r) { body.appendChild(r); });
      });
    });
  });
})();
)JS";

constexpr const char* kStyle =
    "body{font-family:sans-serif;margin:24px;color:#222}table{border-collapse:collapse;margin:8px 0}"
    "td,th{border:1px solid #ccc;padding:3px 8px;text-align:left}th{background:#f2f2f2;cursor:pointer}"
    "code{font-size:12px}#tip{position:absolute;display:none;background:#333;color:#fff;"
    "padding:3px 6px;border-radius:3px;font-size:12px;pointer-events:none}";

std::string importance_table(const FeatureImportanceSummary& summary,
                             const std::vector<std::size_t>& bars) {
  std::ostringstream out;
  out << "<table class=\"sortable shap-table\"><thead><tr><th>rank</th><th>feature</th>"
         "<th>median |SHAP|</th></tr></thead><tbody>\n";
  for (std::size_t rank = 0; rank < bars.size(); ++rank) {
    const auto j = bars[rank];
    const double v = summary.median_abs_shap(static_cast<Eigen::Index>(j));
    out << "<tr><td>" << rank + 1 << "</td><td>" << escape_xml(summary.feature_names[j])
        << "</td><td data-sort=\"" << format_real(v) << "\">" << format_real(v) << "</td></tr>\n";
  }
  out << "</tbody></table>\n";
  return out.str();
}

std::vector<std::size_t> top_bars(const FeatureImportanceSummary& summary, int top_k) {
  if (top_k < 1) throw Error(Errc::InvalidArgument, "top_k must be >= 1");
  auto order = ranked_features(summary);
  order.resize(std::min(order.size(), static_cast<std::size_t>(top_k)));
  return order;
}

}  // namespace

PredictionMask correctly_predicted_mask(const FittedPipeline& model, const Dataset& data,
                                        SplitKind split) {
  const LabelVector predicted = predict_labels(model, data.rows());
  PredictionMask out;
  out.mask.resize(static_cast<std::size_t>(data.n()));
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    const bool ok = predicted(i) == data.labels()(i);
    out.mask[static_cast<std::size_t>(i)] = ok;
    out.n_correct += ok ? 1 : 0;
  }
  if (split == SplitKind::train && out.correct_fraction() < kCorrectFractionWarning) {
    out.warning = "only " + short_real(100.0 * out.correct_fraction()) +
                  "% of training samples are predicted correctly; the model may be underfit";
  }
  return out;
}

FeatureImportanceSummary median_abs_importance(const ShapExplanation& explanation, const Mask& mask,
                                               const std::string& model_run_id) {
  const Matrix& phi = explanation.values;
  if (static_cast<Eigen::Index>(mask.size()) != phi.rows()) {
    throw Error(Errc::LengthMismatch, "mask length " + std::to_string(mask.size()) +
                                          " != explanation rows " + std::to_string(phi.rows()));
  }
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) rows.push_back(static_cast<Eigen::Index>(i));
  }
  if (rows.empty()) {
    throw Error(Errc::EmptySelection, "no correctly predicted samples in the " +
                                          std::string(to_string(explanation.explained_split)) +
                                          " split");
  }
  FeatureImportanceSummary out;
  out.feature_names = explanation.feature_names;
  out.median_abs_shap.resize(phi.cols());
  Vector column(static_cast<Eigen::Index>(rows.size()));
  for (Eigen::Index j = 0; j < phi.cols(); ++j) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      column(static_cast<Eigen::Index>(r)) = std::abs(phi(rows[r], j));
    }
    out.median_abs_shap(j) = median(column);
  }
  out.n_used = static_cast<Eigen::Index>(rows.size());
  out.n_total = phi.rows();
  out.split = explanation.explained_split;
  out.model_run_id = model_run_id;
  out.data_hash = explanation.data_hash;
  return out;
}

std::vector<std::size_t> ranked_features(const FeatureImportanceSummary& summary) {
  std::vector<std::size_t> order(summary.feature_names.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double va = summary.median_abs_shap(static_cast<Eigen::Index>(a));
    const double vb = summary.median_abs_shap(static_cast<Eigen::Index>(b));
    if (va != vb) return va > vb;
    return summary.feature_names[a] < summary.feature_names[b];
  });
  return order;
}

std::string summary_json(const FeatureImportanceSummary& summary) {
  json out;
  out["feature_names"] = summary.feature_names;
  out["median_abs_shap"] = std::vector<double>(
      summary.median_abs_shap.data(), summary.median_abs_shap.data() + summary.median_abs_shap.size());
  out["n_used"] = summary.n_used;
  out["n_total"] = summary.n_total;
  out["split"] = to_string(summary.split);
  out["model_run_id"] = summary.model_run_id;
  out["data_hash"] = summary.data_hash;
  return out.dump(2) + "\n";
}

FeatureImportanceSummary parse_summary_json(std::string_view text) {
  const json in = json::parse(text);
  FeatureImportanceSummary out;
  out.feature_names = in.at("feature_names").get<std::vector<std::string>>();
  const auto medians = in.at("median_abs_shap").get<std::vector<double>>();
  out.median_abs_shap = Eigen::Map<const Vector>(medians.data(), static_cast<Eigen::Index>(medians.size()));
  out.n_used = in.at("n_used").get<Eigen::Index>();
  out.n_total = in.at("n_total").get<Eigen::Index>();
  out.split = in.at("split").get<std::string>() == "test" ? SplitKind::test : SplitKind::train;
  out.model_run_id = in.at("model_run_id").get<std::string>();
  out.data_hash = in.at("data_hash").get<std::string>();
  return out;
}

ChartFiles render_charts(const FeatureImportanceSummary& summary, int top_k) {
  const auto bars = top_bars(summary, top_k);
  ChartFiles out;
  out.svg = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n" + chart_svg(summary, bars);

  json data = json::array();
  for (auto j : bars) {
    data.push_back({{"feature", summary.feature_names[j]},
                    {"median_abs_shap", summary.median_abs_shap(static_cast<Eigen::Index>(j))}});
  }
  const std::string split(to_string(summary.split));
  std::ostringstream html;
  html << "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n"
       << "<title>Median |SHAP| - " << split << "</title>\n<style>" << kStyle << "</style>\n"
       << "</head>\n<body data-model-run-id=\"" << escape_xml(summary.model_run_id)
       << "\" data-data-hash=\"" << escape_xml(summary.data_hash) << "\">\n"
       << "<h1>Median |SHAP| feature importance (" << split << ")</h1>\n"
       << "<p>Run <code>" << escape_xml(summary.model_run_id) << "</code>, data <code>"
       << escape_xml(summary.data_hash) << "</code>. " << summary.n_used << " of "
       << summary.n_total << " samples predicted correctly.</p>\n"
       << chart_svg(summary, bars) << importance_table(summary, bars)
       << "<div id=\"tip\"></div>\n"
       << "<script type=\"application/json\" id=\"shap-data\">" << script_safe(data.dump())
       << "</script>\n<script>" << kChartScript << "</script>\n</body>\n</html>\n";
  out.html = html.str();
  return out;
}

std::string emit_run_report(const RunRecord& run,
                            const std::vector<FeatureImportanceSummary>& summaries, int top_k) {
  if (run.status != RunStatus::finished) {
    throw Error(Errc::StateError, "report requires a finished run, " + run.run_id + " is " +
                                      std::string(to_string(run.status)));
  }
  std::ostringstream html;
  html << "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n"
       << "<title>Run " << escape_xml(run.run_id) << "</title>\n<style>" << kStyle
       << "</style>\n</head>\n<body data-run-id=\"" << escape_xml(run.run_id) << "\">\n"
       << "<h1>Run <code>" << escape_xml(run.run_id) << "</code></h1>\n";

  html << "<h2>Run</h2>\n<table><tbody>\n"
       << "<tr><th>experiment</th><td>" << escape_xml(run.experiment) << "</td></tr>\n"
       << "<tr><th>status</th><td>" << to_string(run.status) << "</td></tr>\n"
       << "<tr><th>started_at</th><td>" << escape_xml(run.started_at) << "</td></tr>\n"
       << "<tr><th>ended_at</th><td>" << escape_xml(run.ended_at) << "</td></tr>\n";
  for (const auto& [split, hash] : run.data_hashes) {
    const auto io = run.io_description.find(split);
    html << "<tr><th>data_hash." << escape_xml(split) << "</th><td><code class=\"data-hash\">"
         << escape_xml(hash) << "</code>";
    if (io != run.io_description.end()) {
      html << " (n=" << io->second.n << ", d=" << io->second.d << ")";
    }
    html << "</td></tr>\n";
  }
  html << "</tbody></table>\n";

  html << "<h2>Parameters</h2>\n<table class=\"sortable\"><thead><tr><th>name</th><th>value</th>"
          "</tr></thead><tbody>\n";
  for (const auto& [key, value] : run.params.items()) {
    html << "<tr><td>" << escape_xml(key) << "</td><td>" << escape_xml(value.dump()) << "</td></tr>\n";
  }
  html << "</tbody></table>\n";

  // Cross-validation table from the cv.<metric>.* entries.
  std::map<std::string, std::map<std::string, double>> cv;
  std::map<std::string, double> test;
  for (const auto& [key, value] : run.metrics) {
    if (key.rfind("cv.", 0) == 0) {
      const auto dot = key.find('.', 3);
      if (dot != std::string::npos) cv[key.substr(3, dot - 3)][key.substr(dot + 1)] = value;
    } else if (key.rfind("test.", 0) == 0) {
      test[key.substr(5)] = value;
    }
  }
  if (!cv.empty()) {
    std::vector<std::string> columns;
    for (const auto& [metric, entries] : cv) {
      for (const auto& [col, v] : entries) {
        if (std::find(columns.begin(), columns.end(), col) == columns.end()) columns.push_back(col);
      }
    }
    std::sort(columns.begin(), columns.end(), [](const std::string& a, const std::string& b) {
      const bool fa = a.rfind("fold", 0) == 0;
      const bool fb = b.rfind("fold", 0) == 0;
      if (fa != fb) return fa;
      if (fa) return std::stoi(a.substr(4)) < std::stoi(b.substr(4));
      return a < b;
    });
    html << "<h2>Cross-validation (selected candidate)</h2>\n<table class=\"sortable\"><thead><tr>"
            "<th>metric</th>";
    for (const auto& c : columns) html << "<th>" << escape_xml(c) << "</th>";
    html << "</tr></thead><tbody>\n";
    for (const auto& [metric, entries] : cv) {
      html << "<tr><td>" << escape_xml(metric) << "</td>";
      for (const auto& c : columns) {
        const auto it = entries.find(c);
        html << "<td>" << (it == entries.end() ? std::string() : format_real(it->second)) << "</td>";
      }
      html << "</tr>\n";
    }
    html << "</tbody></table>\n";
  }
  if (!test.empty()) {
    html << "<h2>Test metrics</h2>\n<table><tbody>\n";
    for (const auto& [metric, v] : test) {
      html << "<tr><th>" << escape_xml(metric) << "</th><td>" << format_real(v) << "</td></tr>\n";
    }
    html << "</tbody></table>\n";
  }

  for (const auto& summary : summaries) {
    const auto bars = top_bars(summary, top_k);
    html << "<section class=\"split\" data-split=\"" << to_string(summary.split) << "\">\n<h2>"
         << "Median |SHAP| - " << to_string(summary.split) << " split</h2>\n"
         << "<p>data <code class=\"data-hash\">" << escape_xml(summary.data_hash) << "</code>, "
         << summary.n_used << " of " << summary.n_total << " samples predicted correctly.</p>\n"
         << chart_svg(summary, bars) << importance_table(summary, bars) << "</section>\n";
  }
  html << "<div id=\"tip\"></div>\n<script>" << kChartScript << "</script>\n</body>\n</html>\n";
  return html.str();
}

RunRecord write_run_report(RunRecord run, const std::vector<FeatureImportanceSummary>& summaries,
                           int top_k) {
  const auto html = emit_run_report(run, summaries, top_k);
  return register_artifact(std::move(run), "report", "figures/report.html", html);
}

}  // namespace xmlwf
