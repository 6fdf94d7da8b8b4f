#include <algorithm>
#include <cmath>

#include "met/harness.hpp"

namespace met {

nlohmann::json to_json_report(const PartitionReport& p) {
  nlohmann::json contexts = nlohmann::json::array();
  for (const auto& c : p.contexts) {
    nlohmann::json jc{{"context", c.context},
                      {"logppl", c.logppl},
                      {"tokens", c.tokens},
                      {"sentences", c.sentences}};
    if (c.oracle_entropy) jc["oracle_entropy"] = *c.oracle_entropy;
    if (c.oracle_base_ce) jc["oracle_base_ce"] = *c.oracle_base_ce;
    contexts.push_back(std::move(jc));
  }
  return {{"logppl", p.logppl},     {"sentence_mean", p.sentence_mean},
          {"ci95", p.ci95},         {"tokens", p.tokens},
          {"sentences", p.sentences}, {"contexts", std::move(contexts)}};
}

nlohmann::json ExperimentResult::metrics_json() const {
  nlohmann::json runs_json = nlohmann::json::array();
  for (const auto& r : runs) {
    nlohmann::json jr{{"seed", r.seed}, {"strategy", r.strategy}};
    if (!r.error.empty()) {
      jr["error"] = r.error;
    } else {
      jr["seen"] = to_json_report(r.seen);
      jr["unseen"] = to_json_report(r.unseen);
      jr["train_steps"] = r.train_steps;
      jr["best_val"] = r.best_val;
      jr["pretrain_val_nll"] = r.pretrain_val_nll;
      jr["note"] = r.note;
    }
    runs_json.push_back(std::move(jr));
  }
  return {{"name", config.name},
          {"config", config},
          {"config_hash", config.hash()},
          {"runs", std::move(runs_json)}};
}

namespace {
std::string num(double v) { return nlohmann::json(v).dump(); }

void csv_partition_rows(std::string& csv, const RunReport& r, const char* partition,
                        const PartitionReport& p) {
  csv += std::to_string(r.seed) + "," + r.strategy + "," + partition + ",," + num(p.logppl) +
         "," + std::to_string(p.tokens) + "," + std::to_string(p.sentences) + "," +
         num(p.sentence_mean) + "," + num(p.ci95) + ",,\n";
  for (const auto& c : p.contexts) {
    csv += std::to_string(r.seed) + "," + r.strategy + "," + partition + "," +
           feature_map_key(c.context) + "," + num(c.logppl) + "," + std::to_string(c.tokens) +
           "," + std::to_string(c.sentences) + ",,," +
           (c.oracle_entropy ? num(*c.oracle_entropy) : "") + "," +
           (c.oracle_base_ce ? num(*c.oracle_base_ce) : "") + "\n";
  }
}
}  // namespace

std::string ExperimentResult::results_csv() const {
  std::string csv =
      "seed,strategy,partition,context,logppl,tokens,sentences,sentence_mean,ci95,"
      "oracle_entropy,oracle_base_ce\n";
  for (const auto& r : runs) {
    if (!r.error.empty()) {
      csv += std::to_string(r.seed) + "," + r.strategy + ",error,,,,,,,,\n";
      continue;
    }
    csv_partition_rows(csv, r, "test_seen", r.seen);
    csv_partition_rows(csv, r, "test_unseen", r.unseen);
  }
  return csv;
}

const RunReport& ExperimentResult::run(uint64_t seed, const std::string& strategy) const {
  for (const auto& r : runs) {
    if (r.seed == seed && r.strategy == strategy) return r;
  }
  throw std::out_of_range("no run for seed " + std::to_string(seed) + ", strategy " + strategy);
}

std::string SweepResult::curve_csv() const {
  std::string csv = "size,strategy,seed,partition,logppl\n";
  for (const auto& p : points) {
    csv += std::to_string(p.size) + "," + p.strategy + "," + std::to_string(p.seed) +
           ",test_seen," + num(p.logppl_seen) + "\n";
    csv += std::to_string(p.size) + "," + p.strategy + "," + std::to_string(p.seed) +
           ",test_unseen," + num(p.logppl_unseen) + "\n";
  }
  return csv;
}

nlohmann::json SweepResult::to_json() const {
  nlohmann::json jp = nlohmann::json::array();
  for (const auto& p : points) {
    jp.push_back({{"size", p.size},
                  {"strategy", p.strategy},
                  {"seed", p.seed},
                  {"logppl_seen", p.logppl_seen},
                  {"logppl_unseen", p.logppl_unseen}});
  }
  return {{"sizes", sizes}, {"points", std::move(jp)}};
}

std::vector<double> SweepResult::seen_values(int64_t size, const std::string& strategy) const {
  std::vector<double> vals;
  for (const auto& p : points) {
    if (p.size == size && p.strategy == strategy) vals.push_back(p.logppl_seen);
  }
  return vals;
}

double SweepResult::median_seen(int64_t size, const std::string& strategy) const {
  std::vector<double> vals = seen_values(size, strategy);
  if (vals.empty()) throw std::out_of_range("no sweep points for size/strategy");
  std::sort(vals.begin(), vals.end());
  const size_t n = vals.size();
  return n % 2 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
}

nlohmann::json MultiFeatureResult::to_json() const {
  nlohmann::json jr = nlohmann::json::array();
  for (const auto& r : runs) {
    nlohmann::json deltas = nlohmann::json::array();
    for (const auto& [ctx, d] : r.context_deltas) {
      deltas.push_back({{"context", ctx}, {"delta", d}});
    }
    jr.push_back({{"seed", r.seed},
                  {"strategy", r.strategy},
                  {"single_feature", to_json_report(r.single_feature)},
                  {"multi_feature", to_json_report(r.multi_feature)},
                  {"context_deltas", std::move(deltas)}});
  }
  return {{"runs", std::move(jr)}};
}

nlohmann::json MlpCompareResult::to_json() const {
  return {{"shared", shared_mlp.metrics_json()},
          {"independent", independent_mlp.metrics_json()},
          {"shared_param_count", shared_param_count},
          {"independent_param_count", independent_param_count}};
}

std::string prefix_export_csv(const std::vector<PrefixExportRow>& rows) {
  if (rows.empty()) return "feature,value,row_id,dist_to_star,pc1,pc2\n";
  const size_t d = rows.front().embedding.size();
  std::string csv = "feature,value,row_id,dist_to_star,pc1,pc2";
  for (size_t j = 0; j < d; ++j) csv += ",e" + std::to_string(j);
  csv += "\n";
  for (const auto& r : rows) {
    csv += r.feature + "," + r.value + "," + std::to_string(r.row_id) + "," +
           num(r.dist_to_star) + "," + num(r.pc1) + "," + num(r.pc2);
    for (const double e : r.embedding) csv += "," + num(e);
    csv += "\n";
  }
  return csv;
}

std::string plot_svg(const std::string& title, const std::string& x_label,
                     const std::string& y_label,
                     const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series) {
  constexpr double w = 640, h = 420, ml = 70, mr = 170, mt = 40, mb = 50;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& [name, pts] : series) {
    for (const auto& [x, y] : pts) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  if (xmin > xmax) {
    xmin = 0;
    xmax = 1;
    ymin = 0;
    ymax = 1;
  }
  if (xmax - xmin < 1e-12) xmax = xmin + 1.0;
  if (ymax - ymin < 1e-12) ymax = ymin + 1.0;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
  auto py = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                    std::to_string(static_cast<int>(w)) + "\" height=\"" +
                    std::to_string(static_cast<int>(h)) + "\" font-family=\"sans-serif\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + std::to_string(w / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" +
         title + "</text>\n";
  // Axes.
  svg += "<line x1=\"" + std::to_string(ml) + "\" y1=\"" + std::to_string(h - mb) + "\" x2=\"" +
         std::to_string(w - mr) + "\" y2=\"" + std::to_string(h - mb) +
         "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + std::to_string(ml) + "\" y1=\"" + std::to_string(mt) + "\" x2=\"" +
         std::to_string(ml) + "\" y2=\"" + std::to_string(h - mb) + "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = xmin + (xmax - xmin) * t / 4.0;
    const double yv = ymin + (ymax - ymin) * t / 4.0;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", xv);
    svg += "<text x=\"" + std::to_string(px(xv)) + "\" y=\"" + std::to_string(h - mb + 18) +
           "\" text-anchor=\"middle\" font-size=\"11\">" + buf + "</text>\n";
    std::snprintf(buf, sizeof buf, "%.3g", yv);
    svg += "<text x=\"" + std::to_string(ml - 8) + "\" y=\"" + std::to_string(py(yv) + 4) +
           "\" text-anchor=\"end\" font-size=\"11\">" + buf + "</text>\n";
  }
  svg += "<text x=\"" + std::to_string((ml + w - mr) / 2) + "\" y=\"" + std::to_string(h - 12) +
         "\" text-anchor=\"middle\" font-size=\"12\">" + x_label + "</text>\n";
  svg += "<text x=\"16\" y=\"" + std::to_string((mt + h - mb) / 2) +
         "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 " +
         std::to_string((mt + h - mb) / 2) + ")\">" + y_label + "</text>\n";
  size_t ci = 0;
  for (const auto& [name, pts] : series) {
    const char* color = colors[ci % 6];
    std::string poly;
    for (const auto& [x, y] : pts) {
      poly += std::to_string(px(x)) + "," + std::to_string(py(y)) + " ";
    }
    svg += "<polyline points=\"" + poly + "\" fill=\"none\" stroke=\"" + color +
           "\" stroke-width=\"2\"/>\n";
    for (const auto& [x, y] : pts) {
      svg += "<circle cx=\"" + std::to_string(px(x)) + "\" cy=\"" + std::to_string(py(y)) +
             "\" r=\"3\" fill=\"" + color + "\"/>\n";
    }
    const double ly = mt + 18.0 * static_cast<double>(ci);
    svg += "<line x1=\"" + std::to_string(w - mr + 12) + "\" y1=\"" + std::to_string(ly) +
           "\" x2=\"" + std::to_string(w - mr + 36) + "\" y2=\"" + std::to_string(ly) +
           "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    svg += "<text x=\"" + std::to_string(w - mr + 42) + "\" y=\"" + std::to_string(ly + 4) +
           "\" font-size=\"11\">" + name + "</text>\n";
    ++ci;
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace met
