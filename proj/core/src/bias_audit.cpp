#include "red/bias_audit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace red {

using nlohmann::json;

namespace {

constexpr double kSmoothing = 1e-9;  // additive smoothing on empty cells

std::size_t bin_of(double coord, std::size_t bins) {
  const auto b = static_cast<long>(std::floor(coord * static_cast<double>(bins)));
  return static_cast<std::size_t>(std::clamp<long>(b, 0, static_cast<long>(bins) - 1));
}

}  // namespace

BiasReport token_location_stats(std::span<const Sample> samples, int token, std::size_t grid_h,
                                std::size_t grid_w, std::size_t bins) {
  BiasReport report;
  report.token = token;
  report.x_histogram.assign(bins, 0.0);
  report.y_histogram.assign(bins, 0.0);

  const std::size_t n_cells = grid_h * grid_w;
  std::vector<double> cell_counts(n_cells, 0.0);
  for (const Sample& s : samples) {
    if (std::find(s.query_tokens.begin(), s.query_tokens.end(), token) == s.query_tokens.end()) {
      continue;
    }
    report.n += 1;
    report.mean_box.cx += s.gt_box.cx;
    report.mean_box.cy += s.gt_box.cy;
    report.mean_box.w += s.gt_box.w;
    report.mean_box.h += s.gt_box.h;
    report.x_histogram[bin_of(s.gt_box.cx, bins)] += 1.0;
    report.y_histogram[bin_of(s.gt_box.cy, bins)] += 1.0;
    if (s.gt_cell >= n_cells) throw std::invalid_argument("bias audit: gt_cell out of grid");
    cell_counts[s.gt_cell] += 1.0;
  }
  if (report.n == 0) {
    throw std::invalid_argument("bias audit: token " + std::to_string(token) +
                                " occurs in no sample");
  }
  const double n = static_cast<double>(report.n);
  report.mean_box.cx /= n;
  report.mean_box.cy /= n;
  report.mean_box.w /= n;
  report.mean_box.h /= n;
  for (double& v : report.x_histogram) v /= n;
  for (double& v : report.y_histogram) v /= n;

  // KL from uniform over cells; zero iff the cell histogram is exactly uniform
  const double z = n + kSmoothing * static_cast<double>(n_cells);
  double kl = 0.0;
  for (double c : cell_counts) {
    const double p = (c + kSmoothing) / z;
    kl += p * std::log(p * static_cast<double>(n_cells));
  }
  report.concentration = std::max(kl, 0.0);
  return report;
}

SplitBiasSummary split_bias_summary(std::span<const Sample> samples, const WorldSpec& spec,
                                    std::size_t bins) {
  if (samples.empty()) throw std::invalid_argument("bias audit: empty sample list");
  SplitBiasSummary summary;
  double weight_sum = 0.0;
  for (std::size_t noun = 0; noun < spec.n_nouns; ++noun) {
    const int token = spec.noun_token(noun);
    bool present = false;
    for (const Sample& s : samples) {
      if (std::find(s.query_tokens.begin(), s.query_tokens.end(), token) !=
          s.query_tokens.end()) {
        present = true;
        break;
      }
    }
    if (!present) continue;
    BiasReport r = token_location_stats(samples, token, spec.grid_h, spec.grid_w, bins);
    summary.aggregate_concentration += static_cast<double>(r.n) * r.concentration;
    weight_sum += static_cast<double>(r.n);
    summary.per_noun.push_back(std::move(r));
  }
  if (weight_sum > 0) summary.aggregate_concentration /= weight_sum;
  std::stable_sort(summary.per_noun.begin(), summary.per_noun.end(),
                   [](const BiasReport& a, const BiasReport& b) {
                     return a.concentration > b.concentration;
                   });
  return summary;
}

ReportFormat report_format_from_name(const std::string& name) {
  if (name == "csv") return ReportFormat::kCsv;
  if (name == "json") return ReportFormat::kJson;
  throw std::invalid_argument("unknown report format: " + name);
}

namespace {

void emit_csv(std::span<const BiasReport> reports, std::ostream& os, std::size_t bins) {
  os.precision(17);
  os << "token,n,mean_cx,mean_cy,mean_w,mean_h,concentration";
  for (std::size_t b = 0; b < bins; ++b) os << ",x_" << b;
  for (std::size_t b = 0; b < bins; ++b) os << ",y_" << b;
  os << '\n';
  for (const BiasReport& r : reports) {
    os << r.token << ',' << r.n << ',' << r.mean_box.cx << ',' << r.mean_box.cy << ','
       << r.mean_box.w << ',' << r.mean_box.h << ',' << r.concentration;
    for (double v : r.x_histogram) os << ',' << v;
    for (double v : r.y_histogram) os << ',' << v;
    os << '\n';
  }
}

json report_to_json(const BiasReport& r) {
  return json{{"token", r.token},
              {"n", r.n},
              {"mean_box", {r.mean_box.cx, r.mean_box.cy, r.mean_box.w, r.mean_box.h}},
              {"x_histogram", r.x_histogram},
              {"y_histogram", r.y_histogram},
              {"concentration", r.concentration}};
}

BiasReport report_from_json(const json& j) {
  BiasReport r;
  r.token = j.at("token").get<int>();
  r.n = j.at("n").get<std::size_t>();
  auto box = j.at("mean_box").get<std::vector<double>>();
  r.mean_box = Box{box[0], box[1], box[2], box[3]};
  r.x_histogram = j.at("x_histogram").get<std::vector<double>>();
  r.y_histogram = j.at("y_histogram").get<std::vector<double>>();
  r.concentration = j.at("concentration").get<double>();
  return r;
}

}  // namespace

void emit_report(std::span<const BiasReport> reports, const std::filesystem::path& path,
                 ReportFormat format) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("bias audit: cannot open for write: " + path.string());
  if (format == ReportFormat::kCsv) {
    const std::size_t bins = reports.empty() ? kDefaultHistogramBins : reports[0].x_histogram.size();
    emit_csv(reports, os, bins);
  } else {
    json arr = json::array();
    for (const BiasReport& r : reports) arr.push_back(report_to_json(r));
    os << arr.dump(2) << '\n';
  }
  if (!os) throw std::runtime_error("bias audit: write failed: " + path.string());
}

std::vector<BiasReport> parse_report(const std::filesystem::path& path, ReportFormat format) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("bias audit: cannot open: " + path.string());
  std::vector<BiasReport> reports;
  if (format == ReportFormat::kJson) {
    json arr = json::parse(is);
    for (const json& j : arr) reports.push_back(report_from_json(j));
    return reports;
  }
  std::string header;
  if (!std::getline(is, header)) return reports;
  const std::size_t n_cols = static_cast<std::size_t>(std::count(header.begin(), header.end(), ',')) + 1;
  if (n_cols < 7 || (n_cols - 7) % 2 != 0) {
    throw std::runtime_error("bias audit: malformed CSV header in " + path.string());
  }
  const std::size_t bins = (n_cols - 7) / 2;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != n_cols) {
      throw std::runtime_error("bias audit: malformed CSV row in " + path.string());
    }
    BiasReport r;
    r.token = std::stoi(fields[0]);
    r.n = std::stoull(fields[1]);
    r.mean_box = Box{std::stod(fields[2]), std::stod(fields[3]), std::stod(fields[4]),
                     std::stod(fields[5])};
    r.concentration = std::stod(fields[6]);
    for (std::size_t b = 0; b < bins; ++b) r.x_histogram.push_back(std::stod(fields[7 + b]));
    for (std::size_t b = 0; b < bins; ++b) r.y_histogram.push_back(std::stod(fields[7 + bins + b]));
    reports.push_back(std::move(r));
  }
  return reports;
}

}  // namespace red
