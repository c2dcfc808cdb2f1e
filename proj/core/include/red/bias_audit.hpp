#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "red/world.hpp"

namespace red {

/// Ground-truth location statistics for one query token: where do the boxes
/// of samples mentioning this token live?
struct BiasReport {
  int token = 0;
  std::size_t n = 0;
  Box mean_box;
  std::vector<double> x_histogram;  // center-x distribution, fixed bins over [0,1]
  std::vector<double> y_histogram;
  double concentration = 0.0;  // KL(cell histogram || uniform), nats
};

struct SplitBiasSummary {
  std::vector<BiasReport> per_noun;  // sorted by concentration, descending
  double aggregate_concentration = 0.0;  // occurrence-weighted mean
};

constexpr std::size_t kDefaultHistogramBins = 16;

BiasReport token_location_stats(std::span<const Sample> samples, int token, std::size_t grid_h,
                                std::size_t grid_w, std::size_t bins = kDefaultHistogramBins);

SplitBiasSummary split_bias_summary(std::span<const Sample> samples, const WorldSpec& spec,
                                    std::size_t bins = kDefaultHistogramBins);

enum class ReportFormat { kCsv, kJson };
ReportFormat report_format_from_name(const std::string& name);

void emit_report(std::span<const BiasReport> reports, const std::filesystem::path& path,
                 ReportFormat format);
std::vector<BiasReport> parse_report(const std::filesystem::path& path, ReportFormat format);

}  // namespace red
