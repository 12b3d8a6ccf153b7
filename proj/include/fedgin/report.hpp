#pragma once

#include "fedgin/experiment.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace fedgin {

struct ReportFiles {
  std::string markdown;
  std::string summary_csv;
  /// file name -> SVG text, one grouped-bar chart per scenario
  std::map<std::string, std::string> charts;
};

/// Mean and population std of dice3d per (scenario, method, train sizes,
/// modality). Depends only on the records; throws on an empty set.
ReportFiles build_report(const std::vector<MetricsRecord>& records);

/// Reads a metrics CSV and writes report.md, summary.csv and the charts.
ReportFiles write_report(const std::filesystem::path& metrics_csv, const std::filesystem::path& out_dir);

}  // namespace fedgin
