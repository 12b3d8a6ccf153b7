#include "fedgin/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace fedgin {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string series_label(const SummaryEntry& e) {
  if (e.scenario == "limited") return e.method + " A=" + std::to_string(e.train_a);
  return e.method;
}

const char* kPalette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3",
                          "#937860", "#da8bc3", "#8c8c8c", "#ccb974", "#64b5cd"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&') out += "&amp;";
    else if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else out += c;
  }
  return out;
}

std::string chart(const std::string& scenario, const std::vector<const SummaryEntry*>& entries) {
  std::vector<std::string> modalities, series;
  for (const auto* e : entries) {
    if (std::find(modalities.begin(), modalities.end(), e->modality) == modalities.end()) modalities.push_back(e->modality);
    const auto label = series_label(*e);
    if (std::find(series.begin(), series.end(), label) == series.end()) series.push_back(label);
  }
  std::sort(modalities.begin(), modalities.end());

  const double bar_w = 18, gap = 30, left = 60, top = 40, plot_h = 260;
  const double group_w = bar_w * static_cast<double>(series.size()) + gap;
  const double plot_w = group_w * static_cast<double>(modalities.size());
  const double legend_w = 170;
  const double width = left + plot_w + 20 + legend_w, height = top + plot_h + 60;
  auto y_of = [&](double v) { return top + plot_h * (1.0 - std::clamp(v, 0.0, 1.0)); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width, 0) << "\" height=\"" << fmt(height, 0)
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << fmt(left, 0) << "\" y=\"20\" font-size=\"14\">Test 3D Dice by modality (" << escape(scenario)
     << " scenario)</text>\n";
  for (int t = 0; t <= 5; ++t) {
    const double v = t * 0.2, y = y_of(v);
    os << "<line x1=\"" << fmt(left, 1) << "\" x2=\"" << fmt(left + plot_w, 1) << "\" y1=\"" << fmt(y, 1)
       << "\" y2=\"" << fmt(y, 1) << "\" stroke=\"#dddddd\"/>\n";
    os << "<text x=\"" << fmt(left - 6, 1) << "\" y=\"" << fmt(y + 4, 1) << "\" text-anchor=\"end\">" << fmt(v, 1)
       << "</text>\n";
  }
  os << "<text transform=\"translate(16," << fmt(top + plot_h / 2, 1)
     << ") rotate(-90)\" text-anchor=\"middle\">mean Dice</text>\n";
  for (std::size_t g = 0; g < modalities.size(); ++g) {
    const double gx = left + gap / 2 + group_w * static_cast<double>(g);
    for (std::size_t s = 0; s < series.size(); ++s) {
      auto it = std::find_if(entries.begin(), entries.end(), [&](const SummaryEntry* e) {
        return e->modality == modalities[g] && series_label(*e) == series[s];
      });
      if (it == entries.end()) continue;
      const auto& e = **it;
      const double x = gx + bar_w * static_cast<double>(s);
      const double y = y_of(e.mean);
      os << "<rect x=\"" << fmt(x, 1) << "\" y=\"" << fmt(y, 1) << "\" width=\"" << fmt(bar_w - 2, 1)
         << "\" height=\"" << fmt(top + plot_h - y, 1) << "\" fill=\"" << kPalette[s % 10] << "\"><title>"
         << escape(series[s]) << " " << escape(e.modality) << ": " << fmt(e.mean, 4) << " +/- " << fmt(e.std, 4)
         << "</title></rect>\n";
      const double cx = x + (bar_w - 2) / 2;
      os << "<line x1=\"" << fmt(cx, 1) << "\" x2=\"" << fmt(cx, 1) << "\" y1=\"" << fmt(y_of(e.mean - e.std), 1)
         << "\" y2=\"" << fmt(y_of(e.mean + e.std), 1) << "\" stroke=\"black\"/>\n";
    }
    os << "<text x=\"" << fmt(gx + bar_w * static_cast<double>(series.size()) / 2, 1) << "\" y=\""
       << fmt(top + plot_h + 18, 1) << "\" text-anchor=\"middle\">modality " << escape(modalities[g]) << "</text>\n";
  }
  os << "<line x1=\"" << fmt(left, 1) << "\" x2=\"" << fmt(left, 1) << "\" y1=\"" << fmt(top, 1) << "\" y2=\""
     << fmt(top + plot_h, 1) << "\" stroke=\"black\"/>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double lx = left + plot_w + 20, ly = top + 14.0 * static_cast<double>(s);
    os << "<rect x=\"" << fmt(lx, 1) << "\" y=\"" << fmt(ly, 1) << "\" width=\"10\" height=\"10\" fill=\""
       << kPalette[s % 10] << "\"/>\n";
    os << "<text x=\"" << fmt(lx + 14, 1) << "\" y=\"" << fmt(ly + 9, 1) << "\">" << escape(series[s]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace

ReportFiles build_report(const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw std::invalid_argument("report: the metrics file holds no records");
  const auto summary = summarize(records);
  ReportFiles out;

  std::ostringstream csv;
  csv << "scenario,method,train_a,train_b,modality,count,mean,std\n";
  for (const auto& e : summary) {
    csv << e.scenario << ',' << e.method << ',' << e.train_a << ',' << e.train_b << ',' << e.modality << ','
        << e.count << ',' << fmt(e.mean, 6) << ',' << fmt(e.std, 6) << '\n';
  }
  out.summary_csv = csv.str();

  std::vector<std::string> scenarios;
  for (const auto& e : summary)
    if (std::find(scenarios.begin(), scenarios.end(), e.scenario) == scenarios.end()) scenarios.push_back(e.scenario);

  std::ostringstream md;
  md << "# Test Dice summary\n";
  for (const auto& sc : scenarios) {
    md << "\n## Scenario: " << sc << "\n\n";
    md << "| method | train A | train B | modality | volumes | mean | std |\n";
    md << "|---|---:|---:|---|---:|---:|---:|\n";
    std::vector<const SummaryEntry*> entries;
    for (const auto& e : summary) {
      if (e.scenario != sc) continue;
      entries.push_back(&e);
      md << "| " << e.method << " | " << e.train_a << " | " << e.train_b << " | " << e.modality << " | " << e.count
         << " | " << fmt(e.mean, 4) << " | " << fmt(e.std, 4) << " |\n";
    }
    out.charts["chart_" + sc + ".svg"] = chart(sc, entries);
  }
  out.markdown = md.str();
  return out;
}

ReportFiles write_report(const fs::path& metrics_csv, const fs::path& out_dir) {
  ReportFiles files = build_report(read_metrics_csv(metrics_csv));
  fs::create_directories(out_dir);
  auto put = [&](const std::string& name, const std::string& text) {
    std::ofstream f(out_dir / name, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + (out_dir / name).string());
    f << text;
  };
  put("report.md", files.markdown);
  put("summary.csv", files.summary_csv);
  for (const auto& [name, svg] : files.charts) put(name, svg);
  return files;
}

}  // namespace fedgin
