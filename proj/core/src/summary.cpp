#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "dmilab/errors.hpp"
#include "dmilab/experiment/runner.hpp"
#include "dmilab/io/container.hpp"
#include "json.hpp"

namespace dmilab {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

struct RunEntry {
  std::string sweep;
  fs::path metrics;
  bool ok = true;
  bool extrapolation = false;
};

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

bool parse_number(const std::string& s, double& v) {
  if (s == "nan" || s == "-nan") {
    v = std::numeric_limits<double>::quiet_NaN();
    return true;
  }
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  return ec == std::errc{} && p == s.data() + s.size() && !s.empty();
}

std::vector<RunEntry> list_runs(const fs::path& dir) {
  std::vector<RunEntry> runs;
  const fs::path manifest = dir / "manifest.json";
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    ojson m;
    try {
      m = ojson::parse(in);
      for (const auto& r : m.at("runs")) {
        RunEntry e;
        e.sweep = r.at("sweep").get<std::string>();
        e.metrics = dir / r.at("dir").get<std::string>() / "metrics.csv";
        e.ok = r.at("status").get<std::string>() == "ok";
        e.extrapolation = r.value("extrapolation", false);
        runs.push_back(std::move(e));
      }
    } catch (const nlohmann::json::exception& e) {
      throw CorruptFileError(manifest.string() + ": " + e.what());
    }
    return runs;
  }
  if (!fs::is_directory(dir / "runs")) {
    throw ConfigError(dir.string() + ": no manifest.json and no runs/ directory");
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir / "runs")) {
    if (fs::exists(entry.path() / "metrics.csv")) files.push_back(entry.path() / "metrics.csv");
  }
  std::sort(files.begin(), files.end());
  for (auto& f : files) {
    RunEntry e;
    e.metrics = f;
    runs.push_back(std::move(e));
  }
  return runs;
}

}  // namespace

std::vector<SummaryRow> summarize(const fs::path& dir) {
  auto runs = list_runs(dir);
  const std::string header = kMetricsHeader;

  // metric -> last value, per run
  std::vector<std::vector<std::pair<std::string, double>>> finals(runs.size());
  std::vector<std::string> offenders;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    auto& run = runs[i];
    if (!run.ok) continue;
    std::ifstream in(run.metrics);
    if (!in) {
      run.ok = false;
      continue;
    }
    std::string line;
    if (!std::getline(in, line) || line != header) {
      offenders.push_back(run.metrics.string() + ": header differs from '" + header + "'");
      continue;
    }
    std::map<std::string, std::pair<std::size_t, double>> last;
    std::vector<std::string> order;
    std::size_t lineno = 1;
    bool bad = false;
    while (std::getline(in, line)) {
      ++lineno;
      const auto f = split(line, ',');
      double epoch = 0.0, value = 0.0;
      if (f.size() != 6 || !parse_number(f[3], epoch) || !parse_number(f[5], value)) {
        offenders.push_back(run.metrics.string() + ":" + std::to_string(lineno) + ": malformed row");
        bad = true;
        break;
      }
      if (run.sweep.empty()) run.sweep = f[2];
      if (f[2] != run.sweep) {
        offenders.push_back(run.metrics.string() + ":" + std::to_string(lineno) + ": sweep '" +
                            f[2] + "' does not match '" + run.sweep + "'");
        bad = true;
        break;
      }
      const auto e = static_cast<std::size_t>(epoch);
      auto [it, inserted] = last.try_emplace(f[4], e, value);
      if (inserted) {
        order.push_back(f[4]);
      } else if (e >= it->second.first) {
        it->second = {e, value};
      }
    }
    if (bad) continue;
    for (const auto& name : order) finals[i].emplace_back(name, last[name].second);
  }
  if (!offenders.empty()) {
    std::string msg = "metrics files do not match the schema:";
    for (const auto& o : offenders) msg += "\n  " + o;
    throw FormatError(msg);
  }

  std::vector<std::string> cells;
  for (const auto& r : runs) {
    if (std::find(cells.begin(), cells.end(), r.sweep) == cells.end()) cells.push_back(r.sweep);
  }
  std::vector<SummaryRow> out;
  for (const auto& cell : cells) {
    std::vector<std::string> metrics;
    std::size_t expected = 0;
    bool extrapolation = false;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      if (runs[i].sweep != cell) continue;
      ++expected;
      extrapolation = extrapolation || runs[i].extrapolation;
      for (const auto& [name, v] : finals[i]) {
        if (std::find(metrics.begin(), metrics.end(), name) == metrics.end()) metrics.push_back(name);
      }
    }
    for (const auto& name : metrics) {
      std::vector<double> xs;
      for (std::size_t i = 0; i < runs.size(); ++i) {
        if (runs[i].sweep != cell || !runs[i].ok) continue;
        for (const auto& [m, v] : finals[i]) {
          if (m == name) xs.push_back(v);
        }
      }
      SummaryRow row;
      row.sweep = cell;
      row.metric = name;
      row.n = xs.size();
      row.missing = expected - xs.size();
      row.extrapolation = extrapolation;
      double sum = 0.0;
      for (double x : xs) sum += x;
      row.mean = xs.empty() ? std::numeric_limits<double>::quiet_NaN() : sum / double(xs.size());
      double ss = 0.0;
      for (double x : xs) ss += (x - row.mean) * (x - row.mean);
      row.std = xs.size() > 1 ? std::sqrt(ss / double(xs.size() - 1)) : 0.0;
      out.push_back(std::move(row));
    }
  }
  return out;
}

std::vector<SummaryRow> emit_summary(const fs::path& dir) {
  auto rows = summarize(dir);
  auto num = [](double v) {
    if (std::isnan(v)) return std::string();
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::ostringstream csv;
  csv << kSummaryHeader << '\n';
  ojson table = ojson::array();
  for (const auto& r : rows) {
    csv << r.sweep << ',' << r.metric << ',' << r.n << ',' << r.missing << ',' << num(r.mean) << ','
        << (r.n ? num(r.std) : std::string()) << ',' << (r.extrapolation ? 1 : 0) << '\n';
    ojson j;
    j["sweep"] = r.sweep;
    j["metric"] = r.metric;
    j["n"] = r.n;
    j["missing"] = r.missing;
    j["mean"] = r.n ? ojson(r.mean) : ojson(nullptr);
    j["std"] = r.n ? ojson(r.std) : ojson(nullptr);
    j["extrapolation"] = r.extrapolation;
    table.push_back(std::move(j));
  }
  ojson doc;
  doc["columns"] = split(kSummaryHeader, ',');
  doc["rows"] = table;
  write_file_atomic(dir / "summary.csv", csv.str());
  write_file_atomic(dir / "summary.json", doc.dump(2) + "\n");
  return rows;
}

const SummaryRow* find_row(const std::vector<SummaryRow>& rows, const std::string& sweep,
                           const std::string& metric) {
  for (const auto& r : rows) {
    if (r.sweep == sweep && r.metric == metric) return &r;
  }
  return nullptr;
}

}  // namespace dmilab
