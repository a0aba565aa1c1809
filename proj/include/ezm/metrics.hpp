#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ezm/common.hpp"

namespace ezm {

using Json = nlohmann::ordered_json;

// Append-only JSON-lines sink. Records carry no timestamps, so a
// deterministic run writes a byte-identical file.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);
  void write(const Json& record);  // one line, flushed
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
};

std::vector<Json> read_jsonl(const std::string& path);

// Two-sided 95% t-interval over a small sample (the run-to-run convention:
// 3 seeds, n - 1 degrees of freedom). n == 1 collapses to a point.
struct MeanCI {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  double half = 0.0;
  int n = 0;
};
MeanCI mean_ci95(const std::vector<double>& xs);
double t_critical95(int dof);

// Trailing moving average; the first window-1 points average their prefix.
std::vector<double> moving_average(const std::vector<double>& xs, int window);

// Minimal CSV emitter (numbers and plain strings; no quoting needed).
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);
std::string csv_num(double v);

}  // namespace ezm
