#include "ezm/metrics.hpp"

#include <cmath>
#include <sstream>

namespace ezm {

MetricsWriter::MetricsWriter(const std::string& path) : path_(path), out_(path) {
  if (!out_) throw ContractError("metrics: cannot open '" + path + "'");
}

void MetricsWriter::write(const Json& record) {
  out_ << record.dump() << "\n";
  out_.flush();
  if (!out_) throw ContractError("metrics: write failed on '" + path_ + "'");
}

std::vector<Json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("metrics: cannot open '" + path + "'");
  std::vector<Json> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    lineno += 1;
    if (line.empty()) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw ContractError("metrics: bad json at " + path + ":" +
                          std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// Upper 0.975 quantiles of Student's t; beyond the table the normal value.
double t_critical95(int dof) {
  static const double table[30] = {
      12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
      2.201,  2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
      2.080,  2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};
  require(dof >= 1, "t_critical95: dof must be >= 1");
  return dof <= 30 ? table[dof - 1] : 1.960;
}

MeanCI mean_ci95(const std::vector<double>& xs) {
  require(!xs.empty(), "mean_ci95: empty sample");
  MeanCI ci;
  ci.n = int(xs.size());
  double sum = 0.0;
  for (double x : xs) sum += x;
  ci.mean = sum / double(ci.n);
  if (ci.n > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - ci.mean) * (x - ci.mean);
    const double sd = std::sqrt(ss / double(ci.n - 1));
    ci.half = t_critical95(ci.n - 1) * sd / std::sqrt(double(ci.n));
  }
  ci.lo = ci.mean - ci.half;
  ci.hi = ci.mean + ci.half;
  return ci;
}

std::vector<double> moving_average(const std::vector<double>& xs, int window) {
  require(window >= 1, "moving_average: window must be >= 1");
  std::vector<double> out(xs.size());
  double acc = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    acc += xs[i];
    if (i >= size_t(window)) acc -= xs[i - size_t(window)];
    const double n = double(std::min(i + 1, size_t(window)));
    out[i] = acc / n;
  }
  return out;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path);
  if (!out) throw ContractError("metrics: cannot open '" + path + "'");
  auto emit = [&](const std::vector<std::string>& cells) {
    for (size_t i = 0; i < cells.size(); ++i)
      out << (i ? "," : "") << cells[i];
    out << "\n";
  };
  emit(header);
  for (const auto& r : rows) {
    require(r.size() == header.size(), "write_csv: ragged row");
    emit(r);
  }
  if (!out) throw ContractError("metrics: write failed on '" + path + "'");
}

std::string csv_num(double v) {
  std::ostringstream s;
  s.precision(10);
  s << v;
  return s.str();
}

}  // namespace ezm
