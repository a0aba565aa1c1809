#include "ezm/support.hpp"

#include <cmath>

namespace ezm {

namespace {
constexpr double kEps = 1e-3;
}

double value_transform(double x) {
  const double s = x >= 0.0 ? 1.0 : -1.0;
  return s * (std::sqrt(std::abs(x) + 1.0) - 1.0) + kEps * x;
}

double inverse_value_transform(double h) {
  if (h == 0.0) return 0.0;
  const double s = h >= 0.0 ? 1.0 : -1.0;
  const double a = std::abs(h);
  const double inner = (std::sqrt(1.0 + 4.0 * kEps * (a + 1.0 + kEps)) - 1.0) /
                       (2.0 * kEps);
  return s * (inner * inner - 1.0);
}

Vec scalar_to_twohot(double x, const Support& s, ClipCounter* counter) {
  require(std::isfinite(x), "scalar_to_twohot: non-finite scalar");
  double y = s.transform ? value_transform(x) : x;
  bool clipped = false;
  if (y < -s.range) {
    y = -s.range;
    clipped = true;
  } else if (y > s.range) {
    y = s.range;
    clipped = true;
  }
  if (counter) {
    counter->total.fetch_add(1, std::memory_order_relaxed);
    if (clipped) counter->clipped.fetch_add(1, std::memory_order_relaxed);
  }
  Vec probs = Vec::Zero(s.size);
  const double pos = (y + s.range) / s.step();
  int lo = int(std::floor(pos));
  if (lo >= s.size - 1) lo = s.size - 2;  // y == +range lands exactly on top atom
  if (lo < 0) lo = 0;
  const double w = pos - double(lo);
  probs(lo) = 1.0 - w;
  probs(lo + 1) = w;
  return probs;
}

double categorical_to_scalar(const Vec& probs, const Support& s) {
  require(probs.size() == s.size, "categorical_to_scalar: size mismatch");
  double y = 0.0;
  for (int i = 0; i < s.size; ++i) y += probs(i) * s.atom(i);
  return s.transform ? inverse_value_transform(y) : y;
}

Vec softmax(const Vec& logits) {
  const double m = logits.maxCoeff();
  Vec e = (logits.array() - m).exp();
  return e / e.sum();
}

double decode_logits(const Vec& logits, const Support& s) {
  require(logits.size() == s.size, "decode_logits: size mismatch");
  return categorical_to_scalar(softmax(logits), s);
}

Vec decode_logits_cols(const Mat& logits, const Support& s) {
  require(logits.rows() == s.size, "decode_logits_cols: row count mismatch");
  Vec out(logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j)
    out(j) = decode_logits(logits.col(j), s);
  return out;
}

double cross_entropy(const Vec& target, const Vec& logits) {
  require(target.size() == logits.size(), "cross_entropy: size mismatch");
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return lse - target.dot(logits);
}

}  // namespace ezm
