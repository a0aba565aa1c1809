#pragma once

#include <functional>

#include "ezm/common.hpp"

namespace ezm::testutil {

// Central finite differences of a scalar function of one matrix input.
template <class F>
Mat fd_gradient(F&& f, const Mat& x0, double h = 1e-6) {
  Mat g(x0.rows(), x0.cols());
  for (Eigen::Index j = 0; j < x0.cols(); ++j) {
    for (Eigen::Index i = 0; i < x0.rows(); ++i) {
      Mat xp = x0, xm = x0;
      xp(i, j) += h;
      xm(i, j) -= h;
      g(i, j) = (f(xp) - f(xm)) / (2.0 * h);
    }
  }
  return g;
}

// Largest elementwise violation of |a-b| <= atol + rtol*max(|a|,|b|);
// <= 0 means the comparison passes.
inline double max_violation(const Mat& a, const Mat& b, double rtol,
                            double atol) {
  double worst = -1e300;
  for (Eigen::Index j = 0; j < a.cols(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      const double scale = std::max(std::abs(a(i, j)), std::abs(b(i, j)));
      worst = std::max(worst, std::abs(a(i, j) - b(i, j)) - (atol + rtol * scale));
    }
  return worst;
}

inline bool all_close(const Mat& a, const Mat& b, double rtol = 1e-6,
                      double atol = 1e-9) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return max_violation(a, b, rtol, atol) <= 0.0;
}

}  // namespace ezm::testutil
