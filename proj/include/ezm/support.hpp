#pragma once

#include <atomic>
#include <cstdint>

#include "ezm/common.hpp"

namespace ezm {

// Categorical value/reward support: scalars are squashed by an invertible
// transform, projected onto `size` evenly spaced atoms in [-range, range]
// with two-hot interpolation, and decoded back via softmax expectation.
struct Support {
  int size = 51;
  double range = 10.0;   // half-width in transformed space
  bool transform = true; // identity when false

  double atom(int i) const { return -range + 2.0 * range * i / (size - 1); }
  double step() const { return 2.0 * range / (size - 1); }
};

// sign(x)*(sqrt(|x|+1)-1) + eps*x with eps = 1e-3.
double value_transform(double x);
// Exact closed-form inverse of value_transform.
double inverse_value_transform(double h);

struct ClipCounter {
  std::atomic<int64_t> clipped{0};
  std::atomic<int64_t> total{0};
  double rate() const {
    const int64_t t = total.load();
    return t == 0 ? 0.0 : double(clipped.load()) / double(t);
  }
};

// Two-hot projection of a scalar onto the support (after the transform).
// Out-of-range values clip to the boundary atom; `counter` tracks clip rate.
Vec scalar_to_twohot(double x, const Support& s, ClipCounter* counter = nullptr);

// Expectation of a probability vector over the atoms, mapped back through
// the inverse transform.
double categorical_to_scalar(const Vec& probs, const Support& s);

// softmax(logits) -> categorical_to_scalar. Batched column variant too.
double decode_logits(const Vec& logits, const Support& s);
Vec decode_logits_cols(const Mat& logits, const Support& s);

// Numerically stable cross-entropy between a fixed target distribution and
// softmax(logits).
double cross_entropy(const Vec& target, const Vec& logits);

Vec softmax(const Vec& logits);

}  // namespace ezm
