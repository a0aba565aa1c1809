#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ezm {

// Batched convention throughout: rows = features, cols = batch samples.
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

inline void require_shape(const Mat& m, Eigen::Index rows, Eigen::Index cols,
                          const std::string& where) {
  if (m.rows() != rows || m.cols() != cols)
    throw ShapeError(where + ": expected " + std::to_string(rows) + "x" +
                     std::to_string(cols) + ", got " + std::to_string(m.rows()) +
                     "x" + std::to_string(m.cols()));
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline void require_finite(const Mat& m, const std::string& where) {
  if (!m.allFinite()) throw NumericError(where + ": non-finite values");
}

// splitmix64; used to derive independent seeds from (base, stream ids)
inline uint64_t mix_seed(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  uint64_t s = mix_seed(base);
  s = mix_seed(s ^ (a + 0x632be59bd9b4e019ull));
  s = mix_seed(s ^ (b + 0x9e6c63d0876a9a47ull));
  s = mix_seed(s ^ (c + 0xd1b54a32d192ed03ull));
  return s;
}

// Deterministic RNG with hand-rolled distributions so streams are
// reproducible independent of standard-library internals.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : s_(seed ? seed : 0x853c49e6748fea9bull) {}

  uint64_t next_u64() {
    // xorshift* over splitmix-initialised state
    uint64_t x = s_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    s_ = x;
    return x * 0x2545f4914f6cdd1dull;
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // integer in [0, n)
  int uniform_int(int n) {
    return n <= 1 ? 0 : int(next_u64() % uint64_t(n));
  }
  int64_t uniform_i64(int64_t n) {
    return n <= 1 ? 0 : int64_t(next_u64() % uint64_t(n));
  }

  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0, u2 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // standard Gumbel(0,1)
  double gumbel() {
    double u;
    do {
      u = uniform();
    } while (u <= 1e-300);
    return -std::log(-std::log(u) + 1e-300);
  }

  Mat gaussian_mat(Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
    Mat m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = scale * gaussian();
    return m;
  }
  Mat uniform_mat(Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
    Mat m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = uniform(lo, hi);
    return m;
  }

  uint64_t state() const { return s_; }

 private:
  uint64_t s_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ezm
