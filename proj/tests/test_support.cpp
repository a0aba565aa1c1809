#include <cmath>

#include "doctest.h"
#include "ezm/support.hpp"

using namespace ezm;

TEST_SUITE("support") {

TEST_CASE("transform fixed points and shape") {
  CHECK(value_transform(0.0) == 0.0);
  CHECK(value_transform(3.0) == doctest::Approx(std::sqrt(4.0) - 1.0 + 0.003).epsilon(1e-15));
  CHECK(value_transform(-3.0) == doctest::Approx(-(std::sqrt(4.0) - 1.0 + 0.003)).epsilon(1e-15));
  // monotone
  double prev = -1e9;
  for (double x = -50.0; x <= 50.0; x += 0.37) {
    const double y = value_transform(x);
    CHECK(y > prev);
    prev = y;
  }
}

TEST_CASE("inverse transform is exact to 1e-9 relative") {
  for (double x : {0.0, 1e-9, -1e-9, 0.01, -0.01, 0.5, -0.5, 1.0, -1.0, 3.0,
                   -7.5, 42.0, -123.456, 500.0, -500.0}) {
    const double back = inverse_value_transform(value_transform(x));
    CHECK(std::abs(back - x) <= 1e-9 * std::max(1.0, std::abs(x)));
  }
}

TEST_CASE("two-hot of an atom is exactly one-hot") {
  Support s;
  const Vec p = scalar_to_twohot(inverse_value_transform(s.atom(17)), s);
  CHECK(p(17) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-12));
  int nonzero = 0;
  for (int i = 0; i < s.size; ++i)
    if (p(i) > 1e-9) ++nonzero;
  CHECK(nonzero == 1);
}

TEST_CASE("encode/decode roundtrips in-range scalars") {
  Support s;
  for (double x : {0.0, 0.42, -0.42, 1.0, -1.0, 5.0, -5.0, 25.0, -60.0, 95.0}) {
    const Vec p = scalar_to_twohot(x, s);
    CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(categorical_to_scalar(p, s) == doctest::Approx(x).epsilon(1e-9));
  }
}

TEST_CASE("out-of-range scalars clip to boundary atoms and are counted") {
  Support s;
  ClipCounter counter;
  const double huge = inverse_value_transform(s.range) * 10.0;
  const Vec hi = scalar_to_twohot(huge, s, &counter);
  CHECK(hi(s.size - 1) == doctest::Approx(1.0).epsilon(1e-12));
  const Vec lo = scalar_to_twohot(-huge, s, &counter);
  CHECK(lo(0) == doctest::Approx(1.0).epsilon(1e-12));
  scalar_to_twohot(0.0, s, &counter);
  CHECK(counter.clipped.load() == 2);
  CHECK(counter.total.load() == 3);
  CHECK(counter.rate() == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("uniform prediction cross-entropy equals log(size)") {
  Support s;
  const Vec zero_logits = Vec::Zero(s.size);
  for (double x : {0.0, 1.0, -4.2, 30.0}) {
    const Vec target = scalar_to_twohot(x, s);
    CHECK(std::abs(cross_entropy(target, zero_logits) - std::log(51.0)) <= 1e-9);
  }
  // and shifting all logits by a constant changes nothing
  const Vec shifted = Vec::Constant(s.size, 123.0);
  CHECK(cross_entropy(scalar_to_twohot(2.0, s), shifted) ==
        doctest::Approx(std::log(51.0)).epsilon(1e-12));
}

TEST_CASE("zero logits decode to zero") {
  Support s;
  CHECK(decode_logits(Vec::Zero(s.size), s) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("identity-transform switch") {
  Support s;
  s.transform = false;
  s.range = 5.0;
  const Vec p = scalar_to_twohot(1.25, s);
  CHECK(categorical_to_scalar(p, s) == doctest::Approx(1.25).epsilon(1e-12));
  // raw space: expectation of the two-hot equals the scalar directly
  double e = 0.0;
  for (int i = 0; i < s.size; ++i) e += p(i) * s.atom(i);
  CHECK(e == doctest::Approx(1.25).epsilon(1e-12));
}

TEST_CASE("batched decode matches per-column decode") {
  Support s;
  Rng rng(3);
  Mat logits = rng.gaussian_mat(s.size, 4);
  const Vec out = decode_logits_cols(logits, s);
  for (int j = 0; j < 4; ++j)
    CHECK(out(j) == doctest::Approx(decode_logits(logits.col(j), s)).epsilon(1e-12));
}

}  // TEST_SUITE
