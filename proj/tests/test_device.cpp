// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "fpca/device.hpp"
#include "fpca/rng.hpp"

using namespace fpca;

namespace {
DeviceParams defaults() { return DeviceParams{}; }
}  // namespace

TEST_CASE("linear resistor limit") {
  DeviceParams p = defaults();
  p.alpha = 0.0;
  CHECK(conduct(p, 1, p.v_read) == doctest::Approx(p.v_read / p.r_on).epsilon(1e-15));
  CHECK(conduct(p, 0, p.v_read) == doctest::Approx(p.v_read / p.r_off).epsilon(1e-15));
}

TEST_CASE("zero bias gives zero current") {
  DeviceParams p = defaults();
  CHECK(conduct(p, 1, 0.0) == 0.0);
  CHECK(conduct(p, 0, 0.0) == 0.0);
}

TEST_CASE("half-bias current suppressed 8x at alpha=2") {
  // I(V_r/2) = (V_r / 2 r_on) * (1/2)^2 = V_r / (8 r_on).
  DeviceParams p = defaults();
  p.alpha = 2.0;
  const double expected = p.v_read / (8.0 * p.r_on);
  CHECK(conduct(p, 1, p.v_read / 2) == doctest::Approx(expected).epsilon(1e-14));

  // Cross-check against a brute-force tabulation of the I-V law.
  for (int k = 1; k <= 20; ++k) {
    const double v = p.v_read * k / 20.0;
    double brute = v / p.r_on;
    for (int e = 0; e < 2; ++e) brute *= v / p.v_read;
    CHECK(conduct(p, 1, v) == doctest::Approx(brute).epsilon(1e-13));
  }
}

TEST_CASE("conduct is odd and monotone, ratio equals r_off/r_on") {
  DeviceParams p = defaults();
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const double v = rng.uniform(-p.v_read, p.v_read);
    CHECK(conduct(p, 1, v) == doctest::Approx(-conduct(p, 1, -v)).epsilon(1e-15));
    if (v != 0.0) {
      const double ratio = conduct(p, 1, v) / conduct(p, 0, v);
      CHECK(ratio == doctest::Approx(p.r_off / p.r_on).epsilon(1e-12));
    }
  }
  double prev = 0.0;
  for (int k = 1; k <= 50; ++k) {
    const double i = conduct(p, 1, p.v_read * k / 50.0);
    CHECK(i >= prev);
    prev = i;
  }
}

TEST_CASE("nonlinearity suppresses half-selected current") {
  DeviceParams p = defaults();
  for (double alpha : {0.5, 1.0, 2.0, 3.0}) {
    p.alpha = alpha;
    const double full = conduct(p, 1, p.v_read);
    const double half = conduct(p, 1, p.v_read / 2);
    CHECK(half / full < 0.5);
  }
}

TEST_CASE("threshold writes") {
  DeviceParams p = defaults();
  CHECK(apply_write(p, 0, 1.25 * p.v_write) == 1);
  CHECK(apply_write(p, 1, 0.74 * p.v_write) == 1);
  CHECK(apply_write(p, 1, -p.v_write) == 0);
  CHECK(apply_write(p, 0, 0.99 * p.v_write) == 0);
  // Idempotence at fixed voltage.
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const double v = rng.uniform(-2 * p.v_write, 2 * p.v_write);
    const uint8_t once = apply_write(p, t & 1, v);
    CHECK(apply_write(p, once, v) == once);
  }
}

TEST_CASE("parameter validation") {
  DeviceParams p = defaults();
  p.r_off = 10 * p.r_on;  // ratio below 64
  CHECK_THROWS_AS(p.validate(), InvalidSpec);
  p = defaults();
  p.v_read = 0.6;  // not < v_write/2
  CHECK_THROWS_AS(p.validate(), InvalidSpec);
  p = defaults();
  p.alpha = -1.0;
  CHECK_THROWS_AS(p.validate(), InvalidSpec);
  CHECK_NOTHROW(defaults().validate());
}
