// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

#include "fpca/errors.hpp"

namespace fpca {

enum class Polarity { Bipolar };

// Binary resistive cell. Reads follow a power-law I-V
//
//   I(v) = sign(v) * (|v| / R_state) * (|v| / v_read)^alpha
//
// so a half-selected cell passes far less than half the current of a fully
// selected one (the selector-style nonlinearity that suppresses sneak
// paths). Writes are a threshold step: state flips when |v| crosses
// v_write, with no transient dynamics.
// Defaults model a selector-integrated cell: tens-of-MOhm read resistance,
// five-decade on/off window, and steep sub-threshold suppression. Weaker
// settings (alpha ~ 2, ratio ~ 100) leave half-select sneak currents worth
// tens of count levels on a 512-wide fabric, which no readout calibration
// can undo.
struct DeviceParams {
  double r_on = 1.0e7;       // ohm, low-resistance (ONE) state
  double r_off = 1.0e12;     // ohm, high-resistance (ZERO) state
  double v_write = 1.0;      // volt, set/reset threshold magnitude
  double v_read = 0.3;       // volt, nominal read bias
  double alpha = 6.0;        // nonlinearity exponent; 0 = linear resistor
  Polarity polarity = Polarity::Bipolar;  // set on positive, reset on negative
  double variability_sigma = 0.0;  // lognormal spread on R; 0 = exact device

  void validate() const {
    if (r_on <= 0 || r_off <= 0) throw InvalidSpec("resistances must be positive");
    if (r_off / r_on < 64.0) throw InvalidSpec("r_off/r_on ratio below 64");
    if (!(v_read < v_write / 2)) throw InvalidSpec("v_read must be < v_write/2");
    if (alpha < 0) throw InvalidSpec("alpha must be >= 0");
    if (variability_sigma < 0) throw InvalidSpec("variability_sigma must be >= 0");
  }

  double resistance(uint8_t bit) const { return bit ? r_on : r_off; }
};

namespace detail {

// (|v|/v_read)^alpha with repeated-squaring fast paths for small integer
// exponents (the solver hot loops live here).
inline double ipow_small(double x, int m) {
  double acc = 1.0;
  double base = x;
  while (m > 0) {
    if (m & 1) acc *= base;
    base *= base;
    m >>= 1;
  }
  return acc;
}

inline int integer_alpha(double alpha) {
  const int m = static_cast<int>(alpha);
  return (alpha == static_cast<double>(m) && m >= 0 && m <= 16) ? m : -1;
}

inline double nonlin_factor(double av, double v_read, double alpha) {
  const double x = av / v_read;
  const int m = integer_alpha(alpha);
  if (m >= 0) return ipow_small(x, m);
  return std::pow(x, alpha);
}

}  // namespace detail

// Static read current through one cell at bias v. Odd in v, monotone in |v|.
// r_scale carries per-device variability (1.0 nominal).
inline double conduct(const DeviceParams& p, uint8_t bit, double v,
                      double r_scale = 1.0) {
  if (v == 0.0) return 0.0;
  const double av = std::abs(v);
  const double i = av / (p.resistance(bit) * r_scale) *
                   detail::nonlin_factor(av, p.v_read, p.alpha);
  return v > 0 ? i : -i;
}

// dI/dv at bias v; equals (alpha+1) * I/v away from zero.
inline double conduct_slope(const DeviceParams& p, uint8_t bit, double v,
                            double r_scale = 1.0) {
  const double av = std::abs(v);
  if (av == 0.0)
    return p.alpha == 0.0 ? 1.0 / (p.resistance(bit) * r_scale) : 0.0;
  return (p.alpha + 1.0) / (p.resistance(bit) * r_scale) *
         detail::nonlin_factor(av, p.v_read, p.alpha);
}

// Threshold write: v >= +v_write sets, v <= -v_write resets, else no-op.
inline uint8_t apply_write(const DeviceParams& p, uint8_t bit, double v) {
  if (v >= p.v_write) return 1;
  if (v <= -p.v_write) return 0;
  return bit;
}

}  // namespace fpca
