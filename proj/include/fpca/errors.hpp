// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace fpca {

struct SimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Solver hit the Newton iteration cap; signals pathological parameters.
struct NonConvergence : SimError {
  using SimError::SimError;
};

// Bias scheme cannot form a solvable network.
struct DegenerateBias : SimError {
  using SimError::SimError;
};

// Too many rows activated for the ADC level count or the device on/off
// ratio: a column of ZEROs could alias to a ONE.
struct AliasRisk : SimError {
  using SimError::SimError;
};

// A readout current landed inside the guard band around the decision
// threshold: the read is not trustworthy.
struct MarginViolation : SimError {
  using SimError::SimError;
};

// A reduction or layout would leave the tile bounds.
struct CapacityExceeded : SimError {
  using SimError::SimError;
};

// A migration pulse put a non-target cell across the write threshold.
struct DisturbViolation : SimError {
  using SimError::SimError;
};

struct LengthMismatch : SimError {
  using SimError::SimError;
};

struct InvalidSpec : SimError {
  using SimError::SimError;
};

struct ConfigError : SimError {
  using SimError::SimError;
};

}  // namespace fpca
