// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fpca/bitmatrix.hpp"
#include "fpca/device.hpp"
#include "fpca/errors.hpp"
#include "fpca/rng.hpp"

namespace fpca {

enum class BiasKind : uint8_t { Driven, Grounded, Floating };

struct TerminalBias {
  BiasKind kind = BiasKind::Floating;
  double v = 0.0;

  static TerminalBias driven(double volts) { return {BiasKind::Driven, volts}; }
  static TerminalBias grounded() { return {BiasKind::Grounded, 0.0}; }
  static TerminalBias floating() { return {BiasKind::Floating, 0.0}; }

  bool is_fixed() const { return kind != BiasKind::Floating; }
  double value() const { return kind == BiasKind::Driven ? v : 0.0; }
};

// Terminal connections for one solve. A tie is an external zero-resistance
// jumper between a row terminal and a column terminal (interface circuitry
// for transpose-style moves); empty for ordinary operation.
struct BiasScheme {
  std::vector<TerminalBias> rows;
  std::vector<TerminalBias> cols;
  std::vector<std::pair<int, int>> ties;

  static BiasScheme all_floating(int n_rows, int n_cols) {
    BiasScheme b;
    b.rows.assign(static_cast<size_t>(n_rows), TerminalBias::floating());
    b.cols.assign(static_cast<size_t>(n_cols), TerminalBias::floating());
    return b;
  }
};

// How terminals outside the selected window are connected during an access.
enum class UnselectedPolicy { Floating, Grounded, HalfSelected };

struct TileWindow {
  int row0 = 0, col0 = 0, rows = 0, cols = 0;
};

// Physical crossbar: rows x cols binary cells, a shared device model, and a
// wire resistance per segment between adjacent cross-points. r_line = 0
// selects the ideal lumped-wire solver; r_line > 0 the distributed model
// with one node per cross-point on each wire. Row terminals attach at the
// west edge (segment column 0), column terminals at the south edge.
struct CrossbarArray {
  int rows = 0;
  int cols = 0;
  DeviceParams params;
  double r_line = 1.0;
  BitMatrix cells;
  std::vector<double> r_scale;  // per-cell lognormal spread; empty = nominal

  CrossbarArray() = default;
  CrossbarArray(int r, int c, DeviceParams p, double rl)
      : rows(r), cols(c), params(p), r_line(rl), cells(r, c) {
    if (r < 1 || c < 1) throw InvalidSpec("array dims must be >= 1");
    if (rl < 0) throw InvalidSpec("r_line must be >= 0");
    p.validate();
  }

  double scale_at(int r, int c) const {
    return r_scale.empty()
               ? 1.0
               : r_scale[static_cast<size_t>(r) * static_cast<size_t>(cols) +
                         static_cast<size_t>(c)];
  }

  void apply_variability(Rng& rng) {
    r_scale.assign(static_cast<size_t>(rows) * static_cast<size_t>(cols), 1.0);
    if (params.variability_sigma == 0.0) return;
    for (auto& s : r_scale)
      s = std::exp(params.variability_sigma * rng.normal());
  }
};

struct SolveOptions {
  double newton_tol = 1e-9;  // relative node-voltage change
  int max_newton = 200;
  bool want_cell_voltages = true;
  bool force_direct = false;  // bypass the iterative path (cross-checks)
  std::string dump_nodal_csv;  // non-empty: dump the linearized system
};

struct SolveResult {
  // Voltage of each line at its terminal node (the full node grids are
  // internal to the distributed solver; terminal values are what the
  // interface circuitry sees).
  std::vector<double> row_line_v;
  std::vector<double> col_line_v;
  // External terminal currents: row = delivered into the network by the row
  // terminal, col = collected out of the network at the column terminal.
  // Floating terminals carry zero.
  std::vector<double> row_currents;
  std::vector<double> col_currents;
  std::vector<double> cell_voltages;  // rows*cols row-major; empty if not requested
  double power = 0.0;                 // W dissipated in devices + wires
  int newton_iters = 0;
  double kcl_residual = 0.0;  // max |node current residual| over free nodes

  double cell_v(int r, int c, int n_cols) const {
    return cell_voltages[static_cast<size_t>(r) * static_cast<size_t>(n_cols) +
                         static_cast<size_t>(c)];
  }
};

struct SchemePower {
  double grounded = 0.0;
  double half_selected = 0.0;
  double floating = 0.0;
};

namespace detail {
void validate_bias(const CrossbarArray& a, const BiasScheme& b);
SolveResult solve_collapsed(const CrossbarArray& a, const BiasScheme& b,
                            const SolveOptions& opt);
SolveResult solve_distributed(const CrossbarArray& a, const BiasScheme& b,
                              const SolveOptions& opt);
}  // namespace detail

inline SolveResult solve(const CrossbarArray& array, const BiasScheme& bias,
                         const SolveOptions& opt = {}) {
  detail::validate_bias(array, bias);
  return array.r_line == 0.0 ? detail::solve_collapsed(array, bias, opt)
                             : detail::solve_distributed(array, bias, opt);
}

// Bias for a windowed access: selected rows driven at v_drive, selected
// columns grounded, everything else handled per policy.
inline BiasScheme window_bias(const CrossbarArray& array, const TileWindow& w,
                              const BitVec& row_mask, const BitVec& col_mask,
                              UnselectedPolicy policy, double v_drive,
                              double v_half) {
  BiasScheme b;
  TerminalBias unsel;
  switch (policy) {
    case UnselectedPolicy::Floating: unsel = TerminalBias::floating(); break;
    case UnselectedPolicy::Grounded: unsel = TerminalBias::grounded(); break;
    case UnselectedPolicy::HalfSelected: unsel = TerminalBias::driven(v_half); break;
  }
  b.rows.assign(static_cast<size_t>(array.rows), unsel);
  b.cols.assign(static_cast<size_t>(array.cols), unsel);
  for (int r = 0; r < w.rows; ++r)
    b.rows[static_cast<size_t>(w.row0 + r)] =
        row_mask[static_cast<size_t>(r)] ? TerminalBias::driven(v_drive) : unsel;
  for (int c = 0; c < w.cols; ++c)
    b.cols[static_cast<size_t>(w.col0 + c)] =
        col_mask[static_cast<size_t>(c)] ? TerminalBias::grounded() : unsel;
  return b;
}

// Total source power for a full-window access under the three unselected
// terminal policies.
inline SchemePower solve_power_comparison(const CrossbarArray& array,
                                          const TileWindow& w,
                                          const SolveOptions& opt = {}) {
  SchemePower out;
  const BitVec rm = ones_mask(w.rows), cm = ones_mask(w.cols);
  const double vr = array.params.v_read;
  SolveOptions o = opt;
  o.want_cell_voltages = false;
  out.grounded =
      solve(array, window_bias(array, w, rm, cm, UnselectedPolicy::Grounded, vr, vr / 2), o)
          .power;
  out.half_selected =
      solve(array, window_bias(array, w, rm, cm, UnselectedPolicy::HalfSelected, vr, vr / 2), o)
          .power;
  out.floating =
      solve(array, window_bias(array, w, rm, cm, UnselectedPolicy::Floating, vr, vr / 2), o)
          .power;
  return out;
}

}  // namespace fpca

#include "fpca/detail/collapsed.hpp"
#include "fpca/detail/distributed.hpp"
