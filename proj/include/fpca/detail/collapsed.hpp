// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <vector>

#include "fpca/circuit.hpp"

namespace fpca {
namespace detail {

constexpr double kGmin = 1e-16;  // Jacobian floor only; residuals stay exact

// Device current/slope with the exponent dispatch hoisted out of the hot
// loops. For even integer exponents the sign never needs separating.
struct DevFun {
  double alpha;
  double inv_vr;
  int m;  // integer exponent, or -1 for the generic pow path

  explicit DevFun(const DeviceParams& p)
      : alpha(p.alpha), inv_vr(1.0 / p.v_read), m(integer_alpha(p.alpha)) {}

  double factor(double v) const {
    if (m == 0) return 1.0;
    if (m == 6) {
      const double s = v * inv_vr;
      const double s2 = s * s;
      return s2 * s2 * s2;
    }
    if (m == 2) {
      const double s = v * inv_vr;
      return s * s;
    }
    if (m > 0)
      return (m & 1) ? ipow_small(std::abs(v) * inv_vr, m)
                     : ipow_small(v * inv_vr, m);
    if (v == 0.0) return 0.0;
    return std::pow(std::abs(v) * inv_vr, alpha);
  }

  double current(double inv_r, double v) const {
    return v * factor(v) * inv_r;
  }

  double slope(double inv_r, double v) const {
    return (alpha + 1.0) * factor(v) * inv_r;
  }
};

inline void validate_bias(const CrossbarArray& a, const BiasScheme& b) {
  if (static_cast<int>(b.rows.size()) != a.rows ||
      static_cast<int>(b.cols.size()) != a.cols)
    throw DegenerateBias("bias vectors do not match array dims");
  int driven = 0, non_floating = 0;
  for (const auto& t : b.rows) {
    driven += t.kind == BiasKind::Driven;
    non_floating += t.is_fixed();
  }
  for (const auto& t : b.cols) {
    driven += t.kind == BiasKind::Driven;
    non_floating += t.is_fixed();
  }
  if (driven == 0 || non_floating < 2)
    throw DegenerateBias("need a driven terminal and a return path");
  for (auto [r, c] : b.ties)
    if (r < 0 || r >= a.rows || c < 0 || c >= a.cols)
      throw DegenerateBias("tie index out of range");
}

inline void dump_system_csv(const std::string& path,
                            const std::vector<Eigen::Triplet<double>>& trips,
                            const Eigen::VectorXd& rhs) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw ConfigError("cannot open nodal dump file: " + path);
  std::fprintf(f, "row,col,value\n");
  for (const auto& t : trips)
    std::fprintf(f, "%d,%d,%.17g\n", t.row(), t.col(), t.value());
  std::fprintf(f, "# rhs\n");
  for (Eigen::Index i = 0; i < rhs.size(); ++i)
    std::fprintf(f, "%lld,%.17g\n", static_cast<long long>(i), rhs[i]);
  std::fclose(f);
}

// Lumped-wire solve: one node per row line and per column line. Exactly
// recovers the closed-form column sums, so it doubles as the analytic
// reference for the distributed model.
inline SolveResult solve_collapsed(const CrossbarArray& a, const BiasScheme& b,
                                   const SolveOptions& opt) {
  const int R = a.rows, C = a.cols, N = R + C;
  const DevFun dev(a.params);

  // Union-find over line nodes; ties merge a row line with a column line.
  std::vector<int> parent(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i) parent[static_cast<size_t>(i)] = i;
  auto find = [&](int x) {
    while (parent[static_cast<size_t>(x)] != x) {
      parent[static_cast<size_t>(x)] =
          parent[static_cast<size_t>(parent[static_cast<size_t>(x)])];
      x = parent[static_cast<size_t>(x)];
    }
    return x;
  };
  for (auto [r, c] : b.ties) {
    int pr = find(r), pc = find(R + c);
    if (pr != pc) parent[static_cast<size_t>(pc)] = pr;
  }

  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> fixed_v(static_cast<size_t>(N), nan);
  double vscale = a.params.v_read;
  auto fix = [&](int node, double v) {
    const int root = find(node);
    double& slot = fixed_v[static_cast<size_t>(root)];
    if (!std::isnan(slot) && std::abs(slot - v) > 1e-15)
      throw DegenerateBias("tied terminals driven to different voltages");
    slot = v;
    vscale = std::max(vscale, std::abs(v));
  };
  for (int i = 0; i < R; ++i)
    if (b.rows[static_cast<size_t>(i)].is_fixed())
      fix(i, b.rows[static_cast<size_t>(i)].value());
  for (int j = 0; j < C; ++j)
    if (b.cols[static_cast<size_t>(j)].is_fixed())
      fix(R + j, b.cols[static_cast<size_t>(j)].value());

  std::vector<int> row_root(static_cast<size_t>(R)), col_root(static_cast<size_t>(C));
  for (int i = 0; i < R; ++i) row_root[static_cast<size_t>(i)] = find(i);
  for (int j = 0; j < C; ++j) col_root[static_cast<size_t>(j)] = find(R + j);

  // Per-device inverse effective resistance.
  std::vector<double> inv_r(static_cast<size_t>(R) * static_cast<size_t>(C));
  for (int i = 0; i < R; ++i)
    for (int j = 0; j < C; ++j)
      inv_r[static_cast<size_t>(i) * C + j] =
          1.0 / (a.params.resistance(a.cells.get(i, j)) * a.scale_at(i, j));

  std::vector<double> v(static_cast<size_t>(N), 0.0);
  for (int n = 0; n < N; ++n) {
    const double f = fixed_v[static_cast<size_t>(find(n))];
    v[static_cast<size_t>(n)] = std::isnan(f) ? 0.0 : f;
  }

  bool cols_all_fixed = true, cols_equal = true;
  double col_common = 0.0;
  for (int j = 0; j < C; ++j) {
    const double f = fixed_v[static_cast<size_t>(col_root[j])];
    if (std::isnan(f)) { cols_all_fixed = false; break; }
    if (j == 0) col_common = f;
    else if (f != col_common) cols_equal = false;
  }
  bool rows_all_fixed = true, rows_equal = true;
  double row_common = 0.0;
  for (int i = 0; i < R; ++i) {
    const double f = fixed_v[static_cast<size_t>(row_root[i])];
    if (std::isnan(f)) { rows_all_fixed = false; break; }
    if (i == 0) row_common = f;
    else if (f != row_common) rows_equal = false;
  }

  SolveResult res;
  res.row_line_v.resize(static_cast<size_t>(R));
  res.col_line_v.resize(static_cast<size_t>(C));
  res.row_currents.assign(static_cast<size_t>(R), 0.0);
  res.col_currents.assign(static_cast<size_t>(C), 0.0);

  // One-sided free systems are diagonal: each floating line on the free
  // side sees only fixed lines, so nodes decouple into scalar problems.
  auto scalar_solve = [&](double init, double lo, double hi,
                          auto&& f_and_slope) {
    double x = std::clamp(init, lo, hi);
    int it = 0;
    for (; it < 80; ++it) {
      auto [F, S] = f_and_slope(x);
      if (std::abs(F) == 0.0) break;
      if (F > 0) hi = x; else lo = x;
      double xn = x - F / (S + kGmin);
      if (xn <= lo || xn >= hi) xn = 0.5 * (lo + hi);
      const bool done = std::abs(xn - x) <= 1e-12 * vscale;
      x = xn;
      if (done) break;
    }
    res.newton_iters = std::max(res.newton_iters, it);
    res.kcl_residual = std::max(res.kcl_residual, std::abs(f_and_slope(x).first));
    return x;
  };

  const bool diag_rows = b.ties.empty() && cols_all_fixed;
  const bool diag_cols = !diag_rows && b.ties.empty() && rows_all_fixed;
  bool rows_skip_sweep = false;

  if (diag_rows) {
    for (int i = 0; i < R; ++i) {
      if (b.rows[static_cast<size_t>(i)].is_fixed()) continue;
      if (cols_equal) { v[static_cast<size_t>(i)] = col_common; continue; }
      double lo = 1e300, hi = -1e300, glin = 0.0, gv = 0.0;
      for (int j = 0; j < C; ++j) {
        const double vc = v[static_cast<size_t>(R + j)];
        lo = std::min(lo, vc);
        hi = std::max(hi, vc);
        const double g = inv_r[static_cast<size_t>(i) * C + j];
        glin += g;
        gv += g * vc;
      }
      v[static_cast<size_t>(i)] = scalar_solve(gv / glin, lo, hi, [&](double x) {
        double F = 0, S = 0;
        for (int j = 0; j < C; ++j) {
          const double g = inv_r[static_cast<size_t>(i) * C + j];
          const double d = x - v[static_cast<size_t>(R + j)];
          F += dev.current(g, d);
          S += dev.slope(g, d);
        }
        return std::pair<double, double>(F, S);
      });
    }
    rows_skip_sweep = cols_equal;  // floating rows sit at the common voltage
  } else if (diag_cols) {
    for (int j = 0; j < C; ++j) {
      if (b.cols[static_cast<size_t>(j)].is_fixed()) continue;
      if (rows_equal) { v[static_cast<size_t>(R + j)] = row_common; continue; }
      double lo = 1e300, hi = -1e300, glin = 0.0, gv = 0.0;
      for (int i = 0; i < R; ++i) {
        const double vr = v[static_cast<size_t>(i)];
        lo = std::min(lo, vr);
        hi = std::max(hi, vr);
        const double g = inv_r[static_cast<size_t>(i) * C + j];
        glin += g;
        gv += g * vr;
      }
      v[static_cast<size_t>(R + j)] = scalar_solve(gv / glin, lo, hi, [&](double x) {
        double F = 0, S = 0;
        for (int i = 0; i < R; ++i) {
          const double g = inv_r[static_cast<size_t>(i) * C + j];
          const double d = v[static_cast<size_t>(i)] - x;
          F -= dev.current(g, d);
          S += dev.slope(g, d);
        }
        return std::pair<double, double>(F, S);
      });
    }
  } else {
    // General case: Newton over the free line roots with a sparse direct
    // solve per step, seeded from the linear (alpha = 0) solution.
    std::vector<int> free_idx(static_cast<size_t>(N), -1);
    std::vector<int> free_nodes;
    for (int n = 0; n < N; ++n) {
      if (find(n) != n) continue;
      if (!std::isnan(fixed_v[static_cast<size_t>(n)])) continue;
      free_idx[static_cast<size_t>(n)] = static_cast<int>(free_nodes.size());
      free_nodes.push_back(n);
    }
    const int nf = static_cast<int>(free_nodes.size());

    auto node_v = [&](int root) { return v[static_cast<size_t>(root)]; };
    auto sync = [&]() {
      for (int n = 0; n < N; ++n)
        v[static_cast<size_t>(n)] = v[static_cast<size_t>(find(n))];
    };

    if (nf > 0) {
      Eigen::VectorXd x(nf);
      {  // linear init
        std::vector<Eigen::Triplet<double>> trips;
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(nf);
        for (int i = 0; i < R; ++i)
          for (int j = 0; j < C; ++j) {
            const int ur = row_root[static_cast<size_t>(i)];
            const int uc = col_root[static_cast<size_t>(j)];
            if (ur == uc) continue;
            const double g = inv_r[static_cast<size_t>(i) * C + j];
            const int fr = free_idx[static_cast<size_t>(ur)];
            const int fc = free_idx[static_cast<size_t>(uc)];
            if (fr >= 0) trips.emplace_back(fr, fr, g);
            if (fc >= 0) trips.emplace_back(fc, fc, g);
            if (fr >= 0 && fc >= 0) {
              trips.emplace_back(fr, fc, -g);
              trips.emplace_back(fc, fr, -g);
            } else if (fr >= 0) {
              rhs[fr] += g * fixed_v[static_cast<size_t>(uc)];
            } else if (fc >= 0) {
              rhs[fc] += g * fixed_v[static_cast<size_t>(ur)];
            }
          }
        Eigen::SparseMatrix<double> A(nf, nf);
        A.setFromTriplets(trips.begin(), trips.end());
        if (!opt.dump_nodal_csv.empty())
          dump_system_csv(opt.dump_nodal_csv, trips, rhs);
        Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(A);
        if (ldlt.info() != Eigen::Success)
          throw DegenerateBias("collapsed nodal system is singular");
        x = ldlt.solve(rhs);
        if (!x.allFinite())
          throw DegenerateBias("collapsed nodal solve produced non-finite voltages");
      }
      for (int k = 0; k < nf; ++k)
        v[static_cast<size_t>(free_nodes[static_cast<size_t>(k)])] = x[k];
      sync();

      if (a.params.alpha != 0.0) {
        auto residual = [&](Eigen::VectorXd& F) {
          F.setZero();
          for (int i = 0; i < R; ++i)
            for (int j = 0; j < C; ++j) {
              const int ur = row_root[static_cast<size_t>(i)];
              const int uc = col_root[static_cast<size_t>(j)];
              if (ur == uc) continue;
              const int fr = free_idx[static_cast<size_t>(ur)];
              const int fc = free_idx[static_cast<size_t>(uc)];
              if (fr < 0 && fc < 0) continue;
              const double cur = dev.current(inv_r[static_cast<size_t>(i) * C + j],
                                             node_v(ur) - node_v(uc));
              if (fr >= 0) F[fr] += cur;
              if (fc >= 0) F[fc] -= cur;
            }
        };
        Eigen::VectorXd F(nf), Ftry(nf);
        Eigen::SparseMatrix<double> J(nf, nf);
        std::vector<Eigen::Triplet<double>> trips;
        residual(F);
        double fbest = F.norm();
        std::vector<double> vbest = v;
        int stall = 0;
        int it = 0;
        for (; it < opt.max_newton; ++it) {
          trips.clear();
          for (int i = 0; i < R; ++i)
            for (int j = 0; j < C; ++j) {
              const int ur = row_root[static_cast<size_t>(i)];
              const int uc = col_root[static_cast<size_t>(j)];
              if (ur == uc) continue;
              const int fr = free_idx[static_cast<size_t>(ur)];
              const int fc = free_idx[static_cast<size_t>(uc)];
              if (fr < 0 && fc < 0) continue;
              const double g = dev.slope(inv_r[static_cast<size_t>(i) * C + j],
                                         node_v(ur) - node_v(uc));
              if (fr >= 0) trips.emplace_back(fr, fr, g);
              if (fc >= 0) trips.emplace_back(fc, fc, g);
              if (fr >= 0 && fc >= 0) {
                trips.emplace_back(fr, fc, -g);
                trips.emplace_back(fc, fr, -g);
              }
            }
          for (int k = 0; k < nf; ++k) trips.emplace_back(k, k, kGmin);
          J.setFromTriplets(trips.begin(), trips.end());
          Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(J);
          if (ldlt.info() != Eigen::Success)
            throw NonConvergence("collapsed Newton Jacobian factorization failed");
          Eigen::VectorXd dx = ldlt.solve(-F);

          const double f0 = F.norm();
          double step = 1.0;
          Eigen::VectorXd xsave(nf);
          for (int k = 0; k < nf; ++k)
            xsave[k] = v[static_cast<size_t>(free_nodes[static_cast<size_t>(k)])];
          double accepted_dx = 0.0;
          for (int halving = 0; halving < 30; ++halving) {
            for (int k = 0; k < nf; ++k)
              v[static_cast<size_t>(free_nodes[static_cast<size_t>(k)])] =
                  xsave[k] + step * dx[k];
            sync();
            residual(Ftry);
            if (Ftry.norm() <= f0 || step < 1e-8) break;
            step *= 0.5;
          }
          accepted_dx = step * dx.cwiseAbs().maxCoeff();
          F = Ftry;
          if (accepted_dx <= opt.newton_tol * vscale) { ++it; break; }
          // Residual floor reached: line search keeps |F| non-increasing, so
          // a long stretch without improvement means we are at the
          // floating-point limit of the device law, not diverging.
          const double fn = F.norm();
          if (fn < 0.99 * fbest) {
            fbest = fn;
            vbest = v;
            stall = 0;
          } else if (++stall >= 10) {
            v = vbest;
            sync();
            residual(F);
            ++it;
            break;
          }
        }
        if (it >= opt.max_newton)
          throw NonConvergence("collapsed Newton hit iteration cap");
        res.newton_iters = it;
        res.kcl_residual = F.cwiseAbs().maxCoeff();
      }
    } else if (!opt.dump_nodal_csv.empty()) {
      dump_system_csv(opt.dump_nodal_csv, {}, Eigen::VectorXd::Zero(0));
    }
    sync();
  }

  // Output sweep. When every column sits at one common fixed voltage the
  // floating rows match it exactly and contribute nothing.
  if (opt.want_cell_voltages)
    res.cell_voltages.assign(static_cast<size_t>(R) * static_cast<size_t>(C), 0.0);
  for (int i = 0; i < R; ++i) {
    if (rows_skip_sweep && !b.rows[static_cast<size_t>(i)].is_fixed()) continue;
    const double vr = v[static_cast<size_t>(i)];
    double irow = 0.0;
    const double* inv_row = &inv_r[static_cast<size_t>(i) * C];
    for (int j = 0; j < C; ++j) {
      const double vd = vr - v[static_cast<size_t>(R + j)];
      const double cur = dev.current(inv_row[j], vd);
      irow += cur;
      res.col_currents[static_cast<size_t>(j)] += cur;
      res.power += vd * cur;
      if (opt.want_cell_voltages)
        res.cell_voltages[static_cast<size_t>(i) * C + j] = vd;
    }
    res.row_currents[static_cast<size_t>(i)] = irow;
  }
  for (int i = 0; i < R; ++i) res.row_line_v[static_cast<size_t>(i)] = v[static_cast<size_t>(i)];
  for (int j = 0; j < C; ++j) res.col_line_v[static_cast<size_t>(j)] = v[static_cast<size_t>(R + j)];
  return res;
}

}  // namespace detail
}  // namespace fpca
