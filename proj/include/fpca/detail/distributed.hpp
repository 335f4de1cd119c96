// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "fpca/circuit.hpp"
#include "fpca/detail/collapsed.hpp"

namespace fpca {
namespace detail {

#ifdef FPCA_SOLVER_STATS
inline long pcg_iters_total = 0;
inline double precond_build_ms = 0.0;
inline double pcg_ms = 0.0;
inline double residual_ms = 0.0;
#endif

// Distributed-wire solver: one node per cross-point on each row wire and
// each column wire (2*R*C nodes). Row terminals attach at segment column 0,
// column terminals at segment row R-1. Nonlinear devices are resolved by
// damped Newton; each Newton system is solved either by a direct sparse
// factorization (small arrays, or when terminal ties are present) or by
// conjugate gradients preconditioned with a symmetric two-grid cycle:
// tridiagonal line solves as the smoother plus a one-dof-per-line coarse
// correction. The coarse space carries the per-line near-constant modes
// that dominate when wire conductance >> device conductance.
class DistributedSystem {
 public:
  DistributedSystem(const CrossbarArray& a, const BiasScheme& b,
                    const SolveOptions& opt)
      : a_(a), bias_(b), opt_(opt), dev_(a.params),
        R_(a.rows), C_(a.cols), NR_(a.rows * a.cols), N2_(2 * NR_),
        gw_(1.0 / a.r_line) {
    setup_nodes();
    inv_r_.resize(NR_);
    for (int i = 0; i < R_; ++i)
      for (int j = 0; j < C_; ++j)
        inv_r_[static_cast<size_t>(i * C_ + j)] =
            1.0 / (a.params.resistance(a.cells.get(i, j)) * a.scale_at(i, j));
    g_.assign(static_cast<size_t>(NR_), 0.0);
    i_dev_.assign(static_cast<size_t>(NR_), 0.0);
    x_.assign(static_cast<size_t>(N2_), 0.0);
    for (int n = 0; n < N2_; ++n)
      if (!free_[static_cast<size_t>(n)]) x_[static_cast<size_t>(n)] = fixed_v_[static_cast<size_t>(n)];
    use_direct_ = !ties_.empty() || N2_ <= 1024 || opt.force_direct;
  }

  SolveResult run() {
    // Linear operating point (alpha = 0 conductances); exact solution when
    // the device model is linear, Newton seed otherwise.
    for (size_t k = 0; k < g_.size(); ++k) g_[k] = inv_r_[k];
    if (use_direct_) build_direct();
    else build_precond();

    std::vector<double> rhs(static_cast<size_t>(N2_), 0.0);
    linear_rhs(rhs);
    std::vector<double> dx(static_cast<size_t>(N2_), 0.0);
    // The linear solve is the answer at alpha = 0 but only a Newton seed
    // otherwise; don't over-resolve the seed.
    solve_linear(rhs, dx, a_.params.alpha == 0.0 ? 1e-13 : 1e-5);
    for (int n = 0; n < N2_; ++n)
      if (free_[static_cast<size_t>(n)]) x_[static_cast<size_t>(n)] = dx[static_cast<size_t>(n)];
    sync_aliases(x_);

    int newton_iters = 0;
    double kcl = 0.0;
    if (a_.params.alpha != 0.0) {
      std::vector<double> F(static_cast<size_t>(N2_)), Ftry(static_cast<size_t>(N2_));
      std::vector<double> xsave(static_cast<size_t>(N2_));
      eval_residual(x_, F);
      double fnorm = norm2(F);
      double fprev = fnorm;
      // Line search keeps |F| non-increasing, so a stretch with no real
      // improvement means the residual sits at its floating-point floor
      // (flat high-order device laws). Accept the best iterate then.
      double fbest = fnorm;
      std::vector<double> xbest = x_;
      int stall = 0;
      int it = 0;
      for (; it < opt_.max_newton; ++it) {
        update_slopes();
        if (use_direct_) build_direct();
        else build_precond();
        for (int n = 0; n < N2_; ++n) rhs[static_cast<size_t>(n)] = -F[static_cast<size_t>(n)];
        const double forcing =
            it == 0 ? 1e-2
                    : std::clamp(0.5 * (fnorm / fprev) * (fnorm / fprev), 1e-12, 1e-2);
        solve_linear(rhs, dx, forcing);

        xsave = x_;
        double step = 1.0;
        for (int halving = 0; halving < 30; ++halving) {
          for (int n = 0; n < N2_; ++n)
            if (free_[static_cast<size_t>(n)])
              x_[static_cast<size_t>(n)] = xsave[static_cast<size_t>(n)] + step * dx[static_cast<size_t>(n)];
          sync_aliases(x_);
          eval_residual(x_, Ftry);
          const double ftry = norm2(Ftry);
          if (ftry <= fnorm || step < 1e-8) {
            fprev = fnorm;
            fnorm = ftry;
            break;
          }
          step *= 0.5;
        }
        F.swap(Ftry);
        double max_dx = 0.0;
        for (int n = 0; n < N2_; ++n)
          if (free_[static_cast<size_t>(n)])
            max_dx = std::max(max_dx, std::abs(step * dx[static_cast<size_t>(n)]));
#ifdef FPCA_NEWTON_TRACE
        std::printf("  newton it=%d |F|=%.3e step=%.3g max_dx=%.3e\n", it, fnorm,
                    step, max_dx);
#endif
        if (max_dx <= opt_.newton_tol * vscale_) { ++it; break; }
        if (fnorm < 0.99 * fbest) {
          fbest = fnorm;
          xbest = x_;
          stall = 0;
        } else if (++stall >= 10) {
          x_ = xbest;
          eval_residual(x_, F);
          ++it;
          break;
        }
      }
      if (it >= opt_.max_newton)
        throw NonConvergence("distributed Newton hit iteration cap");
      newton_iters = it;
      for (int n = 0; n < N2_; ++n)
        if (free_[static_cast<size_t>(n)]) kcl = std::max(kcl, std::abs(F[static_cast<size_t>(n)]));
    }
    return outputs(newton_iters, kcl);
  }

 private:
  int rnode(int i, int j) const { return i * C_ + j; }
  int cnode(int i, int j) const { return NR_ + i * C_ + j; }

  void setup_nodes() {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    fixed_v_.assign(static_cast<size_t>(N2_), nan);
    canon_.resize(static_cast<size_t>(N2_));
    for (int n = 0; n < N2_; ++n) canon_[static_cast<size_t>(n)] = n;
    for (auto [r, c] : bias_.ties) {
      const int a = rnode(r, 0), b = cnode(R_ - 1, c);
      canon_[static_cast<size_t>(b)] = a;
      ties_.emplace_back(a, b);
    }
    vscale_ = a_.params.v_read;
    auto fix = [&](int node, double v) {
      const int root = canon_[static_cast<size_t>(node)];
      double& slot = fixed_v_[static_cast<size_t>(root)];
      if (!std::isnan(slot) && std::abs(slot - v) > 1e-15)
        throw DegenerateBias("tied terminals driven to different voltages");
      slot = v;
      vscale_ = std::max(vscale_, std::abs(v));
    };
    for (int i = 0; i < R_; ++i)
      if (bias_.rows[static_cast<size_t>(i)].is_fixed())
        fix(rnode(i, 0), bias_.rows[static_cast<size_t>(i)].value());
    for (int j = 0; j < C_; ++j)
      if (bias_.cols[static_cast<size_t>(j)].is_fixed())
        fix(cnode(R_ - 1, j), bias_.cols[static_cast<size_t>(j)].value());
    // Mirror fixed values onto alias slots so residuals see true voltages.
    for (auto [canon, alias] : ties_)
      fixed_v_[static_cast<size_t>(alias)] = fixed_v_[static_cast<size_t>(canon)];
    free_.resize(static_cast<size_t>(N2_));
    for (int n = 0; n < N2_; ++n)
      free_[static_cast<size_t>(n)] =
          std::isnan(fixed_v_[static_cast<size_t>(n)]) ? 1.0 : 0.0;
    // Alias slots are not independent dofs.
    for (auto [canon, alias] : ties_) free_[static_cast<size_t>(alias)] = 0.0;
    // Non-free slots are sparse (terminals only); masking by list beats a
    // full-array multiply in every hot path.
    for (int n = 0; n < N2_; ++n)
      if (free_[static_cast<size_t>(n)] == 0.0) fixed_list_.push_back(n);
  }

  void zero_fixed(std::vector<double>& v) const {
    for (int n : fixed_list_) v[static_cast<size_t>(n)] = 0.0;
  }

  void sync_aliases(std::vector<double>& v) const {
    for (auto [canon, alias] : ties_)
      v[static_cast<size_t>(alias)] = v[static_cast<size_t>(canon)];
  }

  void update_slopes() {
    for (int k = 0; k < NR_; ++k) {
      const double d = x_[static_cast<size_t>(k)] - x_[static_cast<size_t>(NR_ + k)];
      g_[static_cast<size_t>(k)] = dev_.slope(inv_r_[static_cast<size_t>(k)], d) + kGmin;
    }
  }

  // KCL residual at every node given true voltages v; masked to free dofs,
  // alias contributions folded into their canonical node.
  void eval_residual(const std::vector<double>& v, std::vector<double>& F) {
#ifdef FPCA_SOLVER_STATS
    const auto tstart = std::chrono::steady_clock::now();
    struct Guard {
      std::chrono::steady_clock::time_point t0;
      ~Guard() {
        residual_ms += std::chrono::duration<double, std::milli>(
                           std::chrono::steady_clock::now() - t0)
                           .count();
      }
    } guard{tstart};
#endif
    F.resize(static_cast<size_t>(N2_));
    // Row layer: wire stencil plus device current in one pass; device
    // currents cached for the column pass and the output stage.
    for (int i = 0; i < R_; ++i) {
      const double* vr = &v[static_cast<size_t>(rnode(i, 0))];
      const double* vc = &v[static_cast<size_t>(cnode(i, 0))];
      const double* ir = &inv_r_[static_cast<size_t>(i) * C_];
      double* idev = &i_dev_[static_cast<size_t>(i) * C_];
      double* fr = &F[static_cast<size_t>(rnode(i, 0))];
      for (int j = 0; j < C_; ++j) idev[j] = dev_.current(ir[j], vr[j] - vc[j]);
      if (C_ == 1) {
        fr[0] = idev[0];
      } else {
        fr[0] = idev[0] + gw_ * (vr[0] - vr[1]);
        for (int j = 1; j + 1 < C_; ++j)
          fr[j] = idev[j] + gw_ * (2.0 * vr[j] - vr[j - 1] - vr[j + 1]);
        fr[C_ - 1] = idev[C_ - 1] + gw_ * (vr[C_ - 1] - vr[C_ - 2]);
      }
    }
    for (int i = 0; i < R_; ++i) {
      const double* vc = &v[static_cast<size_t>(cnode(i, 0))];
      const double* vup = i > 0 ? &v[static_cast<size_t>(cnode(i - 1, 0))] : nullptr;
      const double* vdn = i + 1 < R_ ? &v[static_cast<size_t>(cnode(i + 1, 0))] : nullptr;
      const double* idev = &i_dev_[static_cast<size_t>(i) * C_];
      double* fc = &F[static_cast<size_t>(cnode(i, 0))];
      if (vup && vdn) {
        for (int j = 0; j < C_; ++j)
          fc[j] = -idev[j] + gw_ * (2.0 * vc[j] - vup[j] - vdn[j]);
      } else if (vdn) {
        for (int j = 0; j < C_; ++j) fc[j] = -idev[j] + gw_ * (vc[j] - vdn[j]);
      } else if (vup) {
        for (int j = 0; j < C_; ++j) fc[j] = -idev[j] + gw_ * (vc[j] - vup[j]);
      } else {
        for (int j = 0; j < C_; ++j) fc[j] = -idev[j];
      }
    }
    for (auto [canon, alias] : ties_) {
      F[static_cast<size_t>(canon)] += F[static_cast<size_t>(alias)];
      F[static_cast<size_t>(alias)] = 0.0;
    }
    for (int n = 0; n < N2_; ++n) F[static_cast<size_t>(n)] *= free_[static_cast<size_t>(n)];
  }

  // RHS of the linear system: contributions of fixed voltages, i.e. -F
  // evaluated with free nodes at zero under the current conductances.
  void linear_rhs(std::vector<double>& rhs) {
    std::vector<double> v0(static_cast<size_t>(N2_), 0.0);
    for (int n = 0; n < N2_; ++n)
      if (!free_[static_cast<size_t>(n)]) v0[static_cast<size_t>(n)] = x_[static_cast<size_t>(n)];
    matvec_full(v0, rhs);
    for (auto [canon, alias] : ties_) {
      rhs[static_cast<size_t>(canon)] += rhs[static_cast<size_t>(alias)];
      rhs[static_cast<size_t>(alias)] = 0.0;
    }
    for (int n = 0; n < N2_; ++n)
      rhs[static_cast<size_t>(n)] *= -free_[static_cast<size_t>(n)];
  }

  // y = A_g * p over all slots (no masking); p is read as-is. Same fused
  // two-pass structure as eval_residual with the linearized conductances.
  void matvec_full(const std::vector<double>& p, std::vector<double>& y) {
    y.resize(static_cast<size_t>(N2_));
    for (int i = 0; i < R_; ++i) {
      const double* pr = &p[static_cast<size_t>(rnode(i, 0))];
      const double* pc = &p[static_cast<size_t>(cnode(i, 0))];
      const double* gg = &g_[static_cast<size_t>(i) * C_];
      double* yr = &y[static_cast<size_t>(rnode(i, 0))];
      if (C_ == 1) {
        yr[0] = gg[0] * (pr[0] - pc[0]);
      } else {
        yr[0] = gg[0] * (pr[0] - pc[0]) + gw_ * (pr[0] - pr[1]);
        for (int j = 1; j + 1 < C_; ++j)
          yr[j] = gg[j] * (pr[j] - pc[j]) +
                  gw_ * (2.0 * pr[j] - pr[j - 1] - pr[j + 1]);
        yr[C_ - 1] = gg[C_ - 1] * (pr[C_ - 1] - pc[C_ - 1]) +
                     gw_ * (pr[C_ - 1] - pr[C_ - 2]);
      }
    }
    for (int i = 0; i < R_; ++i) {
      const double* pc = &p[static_cast<size_t>(cnode(i, 0))];
      const double* pr = &p[static_cast<size_t>(rnode(i, 0))];
      const double* pup = i > 0 ? &p[static_cast<size_t>(cnode(i - 1, 0))] : nullptr;
      const double* pdn = i + 1 < R_ ? &p[static_cast<size_t>(cnode(i + 1, 0))] : nullptr;
      const double* gg = &g_[static_cast<size_t>(i) * C_];
      double* yc = &y[static_cast<size_t>(cnode(i, 0))];
      if (pup && pdn) {
        for (int j = 0; j < C_; ++j)
          yc[j] = gg[j] * (pc[j] - pr[j]) +
                  gw_ * (2.0 * pc[j] - pup[j] - pdn[j]);
      } else if (pdn) {
        for (int j = 0; j < C_; ++j)
          yc[j] = gg[j] * (pc[j] - pr[j]) + gw_ * (pc[j] - pdn[j]);
      } else if (pup) {
        for (int j = 0; j < C_; ++j)
          yc[j] = gg[j] * (pc[j] - pr[j]) + gw_ * (pc[j] - pup[j]);
      } else {
        for (int j = 0; j < C_; ++j) yc[j] = gg[j] * (pc[j] - pr[j]);
      }
    }
  }

  // Masked matvec over free dofs; folds alias slots.
  void matvec(std::vector<double>& p, std::vector<double>& y) {
    sync_aliases(p);
    matvec_full(p, y);
    for (auto [canon, alias] : ties_) {
      y[static_cast<size_t>(canon)] += y[static_cast<size_t>(alias)];
      y[static_cast<size_t>(alias)] = 0.0;
      p[static_cast<size_t>(alias)] = 0.0;
    }
    for (int n = 0; n < N2_; ++n) y[static_cast<size_t>(n)] *= free_[static_cast<size_t>(n)];
  }

  // ---- two-grid preconditioner -------------------------------------------

  void build_precond() {
#ifdef FPCA_SOLVER_STATS
    const auto tstart = std::chrono::steady_clock::now();
    struct Guard {
      std::chrono::steady_clock::time_point t0;
      ~Guard() {
        precond_build_ms += std::chrono::duration<double, std::milli>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
      }
    } guard{tstart};
#endif
    const bool rebuild_coarse =
        precond_builds_ < 2 || last_pcg_iters_ > 32;
    ++precond_builds_;
    inv_denom_.assign(static_cast<size_t>(N2_), 0.0);
    wpos_.assign(static_cast<size_t>(N2_), 0.0);
    // Row lines: Thomas factorization left to right; fixed slots keep
    // inv_denom = 0, which both starts a fresh segment and zeroes their dof.
    for (int i = 0; i < R_; ++i) {
      for (int j = 0; j < C_; ++j) {
        const int n = rnode(i, j);
        if (!free_[static_cast<size_t>(n)]) continue;
        const double deg = static_cast<double>((j > 0) + (j + 1 < C_));
        const double diag = gw_ * deg + g_[static_cast<size_t>(i * C_ + j)] + kGmin;
        const double prev_w = j > 0 ? wpos_[static_cast<size_t>(n - 1)] : 0.0;
        const double denom = diag - gw_ * prev_w;
        inv_denom_[static_cast<size_t>(n)] = 1.0 / denom;
        wpos_[static_cast<size_t>(n)] = gw_ / denom;
      }
    }
    // Column lines: same recurrence along i, vectorizable across j.
    for (int i = 0; i < R_; ++i) {
      const double deg = static_cast<double>((i > 0) + (i + 1 < R_));
      for (int j = 0; j < C_; ++j) {
        const int n = cnode(i, j);
        if (!free_[static_cast<size_t>(n)]) continue;
        const double diag = gw_ * deg + g_[static_cast<size_t>(i * C_ + j)] + kGmin;
        const double prev_w = i > 0 ? wpos_[static_cast<size_t>(cnode(i - 1, j))] : 0.0;
        const double denom = diag - gw_ * prev_w;
        inv_denom_[static_cast<size_t>(n)] = 1.0 / denom;
        wpos_[static_cast<size_t>(n)] = gw_ / denom;
      }
    }

    // Coarse operator: Galerkin restriction to one dof per line. Frozen
    // after the first Newton build (the smoother refactors every step, the
    // dense Schur factorization is the expensive part); refreshed if CG
    // convergence degrades. A stale SPD coarse operator keeps CG valid.
    if (!rebuild_coarse) return;
    Dr_.assign(static_cast<size_t>(R_), 0.0);
    Dc_.assign(static_cast<size_t>(C_), 0.0);
    Bc_ = Eigen::MatrixXd::Zero(R_, C_);
    for (int i = 0; i < R_; ++i)
      for (int j = 0; j < C_; ++j) {
        const double g = g_[static_cast<size_t>(i * C_ + j)];
        const bool rf = free_[static_cast<size_t>(rnode(i, j))] != 0.0;
        const bool cf = free_[static_cast<size_t>(cnode(i, j))] != 0.0;
        if (rf) Dr_[static_cast<size_t>(i)] += g;
        if (cf) Dc_[static_cast<size_t>(j)] += g;
        if (rf && cf) Bc_(i, j) += g;
      }
    for (int i = 0; i < R_; ++i) {
      if (C_ > 1 && !free_[static_cast<size_t>(rnode(i, 0))]) Dr_[static_cast<size_t>(i)] += gw_;
      Dr_[static_cast<size_t>(i)] += kGmin * C_;
    }
    for (int j = 0; j < C_; ++j) {
      if (R_ > 1 && !free_[static_cast<size_t>(cnode(R_ - 1, j))]) Dc_[static_cast<size_t>(j)] += gw_;
      Dc_[static_cast<size_t>(j)] += kGmin * R_;
    }
    Eigen::MatrixXd Bs = Bc_;
    for (int i = 0; i < R_; ++i)
      Bs.row(i) /= std::sqrt(Dr_[static_cast<size_t>(i)]);
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(C_, C_);
    S.selfadjointView<Eigen::Lower>().rankUpdate(Bs.transpose(), -1.0);
    for (int j = 0; j < C_; ++j) S(j, j) += Dc_[static_cast<size_t>(j)];
    coarse_llt_.compute(S.selfadjointView<Eigen::Lower>());
    if (coarse_llt_.info() != Eigen::Success)
      throw NonConvergence("coarse factorization failed");
  }

  void apply_smoother(const std::vector<double>& r, std::vector<double>& z) {
    z.resize(static_cast<size_t>(N2_));  // every slot is written below
    // Row lines, forward then backward.
    for (int i = 0; i < R_; ++i) {
      double* zz = &z[static_cast<size_t>(rnode(i, 0))];
      const double* rr = &r[static_cast<size_t>(rnode(i, 0))];
      const double* idn = &inv_denom_[static_cast<size_t>(rnode(i, 0))];
      double prev = 0.0;
      for (int j = 0; j < C_; ++j) {
        prev = (rr[j] + gw_ * prev) * idn[j];
        zz[j] = prev;
      }
      double next = 0.0;
      const double* wp = &wpos_[static_cast<size_t>(rnode(i, 0))];
      for (int j = C_ - 1; j >= 0; --j) {
        next = zz[j] + wp[j] * next;
        zz[j] = next;
      }
    }
    // Column lines, sweeping i with all j in flight.
    for (int i = 0; i < R_; ++i) {
      double* zi = &z[static_cast<size_t>(cnode(i, 0))];
      const double* ri = &r[static_cast<size_t>(cnode(i, 0))];
      const double* idn = &inv_denom_[static_cast<size_t>(cnode(i, 0))];
      const double* zprev = i > 0 ? &z[static_cast<size_t>(cnode(i - 1, 0))] : nullptr;
      for (int j = 0; j < C_; ++j)
        zi[j] = (ri[j] + (zprev ? gw_ * zprev[j] : 0.0)) * idn[j];
    }
    for (int i = R_ - 2; i >= 0; --i) {
      double* zi = &z[static_cast<size_t>(cnode(i, 0))];
      const double* znext = &z[static_cast<size_t>(cnode(i + 1, 0))];
      const double* wp = &wpos_[static_cast<size_t>(cnode(i, 0))];
      for (int j = 0; j < C_; ++j) zi[j] += wp[j] * znext[j];
    }
  }

  void apply_coarse(const std::vector<double>& r, std::vector<double>& z) {
    Eigen::VectorXd rr = Eigen::VectorXd::Zero(R_), rc = Eigen::VectorXd::Zero(C_);
    for (int i = 0; i < R_; ++i) {
      const double* ri = &r[static_cast<size_t>(rnode(i, 0))];
      double s = 0.0;
      for (int j = 0; j < C_; ++j) s += ri[j];
      rr[i] = s;  // fixed slots carry zero already
    }
    for (int i = 0; i < R_; ++i) {
      const double* ri = &r[static_cast<size_t>(cnode(i, 0))];
      for (int j = 0; j < C_; ++j) rc[j] += ri[j];
    }
    Eigen::VectorXd rr_scaled(R_);
    for (int i = 0; i < R_; ++i) rr_scaled[i] = rr[i] / Dr_[static_cast<size_t>(i)];
    Eigen::VectorXd t = rc + Bc_.transpose() * rr_scaled;
    Eigen::VectorXd yc = coarse_llt_.solve(t);
    Eigen::VectorXd yr = Bc_ * yc;
    for (int i = 0; i < R_; ++i) yr[i] = (rr[i] + yr[i]) / Dr_[static_cast<size_t>(i)];
    for (int i = 0; i < R_; ++i) {
      double* zi = &z[static_cast<size_t>(rnode(i, 0))];
      const double add = yr[i];
      const double* fm = &free_[static_cast<size_t>(rnode(i, 0))];
      for (int j = 0; j < C_; ++j) zi[j] += add * fm[j];
    }
    for (int i = 0; i < R_; ++i) {
      double* zi = &z[static_cast<size_t>(cnode(i, 0))];
      const double* fm = &free_[static_cast<size_t>(cnode(i, 0))];
      for (int j = 0; j < C_; ++j) zi[j] += yc[j] * fm[j];
    }
  }

  // Symmetric V(1,1): smooth, coarse-correct, smooth.
  void precond(const std::vector<double>& r, std::vector<double>& z) {
    apply_smoother(r, z);
    for (int n = 0; n < N2_; ++n) z[static_cast<size_t>(n)] *= free_[static_cast<size_t>(n)];
    matvec(z, t1_);
    for (int n = 0; n < N2_; ++n)
      t2_[static_cast<size_t>(n)] = r[static_cast<size_t>(n)] - t1_[static_cast<size_t>(n)];
    apply_coarse(t2_, z);
    matvec(z, t1_);
    for (int n = 0; n < N2_; ++n)
      t2_[static_cast<size_t>(n)] = r[static_cast<size_t>(n)] - t1_[static_cast<size_t>(n)];
    apply_smoother(t2_, t3_);
    for (int n = 0; n < N2_; ++n)
      z[static_cast<size_t>(n)] =
          (z[static_cast<size_t>(n)] + t3_[static_cast<size_t>(n)]) * free_[static_cast<size_t>(n)];
  }

  // Four-lane accumulation: breaks the FP latency chain while keeping a
  // fixed, reproducible summation order.
  static double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    const size_t n = a.size();
    size_t k = 0;
    for (; k + 4 <= n; k += 4) {
      s0 += a[k] * b[k];
      s1 += a[k + 1] * b[k + 1];
      s2 += a[k + 2] * b[k + 2];
      s3 += a[k + 3] * b[k + 3];
    }
    for (; k < n; ++k) s0 += a[k] * b[k];
    return ((s0 + s1) + (s2 + s3));
  }
  static double norm2(const std::vector<double>& v) { return std::sqrt(dot(v, v)); }

  void solve_linear(const std::vector<double>& b, std::vector<double>& x,
                    double rtol) {
#ifdef FPCA_SOLVER_STATS
    const auto tstart = std::chrono::steady_clock::now();
    struct Guard {
      std::chrono::steady_clock::time_point t0;
      ~Guard() {
        pcg_ms += std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
      }
    } guard{tstart};
#endif
    if (use_direct_) {
      direct_solve(b, x);
      return;
    }
    x.assign(static_cast<size_t>(N2_), 0.0);
    r_ = b;
    const double bnorm = norm2(b);
    if (bnorm == 0.0) return;
    const double target = rtol * bnorm;
    t1_.assign(static_cast<size_t>(N2_), 0.0);
    t2_.assign(static_cast<size_t>(N2_), 0.0);
    t3_.assign(static_cast<size_t>(N2_), 0.0);
    precond(r_, z_);
    p_ = z_;
    double rz = dot(r_, z_);
    for (int it = 0; it < 800; ++it) {
#ifdef FPCA_SOLVER_STATS
      ++pcg_iters_total;
#endif
      matvec(p_, ap_);
      const double alpha = rz / dot(p_, ap_);
      // Fused update of x, r and |r|^2 in one pass.
      double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      {
        double* xv = x.data();
        double* rv = r_.data();
        const double* pv = p_.data();
        const double* av = ap_.data();
        int n = 0;
        for (; n + 4 <= N2_; n += 4) {
          xv[n] += alpha * pv[n];
          xv[n + 1] += alpha * pv[n + 1];
          xv[n + 2] += alpha * pv[n + 2];
          xv[n + 3] += alpha * pv[n + 3];
          rv[n] -= alpha * av[n];
          rv[n + 1] -= alpha * av[n + 1];
          rv[n + 2] -= alpha * av[n + 2];
          rv[n + 3] -= alpha * av[n + 3];
          s0 += rv[n] * rv[n];
          s1 += rv[n + 1] * rv[n + 1];
          s2 += rv[n + 2] * rv[n + 2];
          s3 += rv[n + 3] * rv[n + 3];
        }
        for (; n < N2_; ++n) {
          xv[n] += alpha * pv[n];
          rv[n] -= alpha * av[n];
          s0 += rv[n] * rv[n];
        }
      }
      if (std::sqrt((s0 + s1) + (s2 + s3)) <= target) {
        last_pcg_iters_ = it + 1;
        return;
      }
      precond(r_, z_);
      const double rz_new = dot(r_, z_);
      const double beta = rz_new / rz;
      rz = rz_new;
      for (int n = 0; n < N2_; ++n)
        p_[static_cast<size_t>(n)] = z_[static_cast<size_t>(n)] + beta * p_[static_cast<size_t>(n)];
    }
    throw NonConvergence("inner CG stalled");
  }

  // ---- direct fallback (small systems and terminal ties) ------------------

  void build_direct() {
    free_index_.assign(static_cast<size_t>(N2_), -1);
    free_nodes_.clear();
    for (int n = 0; n < N2_; ++n)
      if (free_[static_cast<size_t>(n)] != 0.0) {
        free_index_[static_cast<size_t>(n)] = static_cast<int>(free_nodes_.size());
        free_nodes_.push_back(n);
      }
    const int nf = static_cast<int>(free_nodes_.size());
    std::vector<Eigen::Triplet<double>> trips;
    auto canon_idx = [&](int n) {
      return free_index_[static_cast<size_t>(canon_[static_cast<size_t>(n)])];
    };
    auto add_edge = [&](int na, int nb, double g) {
      const int fa = canon_idx(na), fb = canon_idx(nb);
      if (fa >= 0) trips.emplace_back(fa, fa, g);
      if (fb >= 0) trips.emplace_back(fb, fb, g);
      if (fa >= 0 && fb >= 0 && fa != fb) {
        trips.emplace_back(fa, fb, -g);
        trips.emplace_back(fb, fa, -g);
      }
    };
    for (int i = 0; i < R_; ++i)
      for (int j = 0; j + 1 < C_; ++j) add_edge(rnode(i, j), rnode(i, j + 1), gw_);
    for (int i = 0; i + 1 < R_; ++i)
      for (int j = 0; j < C_; ++j) add_edge(cnode(i, j), cnode(i + 1, j), gw_);
    for (int k = 0; k < NR_; ++k) {
      const int na = k, nb = NR_ + k;
      if (canon_[static_cast<size_t>(na)] == canon_[static_cast<size_t>(nb)]) continue;
      add_edge(na, nb, g_[static_cast<size_t>(k)]);
    }
    for (int f = 0; f < nf; ++f) trips.emplace_back(f, f, kGmin);
    direct_mat_.resize(nf, nf);
    direct_mat_.setFromTriplets(trips.begin(), trips.end());
    direct_ldlt_.compute(direct_mat_);
    if (direct_ldlt_.info() != Eigen::Success)
      throw DegenerateBias("distributed nodal system is singular");
    if (!opt_.dump_nodal_csv.empty() && !dumped_) {
      Eigen::VectorXd rhs = Eigen::VectorXd::Zero(nf);
      dump_system_csv(opt_.dump_nodal_csv, trips, rhs);
      dumped_ = true;
    }
  }

  void direct_solve(const std::vector<double>& b, std::vector<double>& x) {
    const int nf = static_cast<int>(free_nodes_.size());
    Eigen::VectorXd rhs(nf);
    for (int f = 0; f < nf; ++f) rhs[f] = b[static_cast<size_t>(free_nodes_[static_cast<size_t>(f)])];
    Eigen::VectorXd sol = direct_ldlt_.solve(rhs);
    if (!sol.allFinite())
      throw DegenerateBias("distributed nodal solve produced non-finite voltages");
    x.assign(static_cast<size_t>(N2_), 0.0);
    for (int f = 0; f < nf; ++f) x[static_cast<size_t>(free_nodes_[static_cast<size_t>(f)])] = sol[f];
    sync_aliases(x);
    for (auto [canon, alias] : ties_) x[static_cast<size_t>(alias)] = x[static_cast<size_t>(canon)];
  }

  // ---- outputs -------------------------------------------------------------

  SolveResult outputs(int newton_iters, double kcl) {
    SolveResult res;
    res.newton_iters = newton_iters;
    res.kcl_residual = kcl;
    // Refresh device currents at the converged point.
    std::vector<double> F;
    eval_residual(x_, F);
    if (a_.params.alpha == 0.0) {
      double m = 0.0;
      for (int n = 0; n < N2_; ++n) m = std::max(m, std::abs(F[static_cast<size_t>(n)]));
      res.kcl_residual = m;
    }
    res.row_line_v.resize(static_cast<size_t>(R_));
    res.col_line_v.resize(static_cast<size_t>(C_));
    res.row_currents.assign(static_cast<size_t>(R_), 0.0);
    res.col_currents.assign(static_cast<size_t>(C_), 0.0);
    for (int i = 0; i < R_; ++i) {
      res.row_line_v[static_cast<size_t>(i)] = x_[static_cast<size_t>(rnode(i, 0))];
      double cur = i_dev_[static_cast<size_t>(i * C_)];
      if (C_ > 1)
        cur += gw_ * (x_[static_cast<size_t>(rnode(i, 0))] - x_[static_cast<size_t>(rnode(i, 1))]);
      res.row_currents[static_cast<size_t>(i)] = cur;
    }
    for (int j = 0; j < C_; ++j) {
      res.col_line_v[static_cast<size_t>(j)] = x_[static_cast<size_t>(cnode(R_ - 1, j))];
      double cur = i_dev_[static_cast<size_t>((R_ - 1) * C_ + j)];
      if (R_ > 1)
        cur += gw_ * (x_[static_cast<size_t>(cnode(R_ - 2, j))] -
                      x_[static_cast<size_t>(cnode(R_ - 1, j))]);
      res.col_currents[static_cast<size_t>(j)] = cur;
    }
    double power = 0.0;
    for (int k = 0; k < NR_; ++k)
      power += (x_[static_cast<size_t>(k)] - x_[static_cast<size_t>(NR_ + k)]) *
               i_dev_[static_cast<size_t>(k)];
    for (int i = 0; i < R_; ++i)
      for (int j = 0; j + 1 < C_; ++j) {
        const double d =
            x_[static_cast<size_t>(rnode(i, j))] - x_[static_cast<size_t>(rnode(i, j + 1))];
        power += gw_ * d * d;
      }
    for (int i = 0; i + 1 < R_; ++i)
      for (int j = 0; j < C_; ++j) {
        const double d =
            x_[static_cast<size_t>(cnode(i, j))] - x_[static_cast<size_t>(cnode(i + 1, j))];
        power += gw_ * d * d;
      }
    res.power = power;
    if (opt_.want_cell_voltages) {
      res.cell_voltages.resize(static_cast<size_t>(NR_));
      for (int k = 0; k < NR_; ++k)
        res.cell_voltages[static_cast<size_t>(k)] =
            x_[static_cast<size_t>(k)] - x_[static_cast<size_t>(NR_ + k)];
    }
    return res;
  }

  const CrossbarArray& a_;
  const BiasScheme& bias_;
  const SolveOptions& opt_;
  DevFun dev_;
  int R_, C_, NR_, N2_;
  double gw_;
  double vscale_ = 0.0;
  bool use_direct_ = false;
  bool dumped_ = false;
  int precond_builds_ = 0;
  int last_pcg_iters_ = 0;

  std::vector<int> canon_;
  std::vector<std::pair<int, int>> ties_;  // (canonical, alias)
  std::vector<double> fixed_v_, free_;
  std::vector<double> inv_r_, g_, i_dev_, x_;

  // preconditioner state
  std::vector<double> inv_denom_, wpos_, Dr_, Dc_;
  Eigen::MatrixXd Bc_;
  Eigen::LLT<Eigen::MatrixXd> coarse_llt_;
  std::vector<double> r_, z_, p_, ap_, t1_, t2_, t3_;

  // direct path state
  std::vector<int> free_index_, free_nodes_;
  Eigen::SparseMatrix<double> direct_mat_;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> direct_ldlt_;
};

inline SolveResult solve_distributed(const CrossbarArray& a, const BiasScheme& b,
                                     const SolveOptions& opt) {
  DistributedSystem sys(a, b, opt);
  return sys.run();
}

}  // namespace detail
}  // namespace fpca
