#pragma once

// Sparse convex QP solver:  min ½ vᵀPv + qᵀv  s.t.  Aeq v = beq, Gin v ≤ hin.
// Stationarity convention:  Pv + q + Aeqᵀλ + Ginᵀμ = 0,  μ ≥ 0.
//
// Two layers:
//  * solve_qp — Mehrotra predictor-corrector interior point, the
//    residual-certified entry point.
//  * ParametricQpSolver — re-solves the same (P, Aeq, Gin) under changing
//    (q, beq, hin) via a cached active-set factorization, falling back to
//    the interior point whenever its own optimality checks fail.

#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <vector>

#include "hubmpc/core.hpp"

namespace hubmpc {

enum class QpStatus { optimal, infeasible, iteration_limit };

struct KktResiduals {
  double stationarity = 0.0;
  double primal_eq = 0.0;
  double primal_ineq = 0.0;
  double complementarity = 0.0;
  double max() const {
    return std::max(std::max(stationarity, primal_eq),
                    std::max(primal_ineq, complementarity));
  }
};

struct QpSolution {
  Vec v;
  Vec lambda;
  Vec mu;
  QpStatus status = QpStatus::iteration_limit;
  KktResiduals kkt;
  int iterations = 0;
};

struct QpOptions {
  double tol = 1e-6;
  int max_iter = 400;
  bool probe_infeasibility = true;  // certify non-convergence with an elastic probe
  std::optional<Vec> warm_v;
};

inline double qp_objective(const SpMat& P, const Vec& q, const Vec& v) {
  return 0.5 * v.dot(P * v) + q.dot(v);
}

inline KktResiduals kkt_residuals(const SpMat& P, const Vec& q, const SpMat& Aeq,
                                  const Vec& beq, const SpMat& Gin, const Vec& hin,
                                  const Vec& v, const Vec& lambda, const Vec& mu) {
  KktResiduals r;
  Vec stat = P * v + q;
  if (Aeq.rows() > 0) stat += Aeq.transpose() * lambda;
  if (Gin.rows() > 0) stat += Gin.transpose() * mu;
  r.stationarity = stat.size() ? stat.lpNorm<Eigen::Infinity>() : 0.0;
  if (Aeq.rows() > 0) r.primal_eq = (Aeq * v - beq).lpNorm<Eigen::Infinity>();
  if (Gin.rows() > 0) {
    Vec viol = Gin * v - hin;
    r.primal_ineq = viol.cwiseMax(0.0).lpNorm<Eigen::Infinity>();
    // Scaled per-row product: the raw product would flag boundary dust under
    // a legitimately large multiplier as non-convergence.
    double comp = 0.0;
    for (int i = 0; i < viol.size(); ++i)
      comp = std::max(comp,
                      std::abs(mu(i) * viol(i)) / (1.0 + std::abs(mu(i))));
    r.complementarity = comp;
  }
  return r;
}

namespace detail {

inline void check_p_shape(const SpMat& P, const Vec& q) {
  require(P.rows() == P.cols(), "P must be square");
  require(P.rows() == q.size(), "q size mismatch");
  SpMat diff = SpMat(P.transpose()) - P;
  double scale = 1.0;
  for (int k = 0; k < P.outerSize(); ++k)
    for (SpMat::InnerIterator it(P, k); it; ++it)
      scale = std::max(scale, std::abs(it.value()));
  double asym = 0.0;
  for (int k = 0; k < diff.outerSize(); ++k)
    for (SpMat::InnerIterator it(diff, k); it; ++it)
      asym = std::max(asym, std::abs(it.value()));
  require(asym <= 1e-9 * scale, "P must be symmetric");
  for (int k = 0; k < P.outerSize(); ++k)
    for (SpMat::InnerIterator it(P, k); it; ++it)
      if (it.row() == it.col())
        require(it.value() >= -1e-12 * scale, "P must be positive semidefinite");
  if (P.rows() <= 64) {  // cheap definite screen; big instances rely on the
    Mat dense(P);                                    // curvature probe below
    Eigen::SelfAdjointEigenSolver<Mat> eig(dense);
    require(eig.eigenvalues().minCoeff() >= -1e-8 * scale,
            "P must be positive semidefinite");
  }
}

// Interior-point working storage; rebuilt cheaply per solve.
struct IpmKkt {
  int n, me, mi;
  std::vector<Triplet> base;  // P, A, G blocks (values fixed during a solve)
  SpMat K;
  Eigen::SimplicialLDLT<SpMat> ldlt;
  bool analyzed = false;
  double reg = 1e-10;

  IpmKkt(const SpMat& P, const SpMat& A, const SpMat& G)
      : n(static_cast<int>(P.cols())), me(static_cast<int>(A.rows())),
        mi(static_cast<int>(G.rows())) {
    base.reserve(P.nonZeros() + 2 * A.nonZeros() + 2 * G.nonZeros());
    for (int k = 0; k < P.outerSize(); ++k)
      for (SpMat::InnerIterator it(P, k); it; ++it)
        base.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                          it.value());
    for (int k = 0; k < A.outerSize(); ++k)
      for (SpMat::InnerIterator it(A, k); it; ++it) {
        base.emplace_back(n + static_cast<int>(it.row()), static_cast<int>(it.col()),
                          it.value());
        base.emplace_back(static_cast<int>(it.col()), n + static_cast<int>(it.row()),
                          it.value());
      }
    for (int k = 0; k < G.outerSize(); ++k)
      for (SpMat::InnerIterator it(G, k); it; ++it) {
        base.emplace_back(n + me + static_cast<int>(it.row()),
                          static_cast<int>(it.col()), it.value());
        base.emplace_back(static_cast<int>(it.col()),
                          n + me + static_cast<int>(it.row()), it.value());
      }
  }

  // D = diag weights for the inequality block (s/mu), must be > 0.
  bool factorize(const Vec& d) {
    const int dim = n + me + mi;
    std::vector<Triplet> trip = base;
    for (int i = 0; i < n; ++i) trip.emplace_back(i, i, reg);
    for (int i = 0; i < me; ++i) trip.emplace_back(n + i, n + i, -reg);
    for (int i = 0; i < mi; ++i)
      trip.emplace_back(n + me + i, n + me + i, -d(i) - reg);
    K.resize(dim, dim);
    K.setFromTriplets(trip.begin(), trip.end());
    if (!analyzed) {
      ldlt.analyzePattern(K);
      analyzed = true;
    }
    ldlt.factorize(K);
    return ldlt.info() == Eigen::Success;
  }

  // Solve against the unregularized KKT by iterative refinement.
  Vec solve(const Vec& rhs) const {
    Vec regs(n + me + mi);
    regs.head(n).setConstant(reg);
    regs.segment(n, me).setConstant(-reg);
    regs.tail(mi).setConstant(-reg);
    Vec x = ldlt.solve(rhs);
    for (int round = 0; round < 3; ++round) {
      Vec r = rhs - K * x + regs.cwiseProduct(x);
      if (r.lpNorm<Eigen::Infinity>() <= 1e-11 * (1.0 + rhs.lpNorm<Eigen::Infinity>()))
        break;
      x += ldlt.solve(r);
    }
    return x;
  }
};

inline double step_to_boundary(const Vec& x, const Vec& dx) {
  double alpha = 1.0;
  for (int i = 0; i < x.size(); ++i)
    if (dx(i) < 0.0) alpha = std::min(alpha, -x(i) / dx(i));
  return alpha;
}

// One equality-KKT solve on the identified active set; replaces the
// interior-point answer only when it verifiably improves the residuals.
inline void polish(const SpMat& P, const Vec& q, const SpMat& A, const Vec& b,
                   const SpMat& G, const Vec& h, QpSolution& sol) {
  const int n = static_cast<int>(P.cols());
  const int me = static_cast<int>(A.rows());
  const int mi = static_cast<int>(G.rows());
  std::vector<int> active;
  if (mi > 0) {
    Vec slack = h - G * sol.v;
    for (int i = 0; i < mi; ++i)
      if (sol.mu(i) > slack(i)) active.push_back(i);
  }
  const int nw = static_cast<int>(active.size());
  const int dim = n + me + nw;
  Eigen::SparseMatrix<double, Eigen::RowMajor> g_rows(G);
  std::vector<Triplet> trip;
  for (int k = 0; k < P.outerSize(); ++k)
    for (SpMat::InnerIterator it(P, k); it; ++it)
      trip.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                        it.value());
  for (int k = 0; k < A.outerSize(); ++k)
    for (SpMat::InnerIterator it(A, k); it; ++it) {
      trip.emplace_back(n + static_cast<int>(it.row()), static_cast<int>(it.col()),
                        it.value());
      trip.emplace_back(static_cast<int>(it.col()), n + static_cast<int>(it.row()),
                        it.value());
    }
  for (int w = 0; w < nw; ++w)
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator
             it(g_rows, active[w]);
         it; ++it) {
      trip.emplace_back(n + me + w, static_cast<int>(it.col()), it.value());
      trip.emplace_back(static_cast<int>(it.col()), n + me + w, it.value());
    }
  const double reg = 1e-11;
  for (int i = 0; i < n; ++i) trip.emplace_back(i, i, reg);
  for (int i = 0; i < me + nw; ++i) trip.emplace_back(n + i, n + i, -reg);
  SpMat K(dim, dim);
  K.setFromTriplets(trip.begin(), trip.end());
  Eigen::SimplicialLDLT<SpMat> ldlt(K);
  if (ldlt.info() != Eigen::Success) return;
  Vec rhs(dim);
  rhs.head(n) = -q;
  rhs.segment(n, me) = b;
  for (int w = 0; w < nw; ++w) rhs(n + me + w) = h(active[w]);
  Vec x = ldlt.solve(rhs);
  for (int round = 0; round < 2; ++round) {
    Vec r = rhs - K * x;
    if (r.lpNorm<Eigen::Infinity>() <= 1e-12 * (1.0 + rhs.lpNorm<Eigen::Infinity>()))
      break;
    x += ldlt.solve(r);
  }
  if ((rhs - K * x).lpNorm<Eigen::Infinity>() >
      1e-8 * (1.0 + rhs.lpNorm<Eigen::Infinity>()))
    return;  // dependent active rows; keep the interior-point answer
  QpSolution cand;
  cand.v = x.head(n);
  cand.lambda = x.segment(n, me);
  cand.mu = Vec::Zero(mi);
  for (int w = 0; w < nw; ++w) cand.mu(active[w]) = std::max(0.0, x(n + me + w));
  cand.kkt = kkt_residuals(P, q, A, b, G, h, cand.v, cand.lambda, cand.mu);
  if (cand.kkt.max() < sol.kkt.max()) {
    cand.status = QpStatus::optimal;
    cand.iterations = sol.iterations;
    sol = cand;
  }
}

QpSolution ipm_solve(const SpMat& P, const Vec& q, const SpMat& A, const Vec& b,
                     const SpMat& G, const Vec& h, const QpOptions& opt);

// L1 elastic feasibility measure: 0 (to tolerance) iff the constraint
// system admits a point. Used to turn "did not converge" into a certified
// infeasible status.
inline double feasibility_probe(const SpMat& A, const Vec& b, const SpMat& G,
                                const Vec& h) {
  const int n = static_cast<int>(std::max(A.cols(), G.cols()));
  const int me = static_cast<int>(A.rows());
  const int mi = static_cast<int>(G.rows());
  const int nt = 2 * me + mi;  // t+, t-, t_g
  std::vector<Triplet> ptrip, atrip, gtrip;
  for (int i = 0; i < n; ++i) ptrip.emplace_back(i, i, 1e-8);
  SpMat Pp(n + nt, n + nt);
  Pp.setFromTriplets(ptrip.begin(), ptrip.end());
  Vec qp = Vec::Zero(n + nt);
  qp.tail(nt).setOnes();
  for (int k = 0; k < A.outerSize(); ++k)
    for (SpMat::InnerIterator it(A, k); it; ++it)
      atrip.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                         it.value());
  for (int i = 0; i < me; ++i) {
    atrip.emplace_back(i, n + i, 1.0);
    atrip.emplace_back(i, n + me + i, -1.0);
  }
  SpMat Ap(me, n + nt);
  Ap.setFromTriplets(atrip.begin(), atrip.end());
  for (int k = 0; k < G.outerSize(); ++k)
    for (SpMat::InnerIterator it(G, k); it; ++it)
      gtrip.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                         it.value());
  for (int i = 0; i < mi; ++i) gtrip.emplace_back(i, n + 2 * me + i, -1.0);
  for (int i = 0; i < nt; ++i) gtrip.emplace_back(mi + i, n + i, -1.0);
  SpMat Gp(mi + nt, n + nt);
  Gp.setFromTriplets(gtrip.begin(), gtrip.end());
  Vec hp = Vec::Zero(mi + nt);
  hp.head(mi) = h;
  QpOptions popt;
  popt.tol = 1e-8;
  popt.max_iter = 150;
  popt.probe_infeasibility = false;
  QpSolution sol = ipm_solve(Pp, qp, Ap, b, Gp, hp, popt);
  if (sol.status == QpStatus::iteration_limit && sol.kkt.max() > 1e-4)
    return std::numeric_limits<double>::quiet_NaN();
  return sol.v.tail(nt).sum();
}

inline QpSolution ipm_solve(const SpMat& P, const Vec& q, const SpMat& A,
                            const Vec& b, const SpMat& G, const Vec& h,
                            const QpOptions& opt) {
  const int n = static_cast<int>(P.cols());
  const int me = static_cast<int>(A.rows());
  const int mi = static_cast<int>(G.rows());

  // Opposing singleton rows that box a variable onto a single point (a pinned
  // switch leaves its device rows as 0 <= u and u <= 0) admit no strictly
  // feasible slack and stall the central path. Rewrite each such box as an
  // equality, drop the tight rows, and fold the multiplier back afterwards.
  // Contradictory singleton boxes are a certificate of infeasibility.
  if (mi > 0) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<int> rnnz(mi, 0), rcol(mi, -1);
    std::vector<double> rval(mi, 0.0);
    for (int k = 0; k < G.outerSize(); ++k)
      for (SpMat::InnerIterator it(G, k); it; ++it) {
        const int r = static_cast<int>(it.row());
        ++rnnz[r];
        rcol[r] = k;
        rval[r] = it.value();
      }
    std::vector<double> upper(n, inf), lower(n, -inf);
    for (int r = 0; r < mi; ++r) {
      if (rnnz[r] != 1 || rval[r] == 0.0) continue;
      const double bnd = h(r) / rval[r];
      if (rval[r] > 0.0)
        upper[rcol[r]] = std::min(upper[rcol[r]], bnd);
      else
        lower[rcol[r]] = std::max(lower[rcol[r]], bnd);
    }
    std::vector<std::pair<int, double>> fixes;
    for (int c = 0; c < n; ++c) {
      if (upper[c] == inf || lower[c] == -inf) continue;
      const double tol_c = 1e-9 * (1.0 + std::abs(upper[c]) + std::abs(lower[c]));
      if (upper[c] - lower[c] < -tol_c) {
        QpSolution bad;
        bad.v = Vec::Zero(n);
        bad.lambda = Vec::Zero(me);
        bad.mu = Vec::Zero(mi);
        bad.status = QpStatus::infeasible;
        return bad;
      }
      if (upper[c] - lower[c] <= tol_c)
        fixes.emplace_back(c, 0.5 * (upper[c] + lower[c]));
    }
    if (!fixes.empty()) {
      std::vector<int> fix_of_col(n, -1);
      for (int f = 0; f < static_cast<int>(fixes.size()); ++f)
        fix_of_col[fixes[f].first] = f;
      std::vector<int> keep;
      std::vector<int> tight_up(fixes.size(), -1), tight_lo(fixes.size(), -1);
      keep.reserve(mi);
      for (int r = 0; r < mi; ++r) {
        const int f = rnnz[r] == 1 ? fix_of_col[rcol[r]] : -1;
        if (f < 0) {
          keep.push_back(r);
          continue;
        }
        const double val = fixes[f].second;
        const double bnd = h(r) / rval[r];
        if (std::abs(bnd - val) <= 1e-9 * (1.0 + std::abs(val))) {
          (rval[r] > 0.0 ? tight_up[f] : tight_lo[f]) = r;
        } else {
          keep.push_back(r);
        }
      }
      std::vector<Triplet> gt, at;
      for (int k = 0; k < G.outerSize(); ++k)
        for (SpMat::InnerIterator it(G, k); it; ++it) {
          const auto at_row = std::lower_bound(keep.begin(), keep.end(),
                                               static_cast<int>(it.row()));
          if (at_row != keep.end() && *at_row == static_cast<int>(it.row()))
            gt.emplace_back(static_cast<int>(at_row - keep.begin()), k, it.value());
        }
      SpMat G2(static_cast<int>(keep.size()), n);
      G2.setFromTriplets(gt.begin(), gt.end());
      Vec h2(keep.size());
      for (size_t r = 0; r < keep.size(); ++r) h2(r) = h(keep[r]);
      for (int k = 0; k < A.outerSize(); ++k)
        for (SpMat::InnerIterator it(A, k); it; ++it)
          at.emplace_back(static_cast<int>(it.row()), k, it.value());
      for (int f = 0; f < static_cast<int>(fixes.size()); ++f)
        at.emplace_back(me + f, fixes[f].first, 1.0);
      SpMat A2(me + static_cast<int>(fixes.size()), n);
      A2.setFromTriplets(at.begin(), at.end());
      Vec b2(me + fixes.size());
      b2.head(me) = b;
      for (int f = 0; f < static_cast<int>(fixes.size()); ++f) b2(me + f) = fixes[f].second;

      QpSolution red = ipm_solve(P, q, A2, b2, G2, h2, opt);
      QpSolution full;
      full.status = red.status;
      full.iterations = red.iterations;
      full.v = red.v;
      full.lambda = red.lambda.size() >= me ? Vec(red.lambda.head(me)) : Vec::Zero(me);
      full.mu = Vec::Zero(mi);
      if (red.mu.size() == static_cast<int>(keep.size()))
        for (size_t r = 0; r < keep.size(); ++r) full.mu(keep[r]) = red.mu(r);
      for (int f = 0; f < static_cast<int>(fixes.size()); ++f) {
        if (red.lambda.size() != me + static_cast<int>(fixes.size())) break;
        const double lam = red.lambda(me + f);
        if (lam >= 0.0 && tight_up[f] >= 0)
          full.mu(tight_up[f]) = lam / rval[tight_up[f]];
        else if (lam < 0.0 && tight_lo[f] >= 0)
          full.mu(tight_lo[f]) = lam / rval[tight_lo[f]];
      }
      if (full.v.size() == n) {
        full.kkt = kkt_residuals(P, q, A, b, G, h, full.v, full.lambda, full.mu);
        if (full.status == QpStatus::optimal) polish(P, q, A, b, G, h, full);
      }
      return full;
    }
  }

  QpSolution out;
  Vec v = opt.warm_v && opt.warm_v->size() == n ? *opt.warm_v : Vec::Zero(n);
  Vec lambda = Vec::Zero(me);
  Vec mu = Vec::Constant(mi, 1.0);
  Vec s(mi);
  if (mi > 0) s = (h - G * v).cwiseMax(1.0);

  IpmKkt kkt(P, A, G);

  // Mehrotra starting point: one KKT solve with unit slack weights, then a
  // uniform shift into the positive orthant. A cold start from the origin
  // blows up the duals whenever many softened rows sit active at once.
  if (mi > 0 && !(opt.warm_v && opt.warm_v->size() == n) &&
      kkt.factorize(Vec::Ones(mi))) {
    Vec rhs(n + me + mi);
    rhs.head(n) = -q;
    rhs.segment(n, me) = b;
    rhs.tail(mi) = h;
    Vec x = kkt.solve(rhs);
    Vec s_raw = -x.tail(mi);
    Vec mu_raw = x.tail(mi);
    const double dp = std::max(0.0, -1.5 * s_raw.minCoeff());
    const double dd = std::max(0.0, -1.5 * mu_raw.minCoeff());
    Vec s1 = s_raw.array() + dp;
    Vec m1 = mu_raw.array() + dd;
    const double dot = s1.dot(m1);
    const double dp2 = dp + 0.5 * dot / std::max(m1.sum(), 1e-12);
    const double dd2 = dd + 0.5 * dot / std::max(s1.sum(), 1e-12);
    v = x.head(n);
    lambda = x.segment(n, me);
    s = (s_raw.array() + dp2).cwiseMax(1e-4);
    mu = (mu_raw.array() + dd2).cwiseMax(1e-4);
  }
  QpSolution best;
  double best_score = std::numeric_limits<double>::infinity();
  int best_iter = 0;

  auto record = [&](int iter) {
    KktResiduals res = kkt_residuals(P, q, A, b, G, h, v, lambda, mu);
    double score = res.max();
#ifdef HUBMPC_IPM_TRACE
    std::fprintf(stderr, "[ipm %d] st %.3e eq %.3e in %.3e comp %.3e\n", iter,
                 res.stationarity, res.primal_eq, res.primal_ineq,
                 res.complementarity);
#endif
    if (score < best_score) {
      best_score = score;
      best.v = v;
      best.lambda = lambda;
      best.mu = mu;
      best.kkt = res;
      best_iter = iter;
    }
    return res;
  };

  for (int iter = 0; iter < opt.max_iter; ++iter) {
    out.iterations = iter;
    KktResiduals res = record(iter);
    if (res.max() <= opt.tol) {
      out = best;
      out.iterations = iter;
      out.status = QpStatus::optimal;
      polish(P, q, A, b, G, h, out);
      return out;
    }
    if (iter - best_iter > 40) break;  // stalled

    Vec r_d = P * v + q;
    if (me > 0) r_d += A.transpose() * lambda;
    if (mi > 0) r_d += G.transpose() * mu;
    Vec r_p = me > 0 ? Vec(A * v - b) : Vec(0);
    Vec r_g = mi > 0 ? Vec(G * v + s - h) : Vec(0);

    Vec d(mi);
    for (int i = 0; i < mi; ++i)
      d(i) = std::clamp(s(i) / mu(i), 1e-12, 1e12);
    bool ok = kkt.factorize(d);
    for (int bump = 0; !ok && bump < 3; ++bump) {
      kkt.reg *= 100.0;
      ok = kkt.factorize(d);
    }
    if (!ok) break;

    auto newton = [&](const Vec& r_comp) {
      Vec rhs(n + me + mi);
      rhs.head(n) = -r_d;
      rhs.segment(n, me) = -r_p;
      for (int i = 0; i < mi; ++i) rhs(n + me + i) = -r_g(i) + r_comp(i) / mu(i);
      return kkt.solve(rhs);
    };

    Vec dv, dl, dmu, ds;
    if (mi == 0) {
      Vec x = newton(Vec(0));
      dv = x.head(n);
      dl = x.segment(n, me);
      double curv = dv.dot(P * dv);
      require(curv >= -1e-8 * (1.0 + dv.squaredNorm()),
              "P must be positive semidefinite");
      v += dv;
      lambda += dl;
      continue;
    }

    // Predictor.
    Vec comp_aff = mu.cwiseProduct(s);
    Vec x_aff = newton(comp_aff);
    Vec dv_aff = x_aff.head(n);
    Vec dmu_aff = x_aff.tail(mi);
    Vec ds_aff(mi);
    for (int i = 0; i < mi; ++i)
      ds_aff(i) = -(comp_aff(i) + s(i) * dmu_aff(i)) / mu(i);
    double curv = dv_aff.dot(P * dv_aff);
    require(curv >= -1e-8 * (1.0 + dv_aff.squaredNorm()),
            "P must be positive semidefinite");

    double a_p = step_to_boundary(s, ds_aff);
    double a_d = step_to_boundary(mu, dmu_aff);
    double mu_mean = comp_aff.sum() / mi;
    double mu_aff = (mu + a_d * dmu_aff).dot(s + a_p * ds_aff) / mi;
    double sigma = std::clamp(std::pow(mu_aff / std::max(mu_mean, 1e-300), 3.0),
                              1e-8, 1.0);

    // Corrector (same factorization).
    Vec comp_cor = comp_aff + dmu_aff.cwiseProduct(ds_aff) -
                   Vec::Constant(mi, sigma * mu_mean);
    Vec x = newton(comp_cor);
    dv = x.head(n);
    dl = x.segment(n, me);
    dmu = x.tail(mi);
    ds.resize(mi);
    for (int i = 0; i < mi; ++i) ds(i) = -(comp_cor(i) + s(i) * dmu(i)) / mu(i);

    a_p = std::min(1.0, 0.995 * step_to_boundary(s, ds));
    a_d = std::min(1.0, 0.995 * step_to_boundary(mu, dmu));
    v += a_p * dv;
    s += a_p * ds;
    lambda += a_d * dl;
    mu += a_d * dmu;
  }

  out = best;
  if (out.kkt.max() <= opt.tol) {
    out.status = QpStatus::optimal;
    polish(P, q, A, b, G, h, out);
    return out;
  }
  if (opt.probe_infeasibility && (me > 0 || mi > 0)) {
    double gap = feasibility_probe(A, b, G, h);
    double scale = 1.0;
    if (me > 0) scale += b.lpNorm<Eigen::Infinity>();
    if (mi > 0) scale += h.lpNorm<Eigen::Infinity>();
    if (std::isfinite(gap) && gap > 1e-5 * scale) {
      out.status = QpStatus::infeasible;
      return out;
    }
  }
  out.status = QpStatus::iteration_limit;
  return out;
}

inline QpSolution crossover_rescue(const SpMat& P, const Vec& q, const SpMat& A,
                                   const Vec& b, const SpMat& G, const Vec& h,
                                   const QpSolution& stalled, const QpOptions& opt);

}  // namespace detail

inline QpSolution solve_qp(const SpMat& P, const Vec& q, const SpMat& Aeq,
                           const Vec& beq, const SpMat& Gin, const Vec& hin,
                           const QpOptions& opt = {}) {
  detail::check_p_shape(P, q);
  require(Aeq.rows() == beq.size(), "beq size mismatch");
  require(Gin.rows() == hin.size(), "hin size mismatch");
  require(Aeq.rows() == 0 || Aeq.cols() == P.cols(), "Aeq width mismatch");
  require(Gin.rows() == 0 || Gin.cols() == P.cols(), "Gin width mismatch");
  QpSolution sol = detail::ipm_solve(P, q, Aeq, beq, Gin, hin, opt);
  // A run that circled the optimum without certifying carries a nearly
  // correct active set; pivoting from it usually lands exactly.
  if (sol.status == QpStatus::iteration_limit && sol.v.size() == P.cols() &&
      sol.kkt.max() <= 1e-3)
    return detail::crossover_rescue(P, q, Aeq, beq, Gin, hin, sol, opt);
  return sol;
}

inline QpSolution solve_qp(const Mat& P, const Vec& q, const Mat& Aeq,
                           const Vec& beq, const Mat& Gin, const Vec& hin,
                           const QpOptions& opt = {}) {
  return solve_qp(SpMat(P.sparseView()), q, SpMat(Aeq.sparseView()), beq,
                  SpMat(Gin.sparseView()), hin, opt);
}

// Repeated solves of one problem family under changing (q, beq, hin): keeps
// the optimal active set and its factorization between calls, so a solve
// whose active set is unchanged costs only triangular substitutions.
class ParametricQpSolver {
 public:
  ParametricQpSolver() = default;

  ParametricQpSolver(SpMat P, SpMat A, SpMat G)
      : p_(std::move(P)), a_(std::move(A)), g_(std::move(G)),
        g_rows_(g_), n_(static_cast<int>(p_.cols())),
        me_(static_cast<int>(a_.rows())), mi_(static_cast<int>(g_.rows())) {
    detail::check_p_shape(p_, Vec::Zero(n_));
  }

  void set_values(const SpMat& P, const SpMat& A, const SpMat& G) {
    require(P.cols() == n_ && A.rows() == me_ && G.rows() == mi_,
            "set_values must preserve dimensions");
    p_ = P;
    a_ = A;
    g_ = G;
    g_rows_ = g_;
    factor_.reset();
    have_set_ = false;  // values changed; rebuild from a fresh cold solve
  }

  int n() const { return n_; }
  int last_pivots() const { return last_pivots_; }
  bool last_used_fallback() const { return last_fallback_; }

  QpSolution solve(const Vec& q, const Vec& b, const Vec& h, const QpOptions& opt = {}) {
    last_pivots_ = 0;
    last_fallback_ = false;
    if (!have_set_) return cold_start(q, b, h, opt);
    QpSolution sol;
    if (pivot_loop(q, b, h, opt, sol)) return sol;
    return cold_start(q, b, h, opt);
  }

  // Pivots to optimality from an externally produced near-optimal iterate;
  // returns the seed unchanged when certification fails.
  QpSolution finish(const Vec& q, const Vec& b, const Vec& h,
                    const QpSolution& seed, const QpOptions& opt = {}) {
    last_pivots_ = 0;
    last_fallback_ = false;
    QpSolution out;
    if (seed_pivot(seed, q, b, h, opt, out)) return out;
    return seed;
  }

 private:
  QpSolution cold_start(const Vec& q, const Vec& b, const Vec& h,
                        const QpOptions& opt) {
    last_fallback_ = have_set_;
    QpOptions cold = opt;
    if (last_.size() == n_) cold.warm_v = last_;
    QpSolution sol = solve_qp(p_, q, a_, b, g_, h, cold);
    if (sol.status != QpStatus::optimal) {
      have_set_ = false;
      return sol;
    }
    QpSolution polished;
    if (seed_pivot(sol, q, b, h, opt, polished)) return polished;
    return sol;  // keep the certified interior-point answer
  }

  bool seed_pivot(const QpSolution& seed, const Vec& q, const Vec& b, const Vec& h,
                  const QpOptions& opt, QpSolution& out) {
    if (seed.v.size() != n_ || seed.mu.size() != mi_) return false;
    active_.clear();
    if (mi_ > 0) {
      Vec slack = h - g_ * seed.v;
      for (int i = 0; i < mi_; ++i)
        if (seed.mu(i) > slack(i)) active_.push_back(i);
    }
    factor_.reset();
    have_set_ = true;
    if (pivot_loop(q, b, h, opt, out)) return true;
    have_set_ = false;
    return false;
  }

  bool refactor() {
    const int nw = static_cast<int>(active_.size());
    const int dim = n_ + me_ + nw;
    std::vector<Triplet> trip;
    trip.reserve(p_.nonZeros() + 2 * a_.nonZeros() + 8 * nw + dim);
    for (int k = 0; k < p_.outerSize(); ++k)
      for (SpMat::InnerIterator it(p_, k); it; ++it)
        trip.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                          it.value());
    for (int k = 0; k < a_.outerSize(); ++k)
      for (SpMat::InnerIterator it(a_, k); it; ++it) {
        trip.emplace_back(n_ + static_cast<int>(it.row()),
                          static_cast<int>(it.col()), it.value());
        trip.emplace_back(static_cast<int>(it.col()),
                          n_ + static_cast<int>(it.row()), it.value());
      }
    for (int w = 0; w < nw; ++w)
      for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator
               it(g_rows_, active_[w]);
           it; ++it) {
        trip.emplace_back(n_ + me_ + w, static_cast<int>(it.col()), it.value());
        trip.emplace_back(static_cast<int>(it.col()), n_ + me_ + w, it.value());
      }
    const double reg = 1e-10;
    for (int i = 0; i < n_; ++i) trip.emplace_back(i, i, reg);
    for (int i = 0; i < me_ + nw; ++i) trip.emplace_back(n_ + i, n_ + i, -reg);
    kkt_.resize(dim, dim);
    kkt_.setFromTriplets(trip.begin(), trip.end());
    factor_ = std::make_unique<Eigen::SimplicialLDLT<SpMat>>();
    factor_->compute(kkt_);
    return factor_->info() == Eigen::Success;
  }

  // Returns true and fills `sol` when the active-set iteration certifies
  // optimality; false requests an interior-point fallback.
  bool pivot_loop(const Vec& q, const Vec& b, const Vec& h, const QpOptions& opt,
                  QpSolution& sol) {
    const double feas_tol = 1e-9 * (1.0 + (mi_ ? h.lpNorm<Eigen::Infinity>() : 0.0));
    const int max_pivots = 30 + 2 * mi_;
    std::set<std::vector<int>> seen;
    int last_added = -1;
    for (int pivot = 0; pivot <= max_pivots; ++pivot) {
      if (!factor_ && !refactor()) {
        if (last_added >= 0) {  // singular working set: undo the last add
          drop(last_added);
          last_added = -1;
          if (!refactor()) return false;
        } else {
          return false;
        }
      }
      const int nw = static_cast<int>(active_.size());
      Vec rhs(n_ + me_ + nw);
      rhs.head(n_) = -q;
      rhs.segment(n_, me_) = b;
      for (int w = 0; w < nw; ++w) rhs(n_ + me_ + w) = h(active_[w]);
      Vec x = factor_->solve(rhs);
      for (int round = 0; round < 2; ++round) {
        Vec r = rhs - kkt_ * x;
        if (r.lpNorm<Eigen::Infinity>() <= 1e-11 * (1.0 + rhs.lpNorm<Eigen::Infinity>()))
          break;
        x += factor_->solve(r);
      }
      Vec lin_res = rhs - kkt_ * x;
      if (lin_res.lpNorm<Eigen::Infinity>() >
          1e-7 * (1.0 + rhs.lpNorm<Eigen::Infinity>())) {
        if (last_added >= 0) {
          drop(last_added);
          last_added = -1;
          continue;
        }
        return false;
      }

      Vec v = x.head(n_);
      Vec mu_w = x.tail(nw);
      int add = -1, remove = -1;
      double worst_viol = feas_tol, worst_dual = -feas_tol;
      if (mi_ > 0) {
        Vec slack = h - g_ * v;
        std::vector<char> in_set(mi_, 0);
        for (int i : active_) in_set[i] = 1;
        for (int i = 0; i < mi_; ++i)
          if (!in_set[i] && -slack(i) > worst_viol) {
            worst_viol = -slack(i);
            add = i;
          }
        for (int w = 0; w < nw; ++w)
          if (mu_w(w) < worst_dual) {
            worst_dual = mu_w(w);
            remove = active_[w];
          }
      }
      if (add < 0 && remove < 0) {
        sol.v = v;
        sol.lambda = x.segment(n_, me_);
        sol.mu = Vec::Zero(mi_);
        for (int w = 0; w < nw; ++w) sol.mu(active_[w]) = std::max(0.0, mu_w(w));
        sol.kkt = kkt_residuals(p_, q, a_, b, g_, h, sol.v, sol.lambda, sol.mu);
        sol.iterations = pivot;
        last_pivots_ = pivot;
        if (sol.kkt.max() > opt.tol) return false;
        sol.status = QpStatus::optimal;
        last_ = sol.v;
        return true;
      }
      // Drop wrong-signed rows first; adding while duals disagree thrashes.
      if (remove >= 0) {
        drop(remove);
        last_added = -1;
      } else {
        active_.insert(std::lower_bound(active_.begin(), active_.end(), add), add);
        factor_.reset();
        last_added = add;
      }
      if (!seen.insert(active_).second) return false;  // cycled
    }
    return false;
  }

  void drop(int row) {
    auto it = std::lower_bound(active_.begin(), active_.end(), row);
    if (it != active_.end() && *it == row) active_.erase(it);
    factor_.reset();
  }

  SpMat p_, a_, g_;
  Eigen::SparseMatrix<double, Eigen::RowMajor> g_rows_;
  int n_ = 0, me_ = 0, mi_ = 0;
  std::vector<int> active_;
  SpMat kkt_;
  std::unique_ptr<Eigen::SimplicialLDLT<SpMat>> factor_;
  bool have_set_ = false;
  Vec last_;
  int last_pivots_ = 0;
  bool last_fallback_ = false;
};

namespace detail {

inline QpSolution crossover_rescue(const SpMat& P, const Vec& q, const SpMat& A,
                                   const Vec& b, const SpMat& G, const Vec& h,
                                   const QpSolution& stalled, const QpOptions& opt) {
  ParametricQpSolver finisher(P, A, G);
  return finisher.finish(q, b, h, stalled, opt);
}

}  // namespace detail

}  // namespace hubmpc
