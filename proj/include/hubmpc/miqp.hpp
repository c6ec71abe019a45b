#pragma once

// Binary on/off handling on top of the QP layer: variable pinning with
// problem reduction, exhaustive enumeration (desk-scale oracle), and
// depth-first branch-and-bound. Relaxation and rounding helpers feed the
// two-stage controllers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <utility>

#include "hubmpc/lift.hpp"
#include "hubmpc/qp.hpp"

namespace hubmpc {

struct PinnedProblem {
  SpMat P;
  Vec q;
  SpMat Aeq;
  Vec beq;
  SpMat Gin;
  Vec hin;
  double constant = 0.0;
  std::vector<int> col_keep;  // reduced column -> original column
  std::vector<int> eq_keep;   // reduced row -> original row
  std::vector<int> in_keep;
  bool infeasible = false;  // a row emptied out onto an unsatisfiable bound

  // Value-independent decomposition, for re-solving the same pin pattern
  // against fresh (q, beq, hin): reduced rhs = (rhs - *_load)(row keep),
  // reduced q = q(col_keep) + q_load, constant = quad_constant + qᵀ(pins).
  Vec q_load;         // contribution of pinned columns through P
  Vec eq_load;        // full-length Aeq·(pinned values)
  Vec in_load;        // full-length Gin·(pinned values)
  double quad_constant = 0.0;
};

inline PinnedProblem fix_variables(const SpMat& P, const Vec& q, const SpMat& Aeq,
                                   const Vec& beq, const SpMat& Gin, const Vec& hin,
                                   const std::vector<std::pair<int, double>>& pins) {
  const int n = static_cast<int>(q.size());
  std::vector<double> value(n, 0.0);
  std::vector<char> pinned(n, 0);
  for (auto [c, t] : pins) {
    require(c >= 0 && c < n, "pinned column out of range");
    require(!pinned[c], "column pinned twice");
    pinned[c] = 1;
    value[c] = t;
  }
  PinnedProblem out;
  std::vector<int> col_map(n, -1);
  for (int c = 0; c < n; ++c)
    if (!pinned[c]) {
      col_map[c] = static_cast<int>(out.col_keep.size());
      out.col_keep.push_back(c);
    }
  const int nk = static_cast<int>(out.col_keep.size());

  out.q_load = Vec::Zero(nk);
  std::vector<Triplet> ps;
  for (int c = 0; c < P.outerSize(); ++c)
    for (SpMat::InnerIterator it(P, c); it; ++it) {
      int r = static_cast<int>(it.row());
      if (pinned[r] && pinned[c])
        out.quad_constant += 0.5 * it.value() * value[r] * value[c];
      else if (pinned[c])
        out.q_load(col_map[r]) += 0.5 * it.value() * value[c];
      else if (pinned[r])
        out.q_load(col_map[c]) += 0.5 * it.value() * value[r];
      else
        ps.emplace_back(col_map[r], col_map[c], it.value());
    }
  Vec q2 = out.q_load;
  for (int i = 0; i < nk; ++i) q2(i) += q(out.col_keep[i]);
  double constant = out.quad_constant;
  for (auto [c, t] : pins) constant += q(c) * t;

  auto reduce_rows = [&](const SpMat& M, const Vec& rhs, bool equality,
                         std::vector<int>& row_keep, SpMat& M2, Vec& rhs2,
                         Vec& load) {
    const int rows = static_cast<int>(M.rows());
    load = Vec::Zero(rows);
    std::vector<int> live(rows, 0);
    std::vector<Triplet> ts;
    for (int c = 0; c < M.outerSize(); ++c)
      for (SpMat::InnerIterator it(M, c); it; ++it) {
        int r = static_cast<int>(it.row());
        if (pinned[c]) {
          load(r) += it.value() * value[c];
        } else {
          live[r] = 1;
          ts.emplace_back(r, col_map[c], it.value());
        }
      }
    std::vector<int> row_map(rows, -1);
    for (int r = 0; r < rows; ++r) {
      double shifted = rhs(r) - load(r);
      if (live[r]) {
        row_map[r] = static_cast<int>(row_keep.size());
        row_keep.push_back(r);
      } else if (equality ? std::abs(shifted) > 1e-9 : shifted < -1e-9) {
        out.infeasible = true;
      }
    }
    for (auto& t : ts) t = Triplet(row_map[t.row()], t.col(), t.value());
    M2.resize(static_cast<int>(row_keep.size()), nk);
    M2.setFromTriplets(ts.begin(), ts.end());
    rhs2.resize(row_keep.size());
    for (size_t r = 0; r < row_keep.size(); ++r)
      rhs2(r) = rhs(row_keep[r]) - load(row_keep[r]);
  };

  out.P.resize(nk, nk);
  out.P.setFromTriplets(ps.begin(), ps.end());
  out.q = q2;
  out.constant = constant;
  reduce_rows(Aeq, beq, true, out.eq_keep, out.Aeq, out.beq, out.eq_load);
  reduce_rows(Gin, hin, false, out.in_keep, out.Gin, out.hin, out.in_load);
  return out;
}

inline PinnedProblem fix_variables(const LiftedProblem& pb,
                                   const std::vector<std::pair<int, double>>& pins) {
  auto out = fix_variables(pb.P, pb.q, pb.Aeq, pb.beq, pb.Gin, pb.hin, pins);
  out.constant += pb.constant;
  return out;
}

inline Vec expand_fixed(const PinnedProblem& fx, const Vec& reduced,
                        const std::vector<std::pair<int, double>>& pins, int n_full) {
  require(reduced.size() == static_cast<int>(fx.col_keep.size()),
          "reduced vector size mismatch");
  Vec v = Vec::Zero(n_full);
  for (size_t i = 0; i < fx.col_keep.size(); ++i) v(fx.col_keep[i]) = reduced(i);
  for (auto [c, t] : pins) v(c) = t;
  return v;
}

inline LiftedProblem relax_binaries(LiftedProblem pb, int n_relax) {
  std::vector<BinaryRef> keep;
  for (const auto& ref : pb.binaries)
    (ref.step < n_relax ? keep : pb.relaxed).push_back(ref);
  pb.binaries = std::move(keep);
  return pb;
}

inline std::vector<double> round_and_fix(const std::vector<double>& z_values,
                                         double z_bound) {
  std::vector<double> out(z_values.size());
  for (size_t i = 0; i < z_values.size(); ++i) {
    double z = z_values[i];
    require(z > -1e-7 && z < 1.0 + 1e-7, "switch value outside the unit box");
    out[i] = z >= z_bound ? 1.0 : 0.0;
  }
  return out;
}

struct BinaryDecision {
  std::map<int, int> assignment;  // column -> {0,1}
  double objective = std::numeric_limits<double>::infinity();
  long node_count = 0;
};

struct MiqpOptions {
  int bb_cap = 40;
  int brute_cap = 16;
  double int_tol = 1e-6;
  QpOptions qp;
};

namespace detail {

// Solves the problem with the given binary pins; returns the full-length
// primal with duals mapped back onto the original rows (dropped rows are
// slack by construction, their multipliers are zero).
inline QpSolution solve_pinned(const LiftedProblem& pb,
                               const std::vector<std::pair<int, double>>& pins,
                               const QpOptions& opt, const Vec* warm_full) {
  auto fx = fix_variables(pb, pins);
  QpSolution out;
  if (fx.infeasible) {
    out.status = QpStatus::infeasible;
    return out;
  }
  QpOptions o = opt;
  if (warm_full && warm_full->size() == pb.n()) {
    Vec w(fx.col_keep.size());
    for (size_t i = 0; i < fx.col_keep.size(); ++i) w(i) = (*warm_full)(fx.col_keep[i]);
    o.warm_v = w;
  }
  QpSolution red = solve_qp(fx.P, fx.q, fx.Aeq, fx.beq, fx.Gin, fx.hin, o);
  out.status = red.status;
  out.kkt = red.kkt;
  out.iterations = red.iterations;
  if (red.status == QpStatus::infeasible) return out;
  out.v = expand_fixed(fx, red.v, pins, pb.n());
  out.lambda = Vec::Zero(pb.beq.size());
  for (size_t r = 0; r < fx.eq_keep.size(); ++r) out.lambda(fx.eq_keep[r]) = red.lambda(r);
  out.mu = Vec::Zero(pb.hin.size());
  for (size_t r = 0; r < fx.in_keep.size(); ++r) out.mu(fx.in_keep[r]) = red.mu(r);
  return out;
}

}  // namespace detail

struct MiqpResult {
  BinaryDecision decision;
  QpSolution solution;
};

inline MiqpResult solve_miqp_bruteforce(const LiftedProblem& pb,
                                        const MiqpOptions& opt = {}) {
  const int nb = static_cast<int>(pb.binaries.size());
  require(nb <= opt.brute_cap, "too many binaries for exhaustive enumeration");
  MiqpResult best;
  best.solution.status = QpStatus::infeasible;
  Vec warm;
  for (long mask = 0; mask < (1L << nb); ++mask) {
    std::vector<std::pair<int, double>> pins;
    for (int b = 0; b < nb; ++b)
      pins.emplace_back(pb.binaries[b].var, (mask >> b) & 1 ? 1.0 : 0.0);
    auto sol = detail::solve_pinned(pb, pins, opt.qp, warm.size() ? &warm : nullptr);
    ++best.decision.node_count;
    if (sol.status != QpStatus::optimal) continue;
    warm = sol.v;
    double obj = qp_objective(pb.P, pb.q, sol.v) + pb.constant;
    if (obj < best.decision.objective - 1e-12 ||
        best.solution.status != QpStatus::optimal) {
      best.decision.objective = obj;
      best.decision.assignment.clear();
      for (int b = 0; b < nb; ++b)
        best.decision.assignment[pb.binaries[b].var] = (mask >> b) & 1;
      best.solution = sol;
    }
  }
  return best;
}

inline MiqpResult solve_miqp_bb(const LiftedProblem& pb, const MiqpOptions& opt = {}) {
  const int nb = static_cast<int>(pb.binaries.size());
  require(nb <= opt.bb_cap, "too many binaries for branch-and-bound");

  MiqpResult best;
  best.solution.status = QpStatus::infeasible;
  double incumbent = std::numeric_limits<double>::infinity();

  struct Node {
    std::vector<std::pair<int, double>> pins;  // by binary position
    Vec warm;
  };
  std::vector<Node> stack;
  stack.push_back({{}, Vec()});

  auto accept = [&](const std::vector<std::pair<int, double>>& pins, const Vec& warm) {
    // exact leaf solve so the incumbent is the true objective at this
    // assignment, not a relaxation value within integrality slop
    std::vector<std::pair<int, double>> full(pins);
    auto sol = detail::solve_pinned(pb, full, opt.qp, warm.size() ? &warm : nullptr);
    ++best.decision.node_count;
    if (sol.status != QpStatus::optimal) return;
    double obj = qp_objective(pb.P, pb.q, sol.v) + pb.constant;
    if (obj < incumbent - 1e-12 || best.solution.status != QpStatus::optimal) {
      incumbent = obj;
      best.decision.objective = obj;
      best.decision.assignment.clear();
      for (auto [var, t] : full) best.decision.assignment[var] = t > 0.5 ? 1 : 0;
      best.solution = sol;
    }
  };

  while (!stack.empty()) {
    Node node = std::move(stack.back());
    stack.pop_back();
    auto sol = detail::solve_pinned(pb, node.pins, opt.qp,
                                    node.warm.size() ? &node.warm : nullptr);
    ++best.decision.node_count;
    if (sol.status != QpStatus::optimal) continue;
    double bound = qp_objective(pb.P, pb.q, sol.v) + pb.constant;
    if (bound >= incumbent - 1e-9) continue;

    int branch = -1;
    double most = opt.int_tol;
    for (int b = 0; b < nb; ++b) {
      bool pinned = false;
      for (auto [var, t] : node.pins)
        if (var == pb.binaries[b].var) pinned = true;
      if (pinned) continue;
      double frac = std::abs(sol.v(pb.binaries[b].var) - 0.5);
      double dist = 0.5 - frac;  // distance to the nearest integer
      if (dist > most) {
        most = dist;
        branch = b;
      }
    }
    if (branch < 0) {
      // all free switches sit at integral values: snap and take the leaf
      std::vector<std::pair<int, double>> pins(node.pins);
      for (int b = 0; b < nb; ++b) {
        bool pinned = false;
        for (auto [var, t] : node.pins)
          if (var == pb.binaries[b].var) pinned = true;
        if (!pinned)
          pins.emplace_back(pb.binaries[b].var,
                            sol.v(pb.binaries[b].var) > 0.5 ? 1.0 : 0.0);
      }
      accept(pins, sol.v);
      continue;
    }
    Node off{node.pins, sol.v}, on{node.pins, sol.v};
    off.pins.emplace_back(pb.binaries[branch].var, 0.0);
    on.pins.emplace_back(pb.binaries[branch].var, 1.0);
    stack.push_back(std::move(off));
    stack.push_back(std::move(on));  // popped first: heating tends to run
  }
  return best;
}

// Re-solvable pin pattern: the reduction is computed once from the matrices,
// then any (q, beq, hin) can be solved against it. Carries a ParametricQpSolver
// so repeated solves with drifting values reuse the active-set factorization.
class PinnedSolver {
 public:
  PinnedSolver() = default;

  PinnedSolver(const SpMat& P, const SpMat& Aeq, const SpMat& Gin,
               std::vector<std::pair<int, double>> pins)
      : pins_(std::move(pins)),
        fx_(fix_variables(P, Vec::Zero(P.cols()), Aeq, Vec::Zero(Aeq.rows()), Gin,
                          Vec::Zero(Gin.rows()), pins_)),
        solver_(fx_.P, fx_.Aeq, fx_.Gin),
        n_full_(static_cast<int>(P.cols())) {
    dropped_eq_ = complement(fx_.eq_keep, static_cast<int>(Aeq.rows()));
    dropped_in_ = complement(fx_.in_keep, static_cast<int>(Gin.rows()));
  }

  QpSolution solve(const Vec& q, const Vec& beq, const Vec& hin,
                   const QpOptions& opt = {}, const Vec* warm_full = nullptr) {
    QpSolution out;
    for (int r : dropped_eq_)
      if (std::abs(beq(r) - fx_.eq_load(r)) > 1e-9) {
        out.status = QpStatus::infeasible;
        return out;
      }
    for (int r : dropped_in_)
      if (hin(r) - fx_.in_load(r) < -1e-9) {
        out.status = QpStatus::infeasible;
        return out;
      }
    const int nk = static_cast<int>(fx_.col_keep.size());
    Vec q2 = fx_.q_load, b2(fx_.eq_keep.size()), h2(fx_.in_keep.size());
    for (int i = 0; i < nk; ++i) q2(i) += q(fx_.col_keep[i]);
    for (size_t r = 0; r < fx_.eq_keep.size(); ++r)
      b2(r) = beq(fx_.eq_keep[r]) - fx_.eq_load(fx_.eq_keep[r]);
    for (size_t r = 0; r < fx_.in_keep.size(); ++r)
      h2(r) = hin(fx_.in_keep[r]) - fx_.in_load(fx_.in_keep[r]);
    QpOptions o = opt;
    if (warm_full && warm_full->size() == n_full_) {
      Vec w(nk);
      for (int i = 0; i < nk; ++i) w(i) = (*warm_full)(fx_.col_keep[i]);
      o.warm_v = w;
    }
    QpSolution red = solver_.solve(q2, b2, h2, o);
    ++solves_;
    if (solver_.last_used_fallback() || solver_.last_pivots() > 0) ++cold_or_pivoted_;
    out.status = red.status;
    out.kkt = red.kkt;
    out.iterations = red.iterations;
    if (red.status == QpStatus::infeasible) return out;
    out.v = Vec::Zero(n_full_);
    for (int i = 0; i < nk; ++i) out.v(fx_.col_keep[i]) = red.v(i);
    for (auto [c, t] : pins_) out.v(c) = t;
    out.lambda = Vec::Zero(beq.size());
    for (size_t r = 0; r < fx_.eq_keep.size(); ++r)
      out.lambda(fx_.eq_keep[r]) = red.lambda(r);
    out.mu = Vec::Zero(hin.size());
    for (size_t r = 0; r < fx_.in_keep.size(); ++r) out.mu(fx_.in_keep[r]) = red.mu(r);
    return out;
  }

  double constant(const Vec& q) const {
    double c = fx_.quad_constant;
    for (auto [col, t] : pins_) c += q(col) * t;
    return c;
  }

  const std::vector<std::pair<int, double>>& pins() const { return pins_; }
  long solves() const { return solves_; }
  long reused_solves() const { return solves_ - cold_or_pivoted_; }

 private:
  static std::vector<int> complement(const std::vector<int>& keep, int total) {
    std::vector<int> out;
    size_t at = 0;
    for (int r = 0; r < total; ++r) {
      if (at < keep.size() && keep[at] == r)
        ++at;
      else
        out.push_back(r);
    }
    return out;
  }

  std::vector<std::pair<int, double>> pins_;
  PinnedProblem fx_;
  ParametricQpSolver solver_;
  int n_full_ = 0;
  std::vector<int> dropped_eq_, dropped_in_;
  long solves_ = 0, cold_or_pivoted_ = 0;
};

// Branch-and-bound over a fixed problem structure whose values drift between
// calls (prices, initial states, forecasts). Node solvers are cached by pin
// pattern and kept warm; the previous optimum seeds the incumbent, so a call
// whose assignment is unchanged costs a handful of factorization-free solves.
class CachedMiqpSolver {
 public:
  explicit CachedMiqpSolver(LiftedProblem structure, MiqpOptions opt = {},
                            int cache_cap = 24)
      : pb_(std::move(structure)), opt_(opt), cap_(cache_cap) {
    require(static_cast<int>(pb_.binaries.size()) <= opt_.bb_cap,
            "too many binaries for branch-and-bound");
    require(cache_cap >= 2, "pattern cache needs room for root and incumbent");
  }

  // the pattern cache owns live factorizations; move-only
  CachedMiqpSolver(CachedMiqpSolver&&) = default;
  CachedMiqpSolver& operator=(CachedMiqpSolver&&) = default;
  CachedMiqpSolver(const CachedMiqpSolver&) = delete;
  CachedMiqpSolver& operator=(const CachedMiqpSolver&) = delete;

  MiqpResult solve(const Vec& q, const Vec& beq, const Vec& hin) {
    const int nb = static_cast<int>(pb_.binaries.size());
    trim();
    MiqpResult best;
    best.solution.status = QpStatus::infeasible;
    double incumbent = std::numeric_limits<double>::infinity();

    auto leaf = [&](const Key& key, const Vec* warm) {
      auto sol = node_solve(entry(key), q, beq, hin, warm);
      ++best.decision.node_count;
      if (sol.status != QpStatus::optimal) return;
      double obj = qp_objective(pb_.P, q, sol.v) + pb_.constant;
      if (obj < incumbent - 1e-12 || best.solution.status != QpStatus::optimal) {
        incumbent = obj;
        best.decision.objective = obj;
        best.decision.assignment.clear();
        for (int b = 0; b < nb; ++b)
          best.decision.assignment[pb_.binaries[b].var] = key[b];
        best.solution = sol;
        incumbent_ = key;
      }
    };

    if (static_cast<int>(incumbent_.size()) == nb &&
        std::none_of(incumbent_.begin(), incumbent_.end(),
                     [](int8_t s) { return s < 0; }))
      leaf(incumbent_, nullptr);

    std::vector<std::pair<Key, Vec>> stack;
    stack.emplace_back(Key(nb, int8_t{-1}), Vec());
    while (!stack.empty()) {
      auto [key, warm] = std::move(stack.back());
      stack.pop_back();
      auto sol = node_solve(entry(key), q, beq, hin, warm.size() ? &warm : nullptr);
      ++best.decision.node_count;
      if (sol.status != QpStatus::optimal) continue;
      double bound = qp_objective(pb_.P, q, sol.v) + pb_.constant;
      if (bound >= incumbent - 1e-9) continue;

      int branch = -1;
      double most = opt_.int_tol;
      for (int b = 0; b < nb; ++b) {
        if (key[b] >= 0) continue;
        double dist = 0.5 - std::abs(sol.v(pb_.binaries[b].var) - 0.5);
        if (dist > most) {
          most = dist;
          branch = b;
        }
      }
      if (branch < 0) {
        Key snapped = key;
        bool complete = true;
        for (int b = 0; b < nb; ++b)
          if (snapped[b] < 0) {
            snapped[b] = sol.v(pb_.binaries[b].var) > 0.5 ? 1 : 0;
            complete = false;
          }
        if (complete) {
          // the node itself is an exact leaf
          double obj = bound;
          if (obj < incumbent - 1e-12 ||
              best.solution.status != QpStatus::optimal) {
            incumbent = obj;
            best.decision.objective = obj;
            best.decision.assignment.clear();
            for (int b = 0; b < nb; ++b)
              best.decision.assignment[pb_.binaries[b].var] = key[b];
            best.solution = sol;
            incumbent_ = key;
          }
        } else {
          leaf(snapped, &sol.v);
        }
        continue;
      }
      Key off = key, on = key;
      off[branch] = 0;
      on[branch] = 1;
      stack.emplace_back(std::move(off), sol.v);
      stack.emplace_back(std::move(on), sol.v);  // popped first
    }
    return best;
  }

  long node_solves() const { return solves_; }
  long reused_solves() const { return reused_; }
  int cached_patterns() const { return static_cast<int>(cache_.size()); }
  const LiftedProblem& problem() const { return pb_; }

 private:
  using Key = std::vector<int8_t>;
  struct Entry {
    PinnedSolver solver;
    std::uint64_t stamp = 0;
  };

  Entry& entry(const Key& key) {
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      std::vector<std::pair<int, double>> pins;
      for (size_t b = 0; b < key.size(); ++b)
        if (key[b] >= 0)
          pins.emplace_back(pb_.binaries[b].var, static_cast<double>(key[b]));
      it = cache_.emplace(key, Entry{PinnedSolver(pb_.P, pb_.Aeq, pb_.Gin,
                                                  std::move(pins)),
                                     0}).first;
    }
    it->second.stamp = ++clock_;
    return it->second;
  }

  QpSolution node_solve(Entry& e, const Vec& q, const Vec& beq, const Vec& hin,
                        const Vec* warm) {
    long before = e.solver.reused_solves();
    auto sol = e.solver.solve(q, beq, hin, opt_.qp, warm);
    ++solves_;
    if (e.solver.reused_solves() > before) ++reused_;
    return sol;
  }

  // Evicts stale patterns between calls only, so live node references hold.
  void trim() {
    while (static_cast<int>(cache_.size()) > cap_ && cache_.size() > 1) {
      auto victim = cache_.end();
      for (auto it = cache_.begin(); it != cache_.end(); ++it) {
        if (it->first == incumbent_) continue;
        if (victim == cache_.end() || it->second.stamp < victim->second.stamp)
          victim = it;
      }
      if (victim == cache_.end()) break;
      cache_.erase(victim);
    }
  }

  LiftedProblem pb_;
  MiqpOptions opt_;
  int cap_;
  std::map<Key, Entry> cache_;
  Key incumbent_;
  std::uint64_t clock_ = 0;
  long solves_ = 0, reused_ = 0;
};

}  // namespace hubmpc
