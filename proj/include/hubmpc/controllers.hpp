#pragma once

// The three MPC strategies over the lifted problems. Centralized solves the
// joint mixed-binary problem; decentralized lets every agent solve alone with
// the couplings ignored; distributed coordinates the local problems through
// subgradient price updates, in two stages: a semi-relaxed binary search, then
// refinement with every switch rounded and pinned.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hubmpc/miqp.hpp"

namespace hubmpc {

enum class Stage { semi_relaxed, fixed_binary };

struct DistributedConfig {
  int horizon = 24;
  double kappa = 0.15;      // price step
  double rho = 0.08;        // copy regularization; overrides Weights::rho
  double eps_tol_r = 5e-3;  // stage-1 cost-variation threshold
  double eps_tol = 5e-4;    // stage-2 threshold
  int l_max_r = 300;        // stage-1 cap on the shared iteration counter
  int l_max = 850;          // total cap
  int l_min = 150;          // minimum iterations before either check may fire
  int l_min_relaxed = -1;   // per-stage overrides; negative means use l_min
  int l_min_fixed = -1;
  int n_relax = 12;         // steps whose switches stay integral in stage 1
  double z_bound = 0.5;     // rounding threshold between stages
  bool full_integrality = false;   // centralized: keep every switch integral
  bool warm_start_prices = false;  // reuse final prices across MPC steps
  bool record_price_trace = false;
  MiqpOptions miqp;

  int l_min_stage1() const { return l_min_relaxed >= 0 ? l_min_relaxed : l_min; }
  int l_min_stage2() const { return l_min_fixed >= 0 ? l_min_fixed : l_min; }

  void validate() const {
    require(horizon > 0, "horizon must be positive");
    require(kappa > 0.0, "price step must be positive");
    require(rho >= 0.0, "copy regularization must be nonnegative");
    require(eps_tol_r > 0.0 && eps_tol > 0.0,
            "convergence thresholds must be positive");
    require(l_max_r >= 1 && l_max >= l_max_r, "iteration caps must be ordered");
    require(l_min_stage1() <= l_max_r && l_min_stage2() <= l_max,
            "minimum iterations exceed the caps");
    require(n_relax >= 0 && n_relax <= horizon, "relaxation split out of range");
    require(z_bound > 0.0 && z_bound <= 1.0, "rounding threshold out of range");
  }
};

// Coordinator state. Every link (i, j) carries three vectors with identical
// slot layout — the price, the supplier-held copy, and the consumer proposal —
// each covering consumer j's full draw block over the horizon.
struct DualState {
  std::vector<Vec> p;
  std::vector<Vec> r;
  std::vector<Vec> u_cnet;
  int iteration = 0;
  Stage stage = Stage::semi_relaxed;
  std::vector<double> cost_history;           // one entry per iteration
  std::vector<Stage> stage_history;           // stage active at each entry
  std::vector<std::vector<Vec>> price_trace;  // prices seen per iteration
};

struct AgentInputs {
  std::vector<Vec> supplier_u;  // per supplier: (heat pump, boiler) kW electric
  std::vector<double> supplier_z;
  std::vector<Vec> supplier_unet;   // thermal kW toward each served consumer
  std::vector<Vec> consumer_u;      // per consumer: thermal kW per zone
  std::vector<Vec> consumer_ucnet;  // per-tank per-zone draws
};

struct StepDiagnostics {
  int iterations = 0;
  int stage1_iterations = 0;
  int stage2_iterations = 0;
  long qp_solves = 0;
  double wall_seconds = 0.0;
  std::vector<double> agent_seconds;  // suppliers then consumers, solve time only
  double parallel_seconds = 0.0;      // sum over iterations of the slowest agent
  std::vector<double> cost_history;
  double final_cost = std::numeric_limits<double>::quiet_NaN();
  double reference_cost = std::numeric_limits<double>::quiet_NaN();
};

struct ControlDecision {
  AgentInputs inputs;
  StepDiagnostics diag;
  DualState dual;
};

inline Vec price_update(const Vec& p, const Vec& u_cnet, const Vec& r,
                        double kappa) {
  require(p.size() == u_cnet.size() && p.size() == r.size(),
          "price update needs identical slot layouts");
  return p + kappa * (u_cnet - r);
}

// True once the latest cost step is below eps and the run is past l_min.
// Needs at least two entries: a lone cost has no variation to measure.
inline bool convergence_check(const std::vector<double>& cost_history,
                              double eps, int l_min) {
  const int t = static_cast<int>(cost_history.size());
  if (t < 2 || t < l_min) return false;
  return std::abs(cost_history[t - 1] - cost_history[t - 2]) < eps;
}

inline Vec aggregate_prices(const std::vector<Vec>& link_prices,
                            const Topology& topo, int j) {
  require(j >= 0 && j < topo.n_consumers, "consumer index out of range");
  require(static_cast<int>(link_prices.size()) == topo.n_links(),
          "one price vector per link");
  require(!topo.tanks_of_consumer[j].empty(), "consumer has no serving tank");
  Vec out;
  for (int i : topo.tanks_of_consumer[j]) {
    const Vec& pl = link_prices[topo.link_index(i, j)];
    if (out.size() == 0)
      out = pl;
    else {
      require(pl.size() == out.size(), "price slot mismatch across links");
      out += pl;
    }
  }
  return out;
}

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Clamps through every single-variable polytope row; rows mixing inputs are
// left to the solver tolerance (the shipped models use boxes only).
inline void clamp_box_rows(const Mat& g_mat, const Vec& bound, Vec& u) {
  for (int r = 0; r < g_mat.rows(); ++r) {
    int nz = 0, col = -1;
    for (int c = 0; c < g_mat.cols(); ++c)
      if (g_mat(r, c) != 0.0) {
        ++nz;
        col = c;
      }
    if (nz != 1) continue;
    const double a = g_mat(r, col), lim = bound(r) / a;
    u(col) = a > 0.0 ? std::min(u(col), lim) : std::max(u(col), lim);
  }
}

inline void snap_supplier_inputs(const SupplierModel& m, Vec& u, double& z) {
  z = z >= 0.5 ? 1.0 : 0.0;
  clamp_box_rows(m.g_mat, z == 1.0 ? m.g_tilde : m.g_vec, u);
}

inline void snap_consumer_inputs(const ConsumerModel& m, Vec& u) {
  clamp_box_rows(m.g_mat, m.g_vec, u);
}

inline void size_inputs(AgentInputs& in, int ns, int nc) {
  in.supplier_u.resize(ns);
  in.supplier_z.assign(ns, 0.0);
  in.supplier_unet.resize(ns);
  in.consumer_u.resize(nc);
  in.consumer_ucnet.resize(nc);
}

inline void take_supplier(const SupplierModel& m, const AgentLayout& L,
                          const Vec& v, int i, AgentInputs& in) {
  Vec u = v.segment(step_index(L.u, L.nu, 0), L.nu);
  double z = L.z.size ? v(step_index(L.z, 1, 0)) : 0.0;
  snap_supplier_inputs(m, u, z);
  in.supplier_u[i] = u;
  in.supplier_z[i] = z;
  in.supplier_unet[i] =
      L.nunet ? Vec(v.segment(step_index(L.unet, L.nunet, 0), L.nunet)
                        .cwiseMax(0.0))
              : Vec();
}

inline void take_consumer(const ConsumerModel& m, const AgentLayout& L,
                          const Vec& v, int j, AgentInputs& in) {
  Vec u = v.segment(step_index(L.u, L.nu, 0), L.nu);
  snap_consumer_inputs(m, u);
  in.consumer_u[j] = u;
  in.consumer_ucnet[j] =
      L.nunet ? Vec(v.segment(step_index(L.unet, L.nunet, 0), L.nunet)
                        .cwiseMax(0.0))
              : Vec();
}

// Rounded pins for every switch column in the problem's layout.
inline std::vector<std::pair<int, double>> rounded_z_pins(
    const LiftedProblem& pb, const Vec& v, double z_bound) {
  std::vector<int> cols;
  std::vector<double> zf;
  for (const AgentLayout& L : pb.layout.suppliers)
    for (int k = 0; k < L.z.size; ++k) {
      cols.push_back(step_index(L.z, 1, k));
      zf.push_back(v(cols.back()));
    }
  std::vector<double> zr = round_and_fix(zf, z_bound);
  std::vector<std::pair<int, double>> pins;
  pins.reserve(cols.size());
  for (size_t k = 0; k < cols.size(); ++k) pins.emplace_back(cols[k], zr[k]);
  return pins;
}

// Rounds any relaxed switches and re-solves with the full pattern pinned, so
// the returned point is feasible for the true switched dynamics.
inline Vec integral_point(const LiftedProblem& pb, const Vec& v,
                          const DistributedConfig& cfg, long& qp_solves,
                          const char* who) {
  if (pb.relaxed.empty()) return v;
  PinnedSolver ps(pb.P, pb.Aeq, pb.Gin,
                  rounded_z_pins(pb, v, cfg.z_bound));
  QpSolution sol = ps.solve(pb.q, pb.beq, pb.hin, cfg.miqp.qp, &v);
  ++qp_solves;
  if (sol.status != QpStatus::optimal)
    throw std::runtime_error(std::string(who) +
                             ": rounded switch pattern infeasible");
  return sol.v;
}

}  // namespace detail

inline ControlDecision centralized_step(const std::vector<SupplierModel>& sups,
                                        const std::vector<ConsumerModel>& cons,
                                        const Topology& topo,
                                        const Weights& weights,
                                        const std::vector<SupplierHorizon>& shz,
                                        const std::vector<ConsumerHorizon>& chz,
                                        const DistributedConfig& cfg) {
  cfg.validate();
  const auto t_begin = detail::Clock::now();
  Weights w = weights;
  w.rho = cfg.rho;
  LiftedProblem pb =
      build_centralized(sups, cons, topo, w, shz, chz, cfg.horizon, cfg.n_relax,
                        cfg.full_integrality, true);
  ControlDecision out;
  const auto t_solve = detail::Clock::now();
  MiqpResult res = solve_miqp_bb(pb, cfg.miqp);
  if (res.solution.status != QpStatus::optimal)
    throw std::runtime_error("centralized step: joint problem infeasible");
  out.diag.qp_solves = res.decision.node_count;
  out.diag.cost_history.push_back(pb.stage_cost(res.solution.v));
  Vec v = detail::integral_point(pb, res.solution.v, cfg, out.diag.qp_solves,
                                 "centralized step");
  if (!pb.relaxed.empty()) out.diag.cost_history.push_back(pb.stage_cost(v));
  out.diag.parallel_seconds = detail::seconds_since(t_solve);

  detail::size_inputs(out.inputs, topo.n_suppliers, topo.n_consumers);
  for (int i = 0; i < topo.n_suppliers; ++i)
    detail::take_supplier(sups[i], pb.layout.suppliers[i], v, i, out.inputs);
  for (int j = 0; j < topo.n_consumers; ++j)
    detail::take_consumer(cons[j], pb.layout.consumers[j], v, j, out.inputs);
  out.diag.iterations = 1;
  out.diag.final_cost = out.diag.cost_history.back();
  out.diag.wall_seconds = detail::seconds_since(t_begin);
  return out;
}

// Every agent plans alone: suppliers see only their uncontrolled draw
// forecast, consumers draw as if supply were unlimited and free. The plant is
// the only place the two sides meet.
inline ControlDecision decentralized_step(
    const std::vector<SupplierModel>& sups,
    const std::vector<ConsumerModel>& cons, const Topology& topo,
    const Weights& weights, const std::vector<SupplierHorizon>& shz,
    const std::vector<ConsumerHorizon>& chz, const DistributedConfig& cfg) {
  cfg.validate();
  const auto t_begin = detail::Clock::now();
  const int ns = topo.n_suppliers, nc = topo.n_consumers;
  Weights w = weights;
  w.rho = cfg.rho;
  Topology solo = topo.without_links();

  ControlDecision out;
  out.diag.agent_seconds.assign(ns + nc, 0.0);
  detail::size_inputs(out.inputs, ns, nc);
  double slowest = 0.0, planned_cost = 0.0;

  for (int i = 0; i < ns; ++i) {
    LiftedProblem pb = build_supplier_problem(sups[i], solo, i, w, shz[i], {},
                                              cfg.horizon, cfg.n_relax);
    const auto t0 = detail::Clock::now();
    MiqpResult res = solve_miqp_bb(pb, cfg.miqp);
    if (res.solution.status != QpStatus::optimal)
      throw std::runtime_error("decentralized step: supplier " +
                               std::to_string(i) + " infeasible");
    out.diag.qp_solves += res.decision.node_count;
    Vec v = detail::integral_point(pb, res.solution.v, cfg,
                                   out.diag.qp_solves, "decentralized step");
    const double dt = detail::seconds_since(t0);
    out.diag.agent_seconds[i] = dt;
    slowest = std::max(slowest, dt);
    planned_cost += pb.stage_cost(v);
    detail::take_supplier(sups[i], pb.layout.suppliers[i], v, i, out.inputs);
  }
  for (int j = 0; j < nc; ++j) {
    LiftedProblem pb =
        build_consumer_problem(cons[j], topo, j, w, chz[j], Vec(), cfg.horizon);
    const auto t0 = detail::Clock::now();
    QpSolution sol =
        solve_qp(pb.P, pb.q, pb.Aeq, pb.beq, pb.Gin, pb.hin, cfg.miqp.qp);
    if (sol.status != QpStatus::optimal)
      throw std::runtime_error("decentralized step: consumer " +
                               std::to_string(j) + " infeasible");
    ++out.diag.qp_solves;
    const double dt = detail::seconds_since(t0);
    out.diag.agent_seconds[ns + j] = dt;
    slowest = std::max(slowest, dt);
    planned_cost += pb.stage_cost(sol.v);
    detail::take_consumer(cons[j], pb.layout.consumers[j], sol.v, j,
                          out.inputs);
  }
  out.diag.iterations = 1;
  out.diag.parallel_seconds = slowest;
  out.diag.cost_history = {planned_cost};
  out.diag.final_cost = planned_cost;
  out.diag.wall_seconds = detail::seconds_since(t_begin);
  return out;
}

// Dual-decomposition coordination. Each iteration solves every local problem
// at the current prices, evaluates the global cost (true objectives, no price
// terms), then moves the prices along the consensus gap. Stage 1 keeps the
// leading switches integral per supplier; afterwards every switch is rounded
// and pinned, and the same price loop refines the continuous variables on the
// remaining iteration budget. `carry` supplies last step's prices when
// warm_start_prices is set; state is otherwise rebuilt from zero.
inline ControlDecision distributed_step(const std::vector<SupplierModel>& sups,
                                        const std::vector<ConsumerModel>& cons,
                                        const Topology& topo,
                                        const Weights& weights,
                                        const std::vector<SupplierHorizon>& shz,
                                        const std::vector<ConsumerHorizon>& chz,
                                        const DistributedConfig& cfg,
                                        const DualState* carry = nullptr) {
  cfg.validate();
  const auto t_begin = detail::Clock::now();
  const int N = cfg.horizon;
  const int ns = topo.n_suppliers, nc = topo.n_consumers, nl = topo.n_links();
  Weights w = weights;
  w.rho = cfg.rho;

  ControlDecision out;
  DualState& ds = out.dual;
  ds.p.resize(nl);
  ds.r.resize(nl);
  ds.u_cnet.resize(nl);
  for (int l = 0; l < nl; ++l) {
    const int width = N * topo.ucnet_width(topo.links[l].second);
    ds.p[l] = Vec::Zero(width);
    ds.r[l] = Vec::Zero(width);
    ds.u_cnet[l] = Vec::Zero(width);
  }
  if (cfg.warm_start_prices && carry &&
      carry->p.size() == static_cast<size_t>(nl)) {
    bool match = true;
    for (int l = 0; l < nl; ++l)
      match = match && carry->p[l].size() == ds.p[l].size();
    if (match) ds.p = carry->p;
  }

  std::vector<LiftedProblem> spb, cpb;
  spb.reserve(ns);
  cpb.reserve(nc);
  std::vector<CachedMiqpSolver> sstage1;
  sstage1.reserve(ns);
  for (int i = 0; i < ns; ++i) {
    spb.push_back(
        build_supplier_problem(sups[i], topo, i, w, shz[i], {}, N, cfg.n_relax));
    sstage1.emplace_back(spb[i], cfg.miqp);
  }
  std::vector<ParametricQpSolver> csolver;
  csolver.reserve(nc);
  for (int j = 0; j < nc; ++j) {
    cpb.push_back(build_consumer_problem(cons[j], topo, j, w, chz[j], Vec(), N));
    csolver.emplace_back(cpb[j].P, cpb[j].Aeq, cpb[j].Gin);
  }

  StepDiagnostics& diag = out.diag;
  diag.agent_seconds.assign(ns + nc, 0.0);
  std::vector<QpSolution> ssol(ns), csol(nc);
  Vec q;

  auto abort_infeasible = [&](const char* side, int idx) {
    throw std::runtime_error(std::string("distributed step: ") + side + " " +
                             std::to_string(idx) + " infeasible at iteration " +
                             std::to_string(ds.iteration + 1));
  };

  auto run_iteration = [&](auto&& solve_supplier) {
    double slowest = 0.0;
    for (int i = 0; i < ns; ++i) {
      const AgentLayout& L = spb[i].layout.suppliers[i];
      q.setZero(spb[i].n());
      const auto& served = topo.links_of_supplier[i];
      for (size_t pos = 0; pos < served.size(); ++pos) {
        const Span& rs = L.r_links[pos];
        q.segment(rs.offset, rs.size) = -ds.p[topo.link_index(i, served[pos])];
      }
      const auto t0 = detail::Clock::now();
      ssol[i] = solve_supplier(i, q);
      const double dt = detail::seconds_since(t0);
      diag.agent_seconds[i] += dt;
      slowest = std::max(slowest, dt);
      if (ssol[i].status != QpStatus::optimal) abort_infeasible("supplier", i);
    }
    for (int j = 0; j < nc; ++j) {
      const AgentLayout& L = cpb[j].layout.consumers[j];
      q.setZero(cpb[j].n());
      if (L.unet.size > 0)
        q.segment(L.unet.offset, L.unet.size) = aggregate_prices(ds.p, topo, j);
      const auto t0 = detail::Clock::now();
      csol[j] = csolver[j].solve(q, cpb[j].beq, cpb[j].hin, cfg.miqp.qp);
      const double dt = detail::seconds_since(t0);
      diag.agent_seconds[ns + j] += dt;
      slowest = std::max(slowest, dt);
      ++diag.qp_solves;
      if (csol[j].status != QpStatus::optimal) abort_infeasible("consumer", j);
    }
    diag.parallel_seconds += slowest;

    for (int l = 0; l < nl; ++l) {
      const auto [i, j] = topo.links[l];
      const AgentLayout& Ls = spb[i].layout.suppliers[i];
      const Span& rs = Ls.r_links[topo.link_pos_in_supplier(i, j)];
      ds.r[l] = ssol[i].v.segment(rs.offset, rs.size);
      const AgentLayout& Lc = cpb[j].layout.consumers[j];
      ds.u_cnet[l] = csol[j].v.segment(Lc.unet.offset, Lc.unet.size);
    }
    double c = 0.0;
    for (int i = 0; i < ns; ++i) c += spb[i].stage_cost(ssol[i].v);
    for (int j = 0; j < nc; ++j) c += cpb[j].stage_cost(csol[j].v);
    ds.cost_history.push_back(c);
    ds.stage_history.push_back(ds.stage);
    if (cfg.record_price_trace) ds.price_trace.push_back(ds.p);
    for (int l = 0; l < nl; ++l)
      ds.p[l] = price_update(ds.p[l], ds.u_cnet[l], ds.r[l], cfg.kappa);
    ++ds.iteration;
  };

  for (;;) {
    run_iteration([&](int i, const Vec& qi) {
      return sstage1[i].solve(qi, spb[i].beq, spb[i].hin).solution;
    });
    if (ds.iteration >= cfg.l_max_r) break;
    if (convergence_check(ds.cost_history, cfg.eps_tol_r, cfg.l_min_stage1()))
      break;
  }
  diag.stage1_iterations = ds.iteration;
  for (int i = 0; i < ns; ++i) diag.qp_solves += sstage1[i].node_solves();

  ds.stage = Stage::fixed_binary;
  std::vector<PinnedSolver> spinned;
  spinned.reserve(ns);
  for (int i = 0; i < ns; ++i) {
    const AgentLayout& L = spb[i].layout.suppliers[i];
    std::vector<double> zf(N);
    for (int k = 0; k < N; ++k) zf[k] = ssol[i].v(step_index(L.z, 1, k));
    const std::vector<double> zr = round_and_fix(zf, cfg.z_bound);
    std::vector<std::pair<int, double>> pins;
    pins.reserve(N);
    for (int k = 0; k < N; ++k)
      pins.emplace_back(step_index(L.z, 1, k), zr[k]);
    spinned.emplace_back(spb[i].P, spb[i].Aeq, spb[i].Gin, std::move(pins));
  }

  for (;;) {
    run_iteration([&](int i, const Vec& qi) {
      return spinned[i].solve(qi, spb[i].beq, spb[i].hin, cfg.miqp.qp,
                              &ssol[i].v);
    });
    if (ds.iteration >= cfg.l_max) break;
    if (convergence_check(ds.cost_history, cfg.eps_tol, cfg.l_min_stage2()))
      break;
  }
  diag.stage2_iterations = ds.iteration - diag.stage1_iterations;
  for (int i = 0; i < ns; ++i) diag.qp_solves += spinned[i].solves();

  detail::size_inputs(out.inputs, ns, nc);
  for (int i = 0; i < ns; ++i)
    detail::take_supplier(sups[i], spb[i].layout.suppliers[i], ssol[i].v, i,
                          out.inputs);
  for (int j = 0; j < nc; ++j)
    detail::take_consumer(cons[j], cpb[j].layout.consumers[j], csol[j].v, j,
                          out.inputs);

  diag.iterations = ds.iteration;
  diag.cost_history = ds.cost_history;
  diag.final_cost = ds.cost_history.back();
  diag.wall_seconds = detail::seconds_since(t_begin);
  return out;
}

}  // namespace hubmpc
