#pragma once

// Horizon-N condensing: per-agent QP/MIQP blocks and the coupled
// network-wide problem. Decision vector per agent, in block order
//   v = (u, eps, x, z, u_net [, r])
// with step-major layout inside each block. x(0) is eliminated into the
// right-hand side; x spans x(1..N).

#include <optional>

#include "hubmpc/core.hpp"
#include "hubmpc/model.hpp"

namespace hubmpc {

struct Weights {
  double slack = 200.0;  // R, on every softened state row
  double delta = 1e-6;   // uniform curvature floor
  double rho = 0.08;     // per-link copy regularization

  void validate() const {
    require(slack > 0.0, "slack weight must be strictly positive");
    require(delta >= 0.0 && rho >= 0.0, "weights must be nonnegative");
  }
};

struct SupplierHorizon {
  double x0 = 0.0;
  Vec d;             // N exogenous draw samples (kW)
  Vec input_weight;  // N tariff weights applied to both devices
};

struct ConsumerHorizon {
  Vec x0;                    // zone temperatures
  Mat d;                     // N x 2 (ambient, solar)
  double input_weight = 1.0; // Q_c scale on room inputs
};

struct AgentLayout {
  Span u, eps, x, z, unet, r;
  std::vector<Span> r_links;  // per served consumer, within r
  int nu = 0, neps = 0, nx = 0, nunet = 0;  // per-step widths
};

struct VarLayout {
  int total = 0;
  int horizon = 0;
  std::vector<AgentLayout> suppliers;
  std::vector<AgentLayout> consumers;
};

struct BinaryRef {
  int var;       // column index
  int supplier;  // owning agent
  int step;
};

struct LiftedProblem {
  SpMat P;  // solver convention: cost = ½ vᵀPv + qᵀv + constant
  Vec q;
  SpMat Aeq;
  Vec beq;
  SpMat Gin;
  Vec hin;
  Vec cost_diag;  // agent stage cost: Σ cost_diag(i)·v(i)² (no δ/ρ/prices)
  VarLayout layout;
  std::vector<BinaryRef> binaries;
  std::vector<BinaryRef> relaxed;
  double constant = 0.0;
  double pure_constant = 0.0;

  int n() const { return static_cast<int>(q.size()); }
  double objective(const Vec& v) const {
    return 0.5 * v.dot(P * v) + q.dot(v) + constant;
  }
  double stage_cost(const Vec& v) const {
    return cost_diag.dot(v.cwiseProduct(v)) + pure_constant;
  }
};

inline int step_index(const Span& block, int width, int k, int comp = 0) {
  return block.offset + k * width + comp;
}

// --- standalone lifting pieces -------------------------------------------

struct DynamicsBlocks {
  SpMat x_coef;   // (I - Ã) over x(1..N)
  SpMat in_coef;  // -(I_N ⊗ B) over stacked inputs
  Vec rhs;        // Ẽ d + c_x0
};

inline DynamicsBlocks lift_dynamics(const Mat& A, const Mat& B, const Mat& E, int N,
                                    const Vec& x0, const Mat& d_forecast) {
  const int nx = static_cast<int>(A.rows());
  const int nu = static_cast<int>(B.cols());
  require(N >= 1, "horizon must be at least 1");
  require(A.cols() == nx && B.rows() == nx && E.rows() == nx,
          "dynamics dimension mismatch");
  require(x0.size() == nx, "x0 dimension mismatch");
  require(d_forecast.rows() >= N && d_forecast.cols() == E.cols(),
          "forecast too short for horizon");
  DynamicsBlocks out;
  std::vector<Triplet> xs, us;
  for (int k = 0; k < N; ++k) {
    for (int r = 0; r < nx; ++r) {
      xs.emplace_back(k * nx + r, k * nx + r, 1.0);
      if (k > 0)
        for (int c = 0; c < nx; ++c)
          if (A(r, c) != 0.0) xs.emplace_back(k * nx + r, (k - 1) * nx + c, -A(r, c));
      for (int c = 0; c < nu; ++c)
        if (B(r, c) != 0.0) us.emplace_back(k * nx + r, k * nu + c, -B(r, c));
    }
  }
  out.x_coef.resize(N * nx, N * nx);
  out.x_coef.setFromTriplets(xs.begin(), xs.end());
  out.in_coef.resize(N * nx, N * nu);
  out.in_coef.setFromTriplets(us.begin(), us.end());
  out.rhs.resize(N * nx);
  for (int k = 0; k < N; ++k)
    out.rhs.segment(k * nx, nx) = E * d_forecast.row(k).transpose();
  out.rhs.head(nx) += A * x0;
  return out;
}

struct ConstraintBlocks {
  SpMat gu;        // N·ng x N·nu, block diagonal G
  SpMat gz;        // N·ng x N, (g - g̃) column per step
  Vec g_rhs;       // tiled g
  SpMat hx;        // N·nh x N·nx, block diagonal H
  SpMat heps;      // N·nh x N·nh, -I on the softening slacks
  Vec h_rhs;       // tiled h
  SpMat eps_coef;  // N·nh x N·nh, -I (slack nonnegativity rows)
  Vec eps_rhs;     // zeros
  int eps_per_step = 0;
};

inline ConstraintBlocks lift_constraints(const Mat& H, const Mat& G, const Vec& h,
                                         const Vec& g, const Vec& g_tilde, int N) {
  require(H.rows() == h.size() && G.rows() == g.size(), "polytope rows mismatch");
  require(g_tilde.size() == g.size(), "switched bound size mismatch");
  const int ng = static_cast<int>(G.rows());
  const int nu = static_cast<int>(G.cols());
  const int nh = static_cast<int>(H.rows());
  const int nx = static_cast<int>(H.cols());
  ConstraintBlocks out;
  std::vector<Triplet> gus, gzs, hxs;
  out.g_rhs.resize(N * ng);
  out.h_rhs.resize(N * nh);
  for (int k = 0; k < N; ++k) {
    for (int r = 0; r < ng; ++r) {
      for (int c = 0; c < nu; ++c)
        if (G(r, c) != 0.0) gus.emplace_back(k * ng + r, k * nu + c, G(r, c));
      double sw = g(r) - g_tilde(r);
      if (sw != 0.0) gzs.emplace_back(k * ng + r, k, sw);
      out.g_rhs(k * ng + r) = g(r);
    }
    for (int r = 0; r < nh; ++r) {
      for (int c = 0; c < nx; ++c)
        if (H(r, c) != 0.0) hxs.emplace_back(k * nh + r, k * nx + c, H(r, c));
      out.h_rhs(k * nh + r) = h(r);
    }
  }
  out.gu.resize(N * ng, N * nu);
  out.gu.setFromTriplets(gus.begin(), gus.end());
  out.gz.resize(N * ng, N);
  out.gz.setFromTriplets(gzs.begin(), gzs.end());
  out.hx.resize(N * nh, N * nx);
  out.hx.setFromTriplets(hxs.begin(), hxs.end());
  out.heps.resize(N * nh, N * nh);
  out.heps.setIdentity();
  out.heps *= -1.0;
  out.eps_coef = out.heps;
  out.eps_rhs = Vec::Zero(N * nh);
  out.eps_per_step = nh;
  return out;
}

// --- full problem assembly -------------------------------------------------

namespace detail {

struct Assembly {
  std::vector<Triplet> p, aeq, gin;
  std::vector<double> q, cdiag, beq, hin;
  int cols = 0;

  int new_cols(int k) {
    int at = cols;
    cols += k;
    q.resize(cols, 0.0);
    cdiag.resize(cols, 0.0);
    return at;
  }
  int eq_row() {
    beq.push_back(0.0);
    return static_cast<int>(beq.size()) - 1;
  }
  int in_row(double bound) {
    hin.push_back(bound);
    return static_cast<int>(hin.size()) - 1;
  }
  void quad(int col, double w) { p.emplace_back(col, col, 2.0 * w); }
  void finish(LiftedProblem& out) const {
    out.P.resize(cols, cols);
    out.P.setFromTriplets(p.begin(), p.end());
    out.Aeq.resize(static_cast<int>(beq.size()), cols);
    out.Aeq.setFromTriplets(aeq.begin(), aeq.end());
    out.Gin.resize(static_cast<int>(hin.size()), cols);
    out.Gin.setFromTriplets(gin.begin(), gin.end());
    out.q = Eigen::Map<const Vec>(q.data(), cols);
    out.cost_diag = Eigen::Map<const Vec>(cdiag.data(), cols);
    out.beq = Eigen::Map<const Vec>(beq.data(), beq.size());
    out.hin = Eigen::Map<const Vec>(hin.data(), hin.size());
  }
};

inline void nonneg_rows(Assembly& as, const Span& s) {
  for (int i = 0; i < s.size; ++i)
    as.gin.emplace_back(as.in_row(0.0), s.offset + i, -1.0);
}

// Shared body for supplier blocks. When `r_copy` is true the balance rows
// couple u_net to a local copy block r; otherwise `consumer_cols` must give,
// per served consumer, the column base callback into that consumer's u_cnet.
inline AgentLayout supplier_block(Assembly& as, const SupplierModel& m,
                                  const Topology& topo, int i, const Weights& w,
                                  const SupplierHorizon& hz, int N, int N_relax,
                                  bool r_copy, const std::vector<Vec>* prices,
                                  std::vector<BinaryRef>* binaries,
                                  std::vector<BinaryRef>* relaxed) {
  m.validate();
  w.validate();
  require(hz.d.size() >= N, "draw forecast too short");
  require(hz.input_weight.size() >= N, "tariff horizon too short");
  const auto& served = topo.links_of_supplier[i];
  const int nl = static_cast<int>(served.size());

  AgentLayout L;
  L.nu = m.n_inputs();
  L.neps = static_cast<int>(m.h_mat.rows());
  L.nx = 1;
  L.nunet = nl;
  L.u = {as.new_cols(N * L.nu), N * L.nu};
  L.eps = {as.new_cols(N * L.neps), N * L.neps};
  L.x = {as.new_cols(N), N};
  L.z = {as.new_cols(N), N};
  L.unet = {as.new_cols(N * nl), N * nl};
  if (r_copy) {
    int r_at = as.cols;
    for (int pos = 0; pos < nl; ++pos) {
      int wj = topo.ucnet_width(served[pos]);
      L.r_links.push_back({as.new_cols(N * wj), N * wj});
    }
    L.r = {r_at, as.cols - r_at};
  }

  // Costs.
  for (int k = 0; k < N; ++k) {
    for (int c = 0; c < L.nu; ++c) {
      int col = step_index(L.u, L.nu, k, c);
      as.quad(col, hz.input_weight(k) + w.delta);
      as.cdiag[col] = hz.input_weight(k);
    }
    for (int c = 0; c < L.neps; ++c) {
      int col = step_index(L.eps, L.neps, k, c);
      as.quad(col, w.slack + w.delta);
      as.cdiag[col] = w.slack;
    }
    as.quad(step_index(L.x, 1, k), w.delta);
    as.quad(step_index(L.z, 1, k), w.delta);
    for (int c = 0; c < nl; ++c) as.quad(step_index(L.unet, nl, k, c), w.delta);
  }
  if (r_copy) {
    for (int pos = 0; pos < nl; ++pos) {
      const Span& rs = L.r_links[pos];
      for (int idx = 0; idx < rs.size; ++idx) {
        as.quad(rs.offset + idx, w.rho + w.delta);
        if (prices && !(*prices).empty()) {
          require(static_cast<int>(prices->size()) == nl, "one price vector per link");
          require((*prices)[pos].size() == rs.size, "price slot mismatch");
          as.q[rs.offset + idx] = -(*prices)[pos](idx);
        }
      }
    }
  }

  // Dynamics: x(k+1) = a x(k) + b (C_s u(k) - Σ u_net(k)) + e d(k).
  for (int k = 0; k < N; ++k) {
    int row = as.eq_row();
    as.aeq.emplace_back(row, step_index(L.x, 1, k), 1.0);
    if (k > 0) as.aeq.emplace_back(row, step_index(L.x, 1, k - 1), -m.a);
    as.aeq.emplace_back(row, step_index(L.u, L.nu, k, 0), -m.b * m.c_s(0));
    as.aeq.emplace_back(row, step_index(L.u, L.nu, k, 1), -m.b * m.c_s(1));
    for (int c = 0; c < nl; ++c)
      as.aeq.emplace_back(row, step_index(L.unet, nl, k, c), m.b);
    as.beq[row] = m.e * hz.d(k) + (k == 0 ? m.a * hz.x0 : 0.0);
  }

  // Balance to copies: u_net(k,pos) = Σ_zone r_j(k, block·zones+zone).
  if (r_copy) {
    for (int pos = 0; pos < nl; ++pos) {
      int j = served[pos];
      int zones = topo.zones[j];
      int wj = topo.ucnet_width(j);
      int block = topo.tank_pos_in_consumer(i, j);
      for (int k = 0; k < N; ++k) {
        int row = as.eq_row();
        as.aeq.emplace_back(row, step_index(L.unet, nl, k, pos), 1.0);
        for (int zz = 0; zz < zones; ++zz)
          as.aeq.emplace_back(
              row, L.r_links[pos].offset + k * wj + block * zones + zz, -1.0);
      }
    }
  }

  // Switched input polytope, softened state band, slack and box rows.
  for (int k = 0; k < N; ++k) {
    for (int r = 0; r < m.n_ineq(); ++r) {
      int row = as.in_row(m.g_vec(r));
      for (int c = 0; c < L.nu; ++c)
        if (m.g_mat(r, c) != 0.0)
          as.gin.emplace_back(row, step_index(L.u, L.nu, k, c), m.g_mat(r, c));
      double sw = m.g_vec(r) - m.g_tilde(r);
      if (sw != 0.0) as.gin.emplace_back(row, step_index(L.z, 1, k), sw);
    }
    for (int r = 0; r < L.neps; ++r) {
      int row = as.in_row(m.h_vec(r));
      as.gin.emplace_back(row, step_index(L.x, 1, k), m.h_mat(r, 0));
      as.gin.emplace_back(row, step_index(L.eps, L.neps, k, r), -1.0);
    }
    int up = as.in_row(1.0);
    as.gin.emplace_back(up, step_index(L.z, 1, k), 1.0);
    int lo = as.in_row(0.0);
    as.gin.emplace_back(lo, step_index(L.z, 1, k), -1.0);
    (binaries && k < N_relax ? *binaries : *relaxed)
        .push_back({step_index(L.z, 1, k), i, k});
  }
  nonneg_rows(as, L.eps);
  nonneg_rows(as, L.unet);
  if (r_copy) nonneg_rows(as, L.r);
  return L;
}

inline AgentLayout consumer_block(Assembly& as, const ConsumerModel& m,
                                  const Topology& topo, int j, const Weights& w,
                                  const ConsumerHorizon& hz, int N,
                                  const Vec* price, double extra_unet_quad) {
  m.validate();
  w.validate();
  require(hz.x0.size() == m.n_zones(), "zone state mismatch");
  require(hz.d.rows() >= N && hz.d.cols() == 2, "weather horizon too short");
  const int zones = m.n_zones();
  const int wj = topo.ucnet_width(j);

  AgentLayout L;
  L.nu = m.n_inputs();
  L.neps = static_cast<int>(m.h_mat.rows());
  L.nx = zones;
  L.nunet = wj;
  L.u = {as.new_cols(N * L.nu), N * L.nu};
  L.eps = {as.new_cols(N * L.neps), N * L.neps};
  L.x = {as.new_cols(N * zones), N * zones};
  L.z = {as.cols, 0};
  L.unet = {as.new_cols(N * wj), N * wj};

  for (int k = 0; k < N; ++k) {
    for (int c = 0; c < L.nu; ++c) {
      int col = step_index(L.u, L.nu, k, c);
      as.quad(col, hz.input_weight + w.delta);
      as.cdiag[col] = hz.input_weight;
    }
    for (int c = 0; c < L.neps; ++c) {
      int col = step_index(L.eps, L.neps, k, c);
      as.quad(col, w.slack + w.delta);
      as.cdiag[col] = w.slack;
    }
    for (int c = 0; c < zones; ++c) as.quad(step_index(L.x, zones, k, c), w.delta);
    for (int c = 0; c < wj; ++c) {
      int col = step_index(L.unet, wj, k, c);
      as.quad(col, w.delta + extra_unet_quad);
      if (price && price->size())
        as.q[col] = (*price)(k * wj + c);
    }
  }

  for (int k = 0; k < N; ++k) {
    for (int r = 0; r < zones; ++r) {
      int row = as.eq_row();
      as.aeq.emplace_back(row, step_index(L.x, zones, k, r), 1.0);
      if (k > 0)
        for (int c = 0; c < zones; ++c)
          if (m.a_mat(r, c) != 0.0)
            as.aeq.emplace_back(row, step_index(L.x, zones, k - 1, c), -m.a_mat(r, c));
      for (int c = 0; c < L.nu; ++c)
        if (m.b_mat(r, c) != 0.0)
          as.aeq.emplace_back(row, step_index(L.u, L.nu, k, c), -m.b_mat(r, c));
      double rhs = m.e_mat.row(r).dot(hz.d.row(k));
      if (k == 0) rhs += m.a_mat.row(r).dot(hz.x0);
      as.beq[row] = rhs;
    }
    // u_c = B_cnet u_cnet: room heat equals the sum of its per-tank draws.
    const int tanks = wj / zones;
    for (int r = 0; r < zones; ++r) {
      int row = as.eq_row();
      as.aeq.emplace_back(row, step_index(L.u, L.nu, k, r), 1.0);
      for (int t = 0; t < tanks; ++t)
        as.aeq.emplace_back(row, step_index(L.unet, wj, k, t * zones + r), -1.0);
    }
    for (int r = 0; r < m.n_ineq(); ++r) {
      int row = as.in_row(m.g_vec(r));
      for (int c = 0; c < L.nu; ++c)
        if (m.g_mat(r, c) != 0.0)
          as.gin.emplace_back(row, step_index(L.u, L.nu, k, c), m.g_mat(r, c));
    }
    for (int r = 0; r < L.neps; ++r) {
      int row = as.in_row(m.h_vec(r));
      for (int c = 0; c < zones; ++c)
        if (m.h_mat(r, c) != 0.0)
          as.gin.emplace_back(row, step_index(L.x, zones, k, c), m.h_mat(r, c));
      as.gin.emplace_back(row, step_index(L.eps, L.neps, k, r), -1.0);
    }
  }
  nonneg_rows(as, L.eps);
  nonneg_rows(as, L.unet);
  return L;
}

}  // namespace detail

// Local supplier problem: balance rows run against the copy block r, prices
// enter as -pᵀr. Empty `prices` means all-zero prices.
inline LiftedProblem build_supplier_problem(const SupplierModel& m,
                                            const Topology& topo, int i,
                                            const Weights& w,
                                            const SupplierHorizon& hz,
                                            const std::vector<Vec>& prices, int N,
                                            int N_relax) {
  require(i >= 0 && i < topo.n_suppliers, "supplier index out of range");
  LiftedProblem out;
  detail::Assembly as;
  out.layout.horizon = N;
  out.layout.suppliers.resize(topo.n_suppliers);
  out.layout.suppliers[i] = detail::supplier_block(
      as, m, topo, i, w, hz, N, N_relax, true, prices.empty() ? nullptr : &prices,
      &out.binaries, &out.relaxed);
  as.finish(out);
  out.layout.total = out.n();
  return out;
}

// Local consumer problem; price enters as +pᵀu_cnet. Consumers carry no
// binaries (room heaters reach zero inside their static polytope).
inline LiftedProblem build_consumer_problem(const ConsumerModel& m,
                                            const Topology& topo, int j,
                                            const Weights& w,
                                            const ConsumerHorizon& hz,
                                            const Vec& price, int N) {
  require(j >= 0 && j < topo.n_consumers, "consumer index out of range");
  require(price.size() == 0 || price.size() == N * topo.ucnet_width(j),
          "price vector must cover the draw horizon");
  LiftedProblem out;
  detail::Assembly as;
  out.layout.horizon = N;
  out.layout.consumers.resize(topo.n_consumers);
  out.layout.consumers[j] = detail::consumer_block(
      as, m, topo, j, w, hz, N, price.size() ? &price : nullptr, 0.0);
  as.finish(out);
  out.layout.total = out.n();
  return out;
}

// Network-wide problem over all agents with shared u_cnet (no copies, no
// prices). By default carries the same ρ/δ regularization the distributed
// fixed point optimizes — one ρ‖u_cnet_j‖² per serving tank — so the two
// controllers optimize identical objectives; stage costs stay unregularized
// in cost_diag either way.
inline LiftedProblem build_centralized(const std::vector<SupplierModel>& sups,
                                       const std::vector<ConsumerModel>& cons,
                                       const Topology& topo, const Weights& w,
                                       const std::vector<SupplierHorizon>& shz,
                                       const std::vector<ConsumerHorizon>& chz,
                                       int N, int N_relax,
                                       bool full_integrality = false,
                                       bool consensus_reg = true) {
  require(static_cast<int>(sups.size()) == topo.n_suppliers, "supplier count");
  require(static_cast<int>(cons.size()) == topo.n_consumers, "consumer count");
  require(shz.size() == sups.size(), "supplier horizons");
  require(chz.size() == cons.size(), "consumer horizons");
  LiftedProblem out;
  detail::Assembly as;
  out.layout.horizon = N;
  const int nrelax_eff = full_integrality ? N : N_relax;
  for (int i = 0; i < topo.n_suppliers; ++i)
    out.layout.suppliers.push_back(
        detail::supplier_block(as, sups[i], topo, i, w, shz[i], N, nrelax_eff,
                               false, nullptr, &out.binaries, &out.relaxed));
  for (int j = 0; j < topo.n_consumers; ++j) {
    // One (ρ+δ)‖·‖² per copy a supplier would hold of this consumer's draws,
    // on top of the δ the shared variable itself carries: at consensus the
    // network objective equals the sum of the local ones exactly.
    double mult = static_cast<double>(topo.tanks_of_consumer[j].size());
    double reg = consensus_reg ? (w.rho + w.delta) * mult : 0.0;
    out.layout.consumers.push_back(
        detail::consumer_block(as, cons[j], topo, j, w, chz[j], N, nullptr, reg));
  }
  // Tank-side balance against the consumers' shared draw variables.
  for (int i = 0; i < topo.n_suppliers; ++i) {
    const auto& served = topo.links_of_supplier[i];
    const AgentLayout& Ls = out.layout.suppliers[i];
    for (int pos = 0; pos < static_cast<int>(served.size()); ++pos) {
      int j = served[pos];
      const AgentLayout& Lc = out.layout.consumers[j];
      int zones = topo.zones[j];
      int wj = topo.ucnet_width(j);
      int block = topo.tank_pos_in_consumer(i, j);
      for (int k = 0; k < N; ++k) {
        int row = as.eq_row();
        as.aeq.emplace_back(row, step_index(Ls.unet, Ls.nunet, k, pos), 1.0);
        for (int zz = 0; zz < zones; ++zz)
          as.aeq.emplace_back(row, step_index(Lc.unet, wj, k, block * zones + zz),
                              -1.0);
      }
    }
  }
  as.finish(out);
  out.layout.total = out.n();
  return out;
}

}  // namespace hubmpc
