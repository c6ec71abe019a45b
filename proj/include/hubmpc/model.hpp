#pragma once

#include <algorithm>
#include <cstdint>
#include <utility>

#include "hubmpc/core.hpp"

namespace hubmpc {

// Thermal storage hub: scalar tank temperature driven by heat pump + backup
// boiler (electrical inputs, kW) minus drawn demand (thermal, kW).
//
//   x+ = a*x + b*delta_b + e*d
//   delta_b = C_s*u_s + B_snet*u_snet     (net thermal charge, kW)
//
// Device limits switch with a per-step binary z: z=0 heat pump off, z=1
// heat pump running inside its min/max band. Rows of the input polytope
// read  G_s*u + (g - g_tilde)*z <= g,  i.e. bound g at z=0, g_tilde at z=1.
struct SupplierModel {
  double a = 0.0;              // tank retention per step
  double b = 0.0;              // degC per kW(thermal)-step
  double e = 0.0;              // coefficient on exogenous draw d (kW)
  Eigen::RowVector2d c_s;      // electrical -> thermal map [cop_hp, 1]
  Mat h_mat;                   // state polytope H x <= h (softened)
  Vec h_vec;
  Mat g_mat;                   // input polytope rows on (u_hp, u_boiler)
  Vec g_vec;                   // bound when z = 0 (pump off)
  Vec g_tilde;                 // bound when z = 1 (pump on)
  double cop_hp = 1.0;
  std::pair<double, double> hp_range{0.0, 0.0};      // electrical kW
  std::pair<double, double> boiler_range{0.0, 0.0};  // electrical kW

  int n_inputs() const { return 2; }
  int n_ineq() const { return static_cast<int>(g_mat.rows()); }

  // Multiplies u_snet (per-consumer thermal draws) into delta_b: every
  // served consumer drains the tank one-for-one.
  Eigen::RowVectorXd b_snet(int n_links) const {
    return Eigen::RowVectorXd::Constant(n_links, -1.0);
  }

  void validate() const {
    require(a > 0.0 && a <= 1.0, "tank retention must be in (0,1]");
    require(b > 0.0, "tank input gain must be positive");
    require(c_s(0) > 0.0 && c_s(1) > 0.0, "thermal map must be positive");
    require(hp_range.first > 0.0, "heat pump minimum run level must be positive");
    require(hp_range.second > hp_range.first, "heat pump range is empty");
    require(boiler_range.first == 0.0, "boiler must allow zero input");
    require(boiler_range.second > 0.0, "boiler capacity must be positive");
    require(g_mat.rows() == g_vec.size() && g_vec.size() == g_tilde.size(),
            "inconsistent input polytope");
    require(h_mat.rows() == h_vec.size() && h_mat.cols() == 1,
            "inconsistent state polytope");
    require_finite(h_mat, "H_s");
    require_finite(g_mat, "G_s");
    // z = 0 must admit u = 0 (everything off is always feasible).
    for (int r = 0; r < g_vec.size(); ++r)
      require(g_vec(r) >= 0.0, "off-state bound must admit zero input");
  }

  // Hub with a given heat pump efficiency; capacity scales both devices.
  static SupplierModel hub(double cop, double capacity_scale = 1.0) {
    SupplierModel m;
    m.a = 0.998;
    m.b = 0.1075;  // ~4000 kg water equivalent per half hour
    m.e = -m.b;
    m.cop_hp = cop;
    m.c_s << cop, 1.0;
    m.hp_range = {8.2 * capacity_scale, 12.8 * capacity_scale};
    m.boiler_range = {0.0, 20.0 * capacity_scale};
    m.h_mat.resize(2, 1);
    m.h_mat << 1.0, -1.0;
    m.h_vec.resize(2);
    m.h_vec << 80.0, -60.0;
    m.g_mat.resize(4, 2);
    m.g_mat << 1, 0, -1, 0, 0, 1, 0, -1;
    m.g_vec.resize(4);
    m.g_vec << 0.0, 0.0, m.boiler_range.second, 0.0;
    m.g_tilde.resize(4);
    m.g_tilde << m.hp_range.second, -m.hp_range.first, m.boiler_range.second, 0.0;
    m.validate();
    return m;
  }
};

// Multi-zone building: zone temperatures with nearest-neighbour coupling,
// ambient leakage and solar gain.
//
//   x+ = A_c x + B_c u + E_c d,   d = (ambient degC, solar kW/m2)
//
// Inputs are per-zone thermal heating (kW), statically bounded.
struct ConsumerModel {
  Mat a_mat;    // zones x zones
  Mat b_mat;    // zones x zones
  Mat e_mat;    // zones x 2
  Mat h_mat;    // comfort band rows, H x <= h (softened)
  Vec h_vec;
  Mat g_mat;    // input polytope G u <= g
  Vec g_vec;
  Vec g_tilde;  // == g_vec: room heaters reach 0, no switching needed

  int n_zones() const { return static_cast<int>(a_mat.rows()); }
  int n_inputs() const { return static_cast<int>(b_mat.cols()); }
  int n_ineq() const { return static_cast<int>(g_mat.rows()); }

  // Draw vector u_cnet stacks one per-zone block per serving tank; the
  // building only feels their sum.
  SpMat b_cnet(int n_tanks) const {
    const int z = n_zones();
    SpMat m(z, z * n_tanks);
    std::vector<Triplet> t;
    t.reserve(static_cast<size_t>(z) * n_tanks);
    for (int k = 0; k < n_tanks; ++k)
      for (int r = 0; r < z; ++r) t.emplace_back(r, k * z + r, 1.0);
    m.setFromTriplets(t.begin(), t.end());
    return m;
  }

  void validate() const {
    const int z = n_zones();
    require(z > 0, "building needs at least one zone");
    require(a_mat.cols() == z && b_mat.rows() == z && e_mat.rows() == z,
            "inconsistent building dynamics dimensions");
    require(h_mat.cols() == z && h_mat.rows() == h_vec.size(),
            "inconsistent comfort polytope");
    require(g_mat.cols() == n_inputs() && g_mat.rows() == g_vec.size(),
            "inconsistent input polytope");
    require(g_tilde.size() == g_vec.size() && g_tilde == g_vec,
            "room inputs are unswitched: bound vectors must coincide");
    require(g_vec.minCoeff() >= 0.0, "zero heating must be admissible");
    require_finite(a_mat, "A_c");
    const double radius = a_mat.cwiseAbs().rowwise().sum().maxCoeff();
    require(radius <= 1.0 + 1e-12, "building dynamics must be non-expansive");
  }

  // Chain-coupled building; `variant` perturbs gains deterministically.
  static ConsumerModel building(int zones, std::uint64_t variant = 0) {
    SplitMix64 rng(0x9d2c5680u + variant * 0x6c62272e07bb0142ULL);
    ConsumerModel m;
    m.a_mat = Mat::Zero(zones, zones);
    m.b_mat = Mat::Zero(zones, zones);
    m.e_mat = Mat::Zero(zones, 2);
    const double couple = 0.01;
    for (int i = 0; i < zones; ++i) {
      double diag = 0.955 + 0.01 * rng.uniform();
      m.a_mat(i, i) = diag;
      int neighbours = 0;
      if (i > 0) {
        m.a_mat(i, i - 1) = couple;
        ++neighbours;
      }
      if (i + 1 < zones) {
        m.a_mat(i, i + 1) = couple;
        ++neighbours;
      }
      m.e_mat(i, 0) = 1.0 - diag - neighbours * couple;  // ambient leak
      m.e_mat(i, 1) = 0.02 + 0.03 * rng.uniform();       // solar gain
      m.b_mat(i, i) = 0.30 + 0.06 * rng.uniform();
    }
    m.h_mat.resize(2 * zones, zones);
    m.h_mat << Mat::Identity(zones, zones), -Mat::Identity(zones, zones);
    m.h_vec.resize(2 * zones);
    m.h_vec << Vec::Constant(zones, 25.0), Vec::Constant(zones, -23.0);
    m.g_mat.resize(2 * zones, zones);
    m.g_mat << Mat::Identity(zones, zones), -Mat::Identity(zones, zones);
    m.g_vec.resize(2 * zones);
    m.g_vec << Vec::Constant(zones, 2.5), Vec::Constant(zones, 0.0);
    m.g_tilde = m.g_vec;
    m.validate();
    return m;
  }
};

// Who serves whom. L_i = consumers of supplier i; T_j = tanks serving
// consumer j. Draw variables u_cnet_j stack |T_j| per-zone blocks in
// ascending supplier order.
struct Topology {
  int n_suppliers = 0;
  int n_consumers = 0;
  std::vector<std::pair<int, int>> links;  // (supplier, consumer), sorted
  std::vector<std::vector<int>> links_of_supplier;
  std::vector<std::vector<int>> tanks_of_consumer;
  std::vector<int> zones;  // per consumer

  static Topology make(int ns, int nc, std::vector<std::pair<int, int>> lks,
                       std::vector<int> zone_counts) {
    require(ns > 0 && nc > 0, "topology needs at least one agent per side");
    require(static_cast<int>(zone_counts.size()) == nc,
            "zone count per consumer required");
    std::sort(lks.begin(), lks.end());
    lks.erase(std::unique(lks.begin(), lks.end()), lks.end());
    Topology t;
    t.n_suppliers = ns;
    t.n_consumers = nc;
    t.links = std::move(lks);
    t.zones = std::move(zone_counts);
    t.links_of_supplier.assign(ns, {});
    t.tanks_of_consumer.assign(nc, {});
    for (auto [i, j] : t.links) {
      require(i >= 0 && i < ns && j >= 0 && j < nc, "link out of range");
      t.links_of_supplier[i].push_back(j);
      t.tanks_of_consumer[j].push_back(i);
    }
    for (int j = 0; j < nc; ++j)
      require(!t.tanks_of_consumer[j].empty(), "every consumer needs a tank");
    return t;
  }

  // Band pattern: contiguous windows over the larger side with shared
  // boundary agents, so the chain stays connected at every scale.
  static Topology banded(int ns, int nc, int zones_per_consumer) {
    std::vector<std::pair<int, int>> lks;
    auto bound = [](int k, int parts, int total) {
      return static_cast<int>(std::lround(static_cast<double>(k) * (total - 1) / parts));
    };
    if (ns <= nc) {
      for (int i = 0; i < ns; ++i)
        for (int j = bound(i, ns, nc); j <= bound(i + 1, ns, nc); ++j)
          lks.emplace_back(i, j);
    } else {
      for (int j = 0; j < nc; ++j)
        for (int i = bound(j, nc, ns); i <= bound(j + 1, nc, ns); ++i)
          lks.emplace_back(i, j);
    }
    return make(ns, nc, std::move(lks), std::vector<int>(nc, zones_per_consumer));
  }

  int n_links() const { return static_cast<int>(links.size()); }

  int link_index(int i, int j) const {
    auto it = std::lower_bound(links.begin(), links.end(), std::make_pair(i, j));
    require(it != links.end() && *it == std::make_pair(i, j), "no such link");
    return static_cast<int>(it - links.begin());
  }

  int link_pos_in_supplier(int i, int j) const {
    const auto& l = links_of_supplier[i];
    auto it = std::lower_bound(l.begin(), l.end(), j);
    require(it != l.end() && *it == j, "consumer not served by supplier");
    return static_cast<int>(it - l.begin());
  }

  int tank_pos_in_consumer(int i, int j) const {
    const auto& l = tanks_of_consumer[j];
    auto it = std::lower_bound(l.begin(), l.end(), i);
    require(it != l.end() && *it == i, "supplier does not serve consumer");
    return static_cast<int>(it - l.begin());
  }

  int ucnet_width(int j) const {
    return zones[j] * static_cast<int>(tanks_of_consumer[j].size());
  }

  // Selector used in the supply/draw balance: maps u_cnet_j onto the
  // per-consumer slots of supplier i's net-demand vector.
  SpMat c_cnet(int i, int j) const {
    const int rows = static_cast<int>(links_of_supplier[i].size());
    SpMat m(rows, ucnet_width(j));
    std::vector<Triplet> t;
    const int row = link_pos_in_supplier(i, j);
    const int block = tank_pos_in_consumer(i, j);
    for (int z = 0; z < zones[j]; ++z)
      t.emplace_back(row, block * zones[j] + z, 1.0);
    m.setFromTriplets(t.begin(), t.end());
    return m;
  }

  // Strip all links: suppliers see no consumers (local-information mode).
  Topology without_links() const {
    Topology t = *this;
    t.links.clear();
    for (auto& l : t.links_of_supplier) l.clear();
    for (auto& l : t.tanks_of_consumer) l.clear();
    return t;
  }
};

// Exogenous signals on the control grid.
struct Disturbances {
  std::vector<Vec> d_s;  // per supplier: external draw (kW), length >= steps
  std::vector<Mat> d_c;  // per consumer: steps x 2 (ambient degC, solar kW/m2)

  int n_steps() const {
    int n = d_s.empty() ? 0 : static_cast<int>(d_s[0].size());
    for (const auto& v : d_s) n = std::min(n, static_cast<int>(v.size()));
    for (const auto& m : d_c) n = std::min(n, static_cast<int>(m.rows()));
    return n;
  }

  void validate(int ns, int nc, int min_steps) const {
    require(static_cast<int>(d_s.size()) == ns, "one draw series per supplier");
    require(static_cast<int>(d_c.size()) == nc, "one weather block per consumer");
    require(n_steps() >= min_steps, "disturbance series too short for run");
    for (const auto& v : d_s) {
      require_finite(v, "supplier draw series");
      require(v.minCoeff() >= 0.0, "draw series must be nonnegative");
    }
    for (const auto& m : d_c) require_finite(m, "weather series");
  }
};

inline double tank_step(const SupplierModel& m, double x, double delta_b, double d) {
  require(std::isfinite(x) && std::isfinite(delta_b) && std::isfinite(d),
          "tank step inputs must be finite");
  return m.a * x + m.b * delta_b + m.e * d;
}

inline Vec building_step(const ConsumerModel& m, const Vec& x, const Vec& u, const Vec& d) {
  require(x.size() == m.n_zones(), "state dimension mismatch");
  require(u.size() == m.n_inputs(), "input dimension mismatch");
  require(d.size() == m.e_mat.cols(), "disturbance dimension mismatch");
  require_finite(x, "building state");
  require_finite(u, "building input");
  require_finite(d, "building disturbance");
  return m.a_mat * x + m.b_mat * u + m.e_mat * d;
}

// Structural single-step balance equations around supplier i, in indexed
// form: sum of coeff * var(kind, agent, component) = 0 per equation.
enum class VarKind { u_s, delta_b, u_snet, u_c, u_cnet };

struct LinearTerm {
  VarKind kind;
  int agent;
  int component;
  double coeff;
};

struct BalanceEquation {
  std::vector<LinearTerm> terms;
};

inline std::vector<BalanceEquation> balance_rows(const Topology& topo,
                                                 const SupplierModel& sup,
                                                 const std::vector<ConsumerModel>& consumers,
                                                 int supplier) {
  require(supplier >= 0 && supplier < topo.n_suppliers, "supplier out of range");
  const auto& served = topo.links_of_supplier[supplier];
  std::vector<BalanceEquation> rows;

  // delta_b = C_s u_s + B_snet u_snet
  BalanceEquation def;
  def.terms.push_back({VarKind::delta_b, supplier, 0, 1.0});
  def.terms.push_back({VarKind::u_s, supplier, 0, -sup.c_s(0)});
  def.terms.push_back({VarKind::u_s, supplier, 1, -sup.c_s(1)});
  for (int pos = 0; pos < static_cast<int>(served.size()); ++pos)
    def.terms.push_back({VarKind::u_snet, supplier, pos, 1.0});
  rows.push_back(std::move(def));

  // C_snet u_snet = sum_j C_cnet u_cnet_j : one row per served consumer.
  for (int pos = 0; pos < static_cast<int>(served.size()); ++pos) {
    const int j = served[pos];
    BalanceEquation eq;
    eq.terms.push_back({VarKind::u_snet, supplier, pos, 1.0});
    const int block = topo.tank_pos_in_consumer(supplier, j);
    for (int z = 0; z < topo.zones[j]; ++z)
      eq.terms.push_back({VarKind::u_cnet, j, block * topo.zones[j] + z, -1.0});
    rows.push_back(std::move(eq));
  }

  // u_c = B_cnet u_cnet for each served consumer.
  for (int j : served) {
    const int tanks = static_cast<int>(topo.tanks_of_consumer[j].size());
    require(consumers[j].n_zones() == topo.zones[j], "zone count mismatch");
    for (int z = 0; z < topo.zones[j]; ++z) {
      BalanceEquation eq;
      eq.terms.push_back({VarKind::u_c, j, z, 1.0});
      for (int k = 0; k < tanks; ++k)
        eq.terms.push_back({VarKind::u_cnet, j, k * topo.zones[j] + z, -1.0});
      rows.push_back(std::move(eq));
    }
  }
  return rows;
}

}  // namespace hubmpc
