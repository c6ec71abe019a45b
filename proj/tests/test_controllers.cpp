#include <catch2/catch_amalgamated.hpp>

#include <hubmpc/controllers.hpp>

using namespace hubmpc;

namespace {

SupplierHorizon sup_horizon(double x0, double draw, double tariff, int N) {
  SupplierHorizon h;
  h.x0 = x0;
  h.d = Vec::Constant(N, draw);
  h.input_weight = Vec::Constant(N, tariff);
  return h;
}

ConsumerHorizon con_horizon(const Vec& x0, double ambient, double solar, int N) {
  ConsumerHorizon h;
  h.x0 = x0;
  h.d.resize(N, 2);
  h.d.col(0).setConstant(ambient);
  h.d.col(1).setConstant(solar);
  return h;
}

// Tank that holds temperature exactly when idle.
SupplierModel lossless_hub() {
  SupplierModel m = SupplierModel::hub(3.53);
  m.a = 1.0;
  m.validate();
  return m;
}

// Rooms with no leak and no gains: comfortable forever at zero input.
ConsumerModel still_building(int zones) {
  ConsumerModel m;
  m.a_mat = Mat::Identity(zones, zones);
  m.b_mat = Mat::Identity(zones, zones);
  m.e_mat = Mat::Zero(zones, 2);
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

DistributedConfig toy_cfg(int N, int n_relax) {
  DistributedConfig c;
  c.horizon = N;
  c.n_relax = n_relax;
  c.l_min = 2;
  return c;
}

}  // namespace

TEST_CASE("price update follows the subgradient arithmetic") {
  Vec p = Vec::Constant(3, 1.0);
  Vec u = Vec::Constant(3, 5.0);
  Vec r = Vec::Constant(3, 3.0);
  Vec next = price_update(p, u, r, 0.15);
  for (int i = 0; i < 3; ++i) REQUIRE(next(i) == Catch::Approx(1.3));

  REQUIRE((price_update(p, r, r, 0.15) - p).norm() == 0.0);

  Vec walk = Vec::Zero(3);
  for (int l = 1; l <= 10; ++l) {
    walk = price_update(walk, u, r, 0.15);
    REQUIRE(walk(0) == Catch::Approx(0.15 * 2.0 * l));
  }

  REQUIRE_THROWS_AS(price_update(p, Vec::Zero(2), r, 0.15),
                    std::invalid_argument);
}

TEST_CASE("convergence check wants small variation and enough iterations") {
  std::vector<double> flat(150, 7.25);
  REQUIRE(convergence_check(flat, 1e-6, 150));
  REQUIRE_FALSE(convergence_check(flat, 1e-6, 151));

  std::vector<double> wobble;
  for (int i = 0; i < 200; ++i) wobble.push_back(i % 2 ? 1.0 + 2e-3 : 1.0);
  REQUIRE_FALSE(convergence_check(wobble, 1e-3, 150));
  REQUIRE(convergence_check(wobble, 3e-3, 150));

  std::vector<double> young(10, 1.0);
  REQUIRE_FALSE(convergence_check(young, 1e-3, 150));
  REQUIRE_FALSE(convergence_check({1.0}, 1e3, 0));
  REQUIRE_FALSE(convergence_check({}, 1e3, 0));
}

TEST_CASE("aggregated prices sum per serving tank") {
  Topology topo = Topology::make(2, 2, {{0, 0}, {0, 1}, {1, 1}}, {1, 1});
  const int N = 4;
  std::vector<Vec> p(topo.n_links());
  p[topo.link_index(0, 0)] = Vec::LinSpaced(N * 1, 1.0, 4.0);
  p[topo.link_index(0, 1)] = Vec::Constant(N * 2, 0.5);
  p[topo.link_index(1, 1)] = Vec::Constant(N * 2, 0.5);

  REQUIRE((aggregate_prices(p, topo, 0) - p[topo.link_index(0, 0)]).norm() ==
          0.0);
  Vec both = aggregate_prices(p, topo, 1);
  REQUIRE(both.size() == N * 2);
  REQUIRE(both.minCoeff() == Catch::Approx(1.0));
  REQUIRE(both.maxCoeff() == Catch::Approx(1.0));

  // total priced volume agrees whether summed per link or per consumer
  SplitMix64 rng(31);
  std::vector<Vec> u(topo.n_consumers);
  for (int j = 0; j < topo.n_consumers; ++j) {
    u[j] = Vec::Zero(N * topo.ucnet_width(j));
    for (int s = 0; s < u[j].size(); ++s) u[j](s) = rng.uniform(0.0, 2.0);
    for (int l = 0; l < topo.n_links(); ++l)
      for (int s = 0; s < p[l].size(); ++s) p[l](s) = rng.uniform(-1.0, 1.0);
  }
  double per_link = 0.0;
  for (int l = 0; l < topo.n_links(); ++l)
    per_link += p[l].dot(u[topo.links[l].second]);
  double per_consumer = 0.0;
  for (int j = 0; j < topo.n_consumers; ++j)
    per_consumer += aggregate_prices(p, topo, j).dot(u[j]);
  REQUIRE(per_link == Catch::Approx(per_consumer).margin(1e-12));

  Topology bare = topo.without_links();
  REQUIRE_THROWS_AS(aggregate_prices(p, bare, 0), std::invalid_argument);
}

TEST_CASE("distributed config validation") {
  DistributedConfig c;
  REQUIRE_NOTHROW(c.validate());
  c.kappa = 0.0;
  REQUIRE_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.l_min = 400;  // above the stage-1 cap
  REQUIRE_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.l_min = 900;
  c.l_min_relaxed = 100;
  REQUIRE_THROWS_AS(c.validate(), std::invalid_argument);  // stage-2 floor above l_max
  c.l_min_fixed = 500;
  REQUIRE_NOTHROW(c.validate());
  c = {};
  c.n_relax = 30;
  REQUIRE_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.l_max = 200;  // below the stage-1 cap
  REQUIRE_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("quiet network converges immediately with prices pinned at zero") {
  Topology topo = Topology::make(1, 1, {{0, 0}}, {1});
  std::vector<SupplierModel> sups{lossless_hub()};
  std::vector<ConsumerModel> cons{still_building(1)};
  const int N = 6;
  std::vector<SupplierHorizon> shz{sup_horizon(70.0, 0.0, 0.1707, N)};
  std::vector<ConsumerHorizon> chz{
      con_horizon(Vec::Constant(1, 24.0), 10.0, 0.0, N)};
  DistributedConfig cfg = toy_cfg(N, N);

  auto dec = distributed_step(sups, cons, topo, Weights{}, shz, chz, cfg);
  REQUIRE(dec.dual.iteration == 3);  // two to measure stillness, one pinned
  REQUIRE(dec.diag.stage1_iterations == 2);
  REQUIRE(dec.diag.stage2_iterations == 1);
  REQUIRE(dec.dual.stage == Stage::fixed_binary);
  REQUIRE(dec.dual.p[0].lpNorm<Eigen::Infinity>() < 1e-3);
  REQUIRE(dec.dual.r[0].lpNorm<Eigen::Infinity>() < 1e-3);
  REQUIRE(dec.dual.u_cnet[0].lpNorm<Eigen::Infinity>() < 1e-3);
  REQUIRE(dec.inputs.supplier_z[0] == 0.0);
  REQUIRE(dec.inputs.supplier_u[0].lpNorm<Eigen::Infinity>() < 1e-3);
  REQUIRE(dec.inputs.consumer_u[0].lpNorm<Eigen::Infinity>() < 1e-3);
  REQUIRE(dec.diag.final_cost == Catch::Approx(0.0).margin(1e-6));
}

TEST_CASE("distributed refinement lands on the centralized optimum") {
  // near-ceiling tank makes the heat pump useless, so the switch pattern is
  // robustly all-off on both sides and the comparison is convex
  Topology topo = Topology::make(1, 1, {{0, 0}}, {2});
  std::vector<SupplierModel> sups{SupplierModel::hub(3.53)};
  std::vector<ConsumerModel> cons{ConsumerModel::building(2)};
  const int N = 8;
  std::vector<SupplierHorizon> shz{sup_horizon(79.0, 0.0, 0.1707, N)};
  std::vector<ConsumerHorizon> chz{
      con_horizon(Vec::Constant(2, 22.0), 10.0, 0.0, N)};
  DistributedConfig cfg = toy_cfg(N, N);
  cfg.eps_tol = 1e-5;  // refine deeper than the default before comparing

  auto central = centralized_step(sups, cons, topo, Weights{}, shz, chz, cfg);
  auto dist = distributed_step(sups, cons, topo, Weights{}, shz, chz, cfg);

  REQUIRE(central.inputs.supplier_z[0] == 0.0);
  REQUIRE(dist.inputs.supplier_z[0] == 0.0);
  double gap = std::abs(dist.diag.final_cost - central.diag.final_cost);
  REQUIRE(gap <= 5e-4 * std::max(1.0, std::abs(central.diag.final_cost)));
  // one-sided slack: the two report pure stage cost, so regularization-term
  // differences between their near-optimal points can tip either way
  REQUIRE(central.diag.final_cost <=
          dist.diag.final_cost + 1e-4 * std::max(1.0, std::abs(central.diag.final_cost)));

  for (int c = 0; c < 2; ++c) {
    REQUIRE(dist.inputs.supplier_u[0](c) ==
            Catch::Approx(central.inputs.supplier_u[0](c)).margin(1e-2));
    REQUIRE(dist.inputs.consumer_u[0](c) ==
            Catch::Approx(central.inputs.consumer_u[0](c)).margin(1e-2));
    REQUIRE(dist.inputs.consumer_ucnet[0](c) ==
            Catch::Approx(central.inputs.consumer_ucnet[0](c)).margin(1e-2));
  }

  // bookkeeping around the stage split
  REQUIRE(dist.diag.stage1_iterations <= cfg.l_max_r);
  REQUIRE(dist.diag.stage2_iterations >= 1);
  REQUIRE(dist.diag.iterations ==
          dist.diag.stage1_iterations + dist.diag.stage2_iterations);
  REQUIRE(static_cast<int>(dist.dual.cost_history.size()) ==
          dist.diag.iterations);
  REQUIRE(dist.dual.stage_history.front() == Stage::semi_relaxed);
  REQUIRE(dist.dual.stage_history.back() == Stage::fixed_binary);
  int flips = 0;
  for (size_t t = 1; t < dist.dual.stage_history.size(); ++t)
    if (dist.dual.stage_history[t] != dist.dual.stage_history[t - 1]) ++flips;
  REQUIRE(flips == 1);
  REQUIRE(dist.diag.agent_seconds.size() == 2);
  REQUIRE(dist.diag.parallel_seconds <= dist.diag.wall_seconds + 1e-9);
  REQUIRE(dist.diag.qp_solves >= dist.diag.iterations);
}

TEST_CASE("distributed step with a relaxed tail still lands on exact switches") {
  Topology topo = Topology::make(1, 1, {{0, 0}}, {2});
  std::vector<SupplierModel> sups{SupplierModel::hub(3.53)};
  std::vector<ConsumerModel> cons{ConsumerModel::building(2)};
  const int N = 6;
  std::vector<SupplierHorizon> shz{sup_horizon(61.0, 2.0, 0.1707, N)};
  std::vector<ConsumerHorizon> chz{
      con_horizon(Vec::Constant(2, 23.5), 10.0, 0.0, N)};
  DistributedConfig cfg = toy_cfg(N, 2);

  auto dec = distributed_step(sups, cons, topo, Weights{}, shz, chz, cfg);
  REQUIRE((dec.inputs.supplier_z[0] == 0.0 || dec.inputs.supplier_z[0] == 1.0));
  REQUIRE(dec.diag.stage2_iterations >= 1);
  REQUIRE(std::isfinite(dec.diag.final_cost));
}

TEST_CASE("warm-started prices seed the next step's first iteration") {
  Topology topo = Topology::make(1, 1, {{0, 0}}, {2});
  std::vector<SupplierModel> sups{SupplierModel::hub(3.53)};
  std::vector<ConsumerModel> cons{ConsumerModel::building(2)};
  const int N = 6;
  std::vector<SupplierHorizon> shz{sup_horizon(79.0, 0.0, 0.1707, N)};
  std::vector<ConsumerHorizon> chz{
      con_horizon(Vec::Constant(2, 22.0), 10.0, 0.0, N)};
  DistributedConfig cfg = toy_cfg(N, N);
  cfg.record_price_trace = true;

  auto first = distributed_step(sups, cons, topo, Weights{}, shz, chz, cfg);
  REQUIRE(first.dual.price_trace.size() ==
          static_cast<size_t>(first.dual.iteration));
  REQUIRE(first.dual.price_trace[0][0].norm() == 0.0);  // cold start at zero

  cfg.warm_start_prices = true;
  auto second = distributed_step(sups, cons, topo, Weights{}, shz, chz, cfg,
                                 &first.dual);
  REQUIRE((second.dual.price_trace[0][0] - first.dual.p[0]).norm() == 0.0);

  cfg.warm_start_prices = false;
  auto cold = distributed_step(sups, cons, topo, Weights{}, shz, chz, cfg,
                               &first.dual);
  REQUIRE(cold.dual.price_trace[0][0].norm() == 0.0);
}

TEST_CASE("decentralized consumers never see supplier data") {
  Topology topo = Topology::make(1, 1, {{0, 0}}, {2});
  std::vector<ConsumerModel> cons{ConsumerModel::building(2)};
  const int N = 6;
  std::vector<ConsumerHorizon> chz{
      con_horizon(Vec::Constant(2, 22.0), 8.0, 0.05, N)};
  DistributedConfig cfg = toy_cfg(N, N);

  auto a = decentralized_step({SupplierModel::hub(3.53)}, cons, topo, Weights{},
                              {sup_horizon(61.0, 0.0, 0.1707, N)}, chz, cfg);
  auto b = decentralized_step({SupplierModel::hub(2.8)}, cons, topo, Weights{},
                              {sup_horizon(75.0, 3.0, 0.2806, N)}, chz, cfg);
  REQUIRE((a.inputs.consumer_u[0] - b.inputs.consumer_u[0]).norm() == 0.0);
  REQUIRE((a.inputs.consumer_ucnet[0] - b.inputs.consumer_ucnet[0]).norm() ==
          0.0);
  REQUIRE((a.inputs.supplier_u[0] - b.inputs.supplier_u[0]).norm() > 0.0);
}

TEST_CASE("price trajectories are equivariant under agent relabeling") {
  const int N = 6;
  Topology topo = Topology::make(2, 2, {{0, 0}, {1, 1}}, {1, 1});
  std::vector<SupplierModel> sups{SupplierModel::hub(3.53),
                                  SupplierModel::hub(3.0)};
  std::vector<ConsumerModel> cons{ConsumerModel::building(1, 1),
                                  ConsumerModel::building(1, 2)};
  std::vector<SupplierHorizon> shz{sup_horizon(65.0, 1.0, 0.1707, N),
                                   sup_horizon(75.0, 0.5, 0.1707, N)};
  std::vector<ConsumerHorizon> chz{
      con_horizon(Vec::Constant(1, 22.0), 10.0, 0.0, N),
      con_horizon(Vec::Constant(1, 24.0), 12.0, 0.1, N)};
  DistributedConfig cfg = toy_cfg(N, N);
  cfg.record_price_trace = true;

  auto run = distributed_step(sups, cons, topo, Weights{}, shz, chz, cfg);
  auto swapped = distributed_step({sups[1], sups[0]}, {cons[1], cons[0]}, topo,
                                  Weights{}, {shz[1], shz[0]},
                                  {chz[1], chz[0]}, cfg);

  REQUIRE(run.dual.iteration == swapped.dual.iteration);
  const int l00 = topo.link_index(0, 0), l11 = topo.link_index(1, 1);
  for (size_t t = 0; t < run.dual.price_trace.size(); ++t) {
    REQUIRE((run.dual.price_trace[t][l00] - swapped.dual.price_trace[t][l11])
                .lpNorm<Eigen::Infinity>() < 1e-10);
    REQUIRE((run.dual.price_trace[t][l11] - swapped.dual.price_trace[t][l00])
                .lpNorm<Eigen::Infinity>() < 1e-10);
  }
  REQUIRE((run.inputs.supplier_u[0] - swapped.inputs.supplier_u[1]).norm() <
          1e-8);
  REQUIRE((run.inputs.consumer_u[1] - swapped.inputs.consumer_u[0]).norm() <
          1e-8);
}

TEST_CASE("without links the decentralized controller is the centralized one") {
  Topology topo;
  topo.n_suppliers = 2;
  topo.n_consumers = 0;
  topo.links_of_supplier.assign(2, {});
  const int N = 4;
  std::vector<SupplierModel> sups{SupplierModel::hub(3.53),
                                  SupplierModel::hub(3.2)};
  std::vector<SupplierHorizon> shz{sup_horizon(58.0, 1.0, 0.1707, N),
                                   sup_horizon(57.5, 1.0, 0.1707, N)};
  DistributedConfig cfg = toy_cfg(N, N);

  auto central = centralized_step(sups, {}, topo, Weights{}, shz, {}, cfg);
  auto local = decentralized_step(sups, {}, topo, Weights{}, shz, {}, cfg);

  REQUIRE(central.inputs.supplier_z[0] == 1.0);  // cold tank forces the pump
  for (int i = 0; i < 2; ++i) {
    REQUIRE(local.inputs.supplier_z[i] == central.inputs.supplier_z[i]);
    REQUIRE((local.inputs.supplier_u[i] - central.inputs.supplier_u[i])
                .lpNorm<Eigen::Infinity>() < 1e-3);
  }
  REQUIRE(local.diag.final_cost ==
          Catch::Approx(central.diag.final_cost).margin(1e-6));
}

TEST_CASE("centralized step keeps everything off when nothing is needed") {
  Topology topo = Topology::make(1, 1, {{0, 0}}, {1});
  std::vector<SupplierModel> sups{lossless_hub()};
  std::vector<ConsumerModel> cons{still_building(1)};
  const int N = 4;
  std::vector<SupplierHorizon> shz{sup_horizon(70.0, 0.0, 0.0, N)};
  std::vector<ConsumerHorizon> chz{
      con_horizon(Vec::Constant(1, 24.0), 10.0, 0.0, N)};
  DistributedConfig cfg = toy_cfg(N, N);

  auto dec = centralized_step(sups, cons, topo, Weights{}, shz, chz, cfg);
  REQUIRE(dec.inputs.supplier_z[0] == 0.0);
  REQUIRE(dec.inputs.supplier_u[0].lpNorm<Eigen::Infinity>() < 1e-3);
  REQUIRE(dec.inputs.consumer_u[0].lpNorm<Eigen::Infinity>() < 1e-3);

  // brute force over every switch pattern agrees
  Weights w;
  w.rho = cfg.rho;
  LiftedProblem pb =
      build_centralized(sups, cons, topo, w, shz, chz, N, N, false, true);
  auto brute = solve_miqp_bruteforce(pb);
  REQUIRE(brute.solution.status == QpStatus::optimal);
  const AgentLayout& L = pb.layout.suppliers[0];
  REQUIRE(brute.solution.v(step_index(L.z, 1, 0)) < 1e-3);
  REQUIRE(std::abs(brute.solution.v(step_index(L.u, L.nu, 0))) < 1e-3);
  REQUIRE(brute.decision.objective ==
          Catch::Approx(pb.objective(brute.solution.v)).margin(1e-9));
}
