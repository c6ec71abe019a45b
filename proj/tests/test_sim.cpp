#include <catch2/catch_amalgamated.hpp>

#include <hubmpc/sim.hpp>

using namespace hubmpc;

namespace {

// One lossless tank feeding a leak-free two-zone building: with zero draws
// and mild start states nothing needs to move.
Scenario idle_scenario(int duration, int horizon) {
  Scenario sc;
  SupplierModel hub = SupplierModel::hub(3.53);
  hub.a = 1.0;
  sc.suppliers = {hub};

  ConsumerModel b;
  const int z = 2;
  b.a_mat = Mat::Identity(z, z);
  b.b_mat = Mat::Identity(z, z);
  b.e_mat = Mat::Zero(z, 2);
  b.h_mat.resize(2 * z, z);
  b.h_mat << Mat::Identity(z, z), -Mat::Identity(z, z);
  b.h_vec.resize(2 * z);
  b.h_vec << Vec::Constant(z, 25.0), Vec::Constant(z, -23.0);
  b.g_mat = b.h_mat;
  b.g_vec.resize(2 * z);
  b.g_vec << Vec::Constant(z, 2.5), Vec::Constant(z, 0.0);
  b.g_tilde = b.g_vec;
  sc.consumers = {b};

  sc.topology = Topology::make(1, 1, {{0, 0}}, {z});
  const int steps = duration + horizon + 1;
  sc.disturbances.d_s = {Vec::Zero(steps)};
  sc.disturbances.d_c = {Mat::Zero(steps, 2)};
  sc.tank_x0 = Vec::Constant(1, 70.0);
  sc.room_x0 = {Vec::Constant(z, 24.0)};
  sc.tariff_slots = default_tariff_slots();
  sc.horizon = horizon;
  sc.duration_steps = duration;
  sc.validate();
  return sc;
}

DistributedConfig fast_cfg() {
  DistributedConfig c;
  c.l_min = 2;
  c.n_relax = 4;
  return c;
}

double max_box_violation(const Mat& g_mat, const Vec& bound, const Vec& u) {
  return (g_mat * u - bound).maxCoeff();
}

}  // namespace

TEST_CASE("default tariff slots") {
  const Vec t = default_tariff_slots();
  REQUIRE(t.size() == 48);
  for (int s = 0; s < 48; ++s) {
    const int hour = s / 2;
    if (hour >= 22 || hour < 6)
      REQUIRE(t(s) == 0.1707);
    else
      REQUIRE(t(s) == 0.2806);
  }

  Scenario sc = idle_scenario(2, 2);
  REQUIRE(sc.tariff(0) == 0.1707);    // midnight, off-peak
  REQUIRE(sc.tariff(12) == 0.2806);   // 06:00, on-peak
  REQUIRE(sc.tariff(44) == 0.1707);   // 22:00, off-peak
  REQUIRE(sc.tariff(48) == 0.1707);   // wraps to midnight
  sc.start_slot = 44;
  REQUIRE(sc.tariff(4) == 0.1707);    // midnight again
  REQUIRE(sc.tariff(16) == 0.2806);
}

TEST_CASE("thermal ranges") {
  const SupplierModel m = SupplierModel::hub(3.53);
  auto hp = hp_thermal_range(m);
  REQUIRE(hp.first == Catch::Approx(28.946).margin(1e-9));
  REQUIRE(hp.second == Catch::Approx(45.184).margin(1e-9));
  auto bo = boiler_thermal_range(m);
  REQUIRE(bo.first == 0.0);
  REQUIRE(bo.second == Catch::Approx(20.0).margin(1e-12));

  const SupplierModel p = SupplierModel::hub(3.7095);
  auto hp2 = hp_thermal_range(p);
  REQUIRE(hp2.first == Catch::Approx(30.4179).margin(1e-9));
  REQUIRE(hp2.second == Catch::Approx(47.4816).margin(1e-9));
}

TEST_CASE("synthetic disturbance series") {
  const Disturbances d = synthetic_disturbances(2, 3, 800, 1.0, 7u);
  REQUIRE(d.n_steps() == 800);
  d.validate(2, 3, 800);
  REQUIRE(d.d_c[0] == d.d_c[2]);  // shared weather
  for (int t = 0; t < 800; ++t) {
    REQUIRE(d.d_c[0](t, 0) > -12.0);
    REQUIRE(d.d_c[0](t, 0) < 20.0);
    REQUIRE(d.d_c[0](t, 1) >= 0.0);
    REQUIRE(d.d_c[0](t, 1) <= 1.2);
    REQUIRE(d.d_s[0](t) >= 0.0);
  }

  // The weekly surge window carries clearly higher draws than the same
  // wall-clock window later in the week.
  double stressed = 0.0, benign = 0.0;
  for (int t = 24; t < 132; ++t) stressed += d.d_s[0](t);
  for (int t = 192; t < 300; ++t) benign += d.d_s[0](t);
  REQUIRE(stressed > 1.4 * benign);

  const Disturbances again = synthetic_disturbances(2, 3, 800, 1.0, 7u);
  REQUIRE(again.d_s[0] == d.d_s[0]);
  REQUIRE(again.d_c[1] == d.d_c[1]);

  REQUIRE_THROWS_AS(synthetic_disturbances(0, 1, 10, 1.0, 1u), std::invalid_argument);
  REQUIRE_THROWS_AS(synthetic_disturbances(1, 1, 10, 0.0, 1u), std::invalid_argument);
}

TEST_CASE("scenario generation") {
  ScenarioSpec spec;
  spec.duration_steps = 48;

  SECTION("preset wiring and machine parameters") {
    const Scenario sc = generate_scenario(3, 5, spec, 11u);
    sc.validate();
    REQUIRE(sc.topology.links_of_supplier[0] == std::vector<int>{0, 1});
    REQUIRE(sc.topology.links_of_supplier[1] == std::vector<int>{1, 2, 3});
    REQUIRE(sc.topology.links_of_supplier[2] == std::vector<int>{3, 4});
    REQUIRE(sc.suppliers[0].cop_hp == 3.7095);
    REQUIRE(sc.suppliers[1].cop_hp == 3.6728);
    REQUIRE(sc.suppliers[2].cop_hp == 3.5367);
    for (int j = 0; j < 5; ++j) REQUIRE(sc.consumers[j].n_zones() == 7);

    for (int i = 0; i < 3; ++i) {
      REQUIRE(sc.tank_x0(i) >= 58.0);
      REQUIRE(sc.tank_x0(i) < 60.0);
    }
    for (const Vec& x0 : sc.room_x0)
      for (int z = 0; z < x0.size(); ++z) {
        REQUIRE(x0(z) >= 21.0);
        REQUIRE(x0(z) < 23.0);
      }

    // Buildings are individually perturbed but stay mass balanced.
    REQUIRE(sc.consumers[0].a_mat != sc.consumers[1].a_mat);
    for (const auto& c : sc.consumers)
      for (int r = 0; r < c.n_zones(); ++r) {
        const double total = c.a_mat.row(r).sum() + c.e_mat(r, 0);
        REQUIRE(total == Catch::Approx(1.0).margin(1e-12));
      }
  }

  SECTION("same seed reproduces everything") {
    const Scenario a = generate_scenario(3, 5, spec, 42u);
    const Scenario b = generate_scenario(3, 5, spec, 42u);
    REQUIRE(a.tank_x0 == b.tank_x0);
    for (int j = 0; j < 5; ++j) {
      REQUIRE(a.room_x0[j] == b.room_x0[j]);
      REQUIRE(a.consumers[j].a_mat == b.consumers[j].a_mat);
      REQUIRE(a.consumers[j].b_mat == b.consumers[j].b_mat);
      REQUIRE(a.consumers[j].e_mat == b.consumers[j].e_mat);
    }
    for (int i = 0; i < 3; ++i) REQUIRE(a.disturbances.d_s[i] == b.disturbances.d_s[i]);
    const Scenario c = generate_scenario(3, 5, spec, 43u);
    REQUIRE(a.tank_x0 != c.tank_x0);
  }

  SECTION("generic sizes") {
    spec.zones_per_consumer = 2;
    spec.prefer_preset = false;
    spec.scale_hp_with_links = true;
    const Scenario sc = generate_scenario(2, 5, spec, 9u);
    sc.validate();
    REQUIRE(sc.suppliers[0].cop_hp != 3.7095);
    for (const auto& m : sc.suppliers) {
      REQUIRE(m.cop_hp >= 3.1);
      REQUIRE(m.cop_hp <= 4.1);
    }
    // Capacity scaling widens the device boxes with served-consumer count.
    const auto base = SupplierModel::hub(sc.suppliers[0].cop_hp);
    const double links = sc.topology.links_of_supplier[0].size();
    REQUIRE(sc.suppliers[0].hp_range.second ==
            Catch::Approx(links * base.hp_range.second).margin(1e-12));
  }

  SECTION("rejects more suppliers than consumers") {
    REQUIRE_THROWS_AS(generate_scenario(4, 3, spec, 1u), std::invalid_argument);
  }
}

TEST_CASE("zero demand keeps the network idle") {
  const Scenario sc = idle_scenario(3, 6);
  const DistributedConfig cfg = fast_cfg();
  for (ControllerKind kind : {ControllerKind::centralized, ControllerKind::decentralized,
                              ControllerKind::distributed}) {
    INFO(controller_name(kind));
    const TrajectoryLog log = run_closed_loop(sc, kind, cfg);
    REQUIRE(log.duration() == 3);
    for (const StepRecord& rec : log.steps) {
      REQUIRE(rec.supplier_u[0].cwiseAbs().maxCoeff() <= 1e-9);
      REQUIRE(rec.consumer_u[0].cwiseAbs().maxCoeff() <= 1e-9);
      REQUIRE(rec.consumer_ucnet[0].cwiseAbs().maxCoeff() <= 1e-9);
      REQUIRE(rec.tank_x(0) == Catch::Approx(70.0).margin(1e-7));
      REQUIRE(rec.room_x[0](0) == Catch::Approx(24.0).margin(1e-7));
      REQUIRE(rec.cost_chf <= 1e-9);
      REQUIRE(rec.tank_exceed == 0.0);
      REQUIRE(rec.room_exceed == 0.0);
    }
  }
}

TEST_CASE("closed loop physics and bookkeeping") {
  ScenarioSpec spec;
  spec.zones_per_consumer = 2;
  spec.horizon = 8;
  spec.duration_steps = 10;
  spec.demand_level = 0.5;
  spec.prefer_preset = false;
  const Scenario sc = generate_scenario(2, 3, spec, 5u);
  const DistributedConfig cfg = fast_cfg();

  for (ControllerKind kind : {ControllerKind::centralized, ControllerKind::decentralized,
                              ControllerKind::distributed}) {
    INFO(controller_name(kind));
    const TrajectoryLog log = run_closed_loop(sc, kind, cfg);
    REQUIRE(log.duration() == 10);

    Vec tank = sc.tank_x0;
    std::vector<Vec> rooms = sc.room_x0;
    for (int t = 0; t < log.duration(); ++t) {
      const StepRecord& rec = log.steps[t];

      for (int i = 0; i < 2; ++i) {
        const auto& m = sc.suppliers[i];
        const double z = rec.supplier_z[i];
        REQUIRE((z == 0.0 || z == 1.0));
        const Vec bound = z == 1.0 ? m.g_tilde : m.g_vec;
        REQUIRE(max_box_violation(m.g_mat, bound, rec.supplier_u[i]) <= 0.0);

        const double delta_b = m.c_s(0) * rec.supplier_u[i](0) +
                               m.c_s(1) * rec.supplier_u[i](1) -
                               rec.supplier_unet[i].sum();
        const double next = tank_step(m, tank(i), delta_b, sc.disturbances.d_s[i](t));
        REQUIRE(rec.tank_x(i) == Catch::Approx(next).margin(1e-12));
      }

      for (int j = 0; j < 3; ++j) {
        const auto& m = sc.consumers[j];
        REQUIRE(rec.consumer_ucnet[j].minCoeff() >= 0.0);
        REQUIRE(max_box_violation(m.g_mat, m.g_vec, rec.consumer_u[j]) <= 0.0);
        const Vec next = building_step(m, rooms[j], rec.consumer_u[j],
                                       sc.disturbances.d_c[j].row(t).transpose());
        REQUIRE((rec.room_x[j] - next).cwiseAbs().maxCoeff() <= 1e-12);
      }

      REQUIRE(rec.balance_residual <= 1e-8);
      double paid = 0.0;
      for (int i = 0; i < 2; ++i)
        paid += (rec.supplier_u[i](0) + rec.supplier_u[i](1)) * 0.5 * sc.tariff(t);
      REQUIRE(rec.cost_chf == Catch::Approx(paid).margin(1e-12));

      tank = rec.tank_x;
      rooms = rec.room_x;
    }

    const Metrics m = compute_metrics(log, sc);
    REQUIRE(m.room_heating_kwh >= 0.0);
    REQUIRE(m.tank_supply_kwh >= 0.0);
    double supply = 0.0, chf = 0.0;
    for (int t = 0; t < log.duration(); ++t)
      for (int i = 0; i < 2; ++i) {
        supply += (sc.suppliers[i].cop_hp * log.steps[t].supplier_u[i](0) +
                   log.steps[t].supplier_u[i](1)) *
                  0.5;
        chf += (log.steps[t].supplier_u[i](0) + log.steps[t].supplier_u[i](1)) * 0.5 *
               sc.tariff(t);
      }
    REQUIRE(m.tank_supply_kwh == Catch::Approx(supply).margin(1e-10));
    REQUIRE(m.tank_cost_chf == Catch::Approx(chf).margin(1e-10));
  }
}

TEST_CASE("closed loop determinism") {
  ScenarioSpec spec;
  spec.zones_per_consumer = 2;
  spec.horizon = 6;
  spec.duration_steps = 6;
  spec.demand_level = 0.5;
  const Scenario sc = generate_scenario(1, 2, spec, 3u);
  const DistributedConfig cfg = fast_cfg();
  const TrajectoryLog a = run_closed_loop(sc, ControllerKind::distributed, cfg);
  const TrajectoryLog b = run_closed_loop(sc, ControllerKind::distributed, cfg);
  for (int t = 0; t < a.duration(); ++t) {
    REQUIRE(a.steps[t].tank_x == b.steps[t].tank_x);
    for (int j = 0; j < 2; ++j) REQUIRE(a.steps[t].room_x[j] == b.steps[t].room_x[j]);
    for (int i = 0; i < 1; ++i) REQUIRE(a.steps[t].supplier_u[i] == b.steps[t].supplier_u[i]);
    REQUIRE(a.steps[t].iterations == b.steps[t].iterations);
    REQUIRE(a.steps[t].cost_chf == b.steps[t].cost_chf);
  }
}

TEST_CASE("controller failures carry the step index") {
  Scenario sc = idle_scenario(3, 4);
  // First seen by the step-1 horizon; the step-0 plan stays feasible.
  sc.disturbances.d_s[0](4) = 1e7;
  REQUIRE_THROWS_WITH(run_closed_loop(sc, ControllerKind::centralized, fast_cfg()),
                      Catch::Matchers::StartsWith("closed-loop step 1"));
}

TEST_CASE("metrics oracles") {
  Scenario sc = idle_scenario(1, 4);

  SECTION("hand-built violations and costs") {
    TrajectoryLog log;
    log.start_step = 12;  // 06:00, on-peak
    log.tank_x0 = sc.tank_x0;
    log.room_x0 = sc.room_x0;
    StepRecord rec;
    rec.tank_x = Vec::Constant(1, 70.0);
    rec.room_x = {Vec::Constant(2, 22.5)};  // half a degree below comfort
    rec.supplier_u = {Vec::Zero(2)};
    rec.supplier_u[0](1) = 2.0;  // 2 kW boiler for half an hour
    rec.supplier_z = {0.0};
    rec.supplier_unet = {Vec::Zero(1)};
    rec.consumer_u = {Vec::Zero(2)};
    rec.consumer_ucnet = {Vec::Zero(2)};
    log.steps.push_back(rec);

    const Metrics m = compute_metrics(log, sc);
    REQUIRE(m.room_violation_degch == Catch::Approx(2 * 0.25).margin(1e-12));
    REQUIRE(m.tank_violation_degch == 0.0);
    REQUIRE(m.tank_supply_kwh == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(m.tank_cost_chf == Catch::Approx(0.2806).margin(1e-12));
    REQUIRE(m.room_heating_kwh == 0.0);
  }

  SECTION("feasible states produce zero violation") {
    const TrajectoryLog log = run_closed_loop(sc, ControllerKind::centralized, fast_cfg());
    const Metrics m = compute_metrics(log, sc);
    REQUIRE(m.room_violation_degch == 0.0);
    REQUIRE(m.tank_violation_degch == 0.0);
  }
}

TEST_CASE("metrics are additive across a split") {
  ScenarioSpec spec;
  spec.zones_per_consumer = 2;
  spec.horizon = 6;
  spec.duration_steps = 9;
  spec.demand_level = 0.6;
  const Scenario sc = generate_scenario(1, 2, spec, 21u);
  const TrajectoryLog log = run_closed_loop(sc, ControllerKind::decentralized, fast_cfg());

  const auto [head, tail] = split_log(log, 4);
  REQUIRE(head.duration() == 4);
  REQUIRE(tail.duration() == 5);
  REQUIRE(tail.start_step == 4);
  REQUIRE(tail.tank_x0 == log.steps[3].tank_x);

  const Metrics whole = compute_metrics(log, sc);
  const Metrics a = compute_metrics(head, sc);
  const Metrics b = compute_metrics(tail, sc);
  REQUIRE(whole.room_heating_kwh == Catch::Approx(a.room_heating_kwh + b.room_heating_kwh).margin(1e-12));
  REQUIRE(whole.tank_supply_kwh == Catch::Approx(a.tank_supply_kwh + b.tank_supply_kwh).margin(1e-12));
  REQUIRE(whole.tank_cost_chf == Catch::Approx(a.tank_cost_chf + b.tank_cost_chf).margin(1e-12));
  REQUIRE(whole.room_violation_degch ==
          Catch::Approx(a.room_violation_degch + b.room_violation_degch).margin(1e-12));
  REQUIRE(whole.tank_violation_degch ==
          Catch::Approx(a.tank_violation_degch + b.tank_violation_degch).margin(1e-12));
}

TEST_CASE("central and distributed agree on a benign horizon") {
  ScenarioSpec spec;
  spec.zones_per_consumer = 2;
  spec.horizon = 8;
  spec.duration_steps = 8;
  spec.demand_level = 0.4;
  const Scenario sc = generate_scenario(1, 1, spec, 33u);

  DistributedConfig cfg = fast_cfg();
  cfg.l_min = 30;
  const Metrics central =
      compute_metrics(run_closed_loop(sc, ControllerKind::centralized, cfg), sc);
  const Metrics dist =
      compute_metrics(run_closed_loop(sc, ControllerKind::distributed, cfg), sc);
  REQUIRE(central.room_heating_kwh > 0.0);
  REQUIRE(std::abs(dist.room_heating_kwh - central.room_heating_kwh) <=
          0.02 * central.room_heating_kwh);
}

TEST_CASE("forecast noise perturbs plans but not feasibility") {
  ScenarioSpec spec;
  spec.zones_per_consumer = 2;
  spec.horizon = 6;
  spec.duration_steps = 5;
  spec.demand_level = 0.6;
  const Scenario sc = generate_scenario(1, 2, spec, 17u);

  RunOptions noisy;
  noisy.forecast_noise = 0.08;
  const TrajectoryLog a = run_closed_loop(sc, ControllerKind::decentralized, fast_cfg());
  const TrajectoryLog b = run_closed_loop(sc, ControllerKind::decentralized, fast_cfg(), noisy);
  REQUIRE(b.duration() == 5);
  bool differs = false;
  for (int t = 0; t < 5; ++t) {
    REQUIRE(b.steps[t].balance_residual <= 1e-8);
    if ((a.steps[t].supplier_u[0] - b.steps[t].supplier_u[0]).cwiseAbs().maxCoeff() > 1e-9)
      differs = true;
  }
  REQUIRE(differs);
}

TEST_CASE("distributed runs record their convergence trace") {
  ScenarioSpec spec;
  spec.zones_per_consumer = 2;
  spec.horizon = 6;
  spec.duration_steps = 2;
  spec.demand_level = 0.5;
  const Scenario sc = generate_scenario(1, 1, spec, 8u);
  const TrajectoryLog log = run_closed_loop(sc, ControllerKind::distributed, fast_cfg());
  for (const StepRecord& rec : log.steps) {
    REQUIRE(rec.iterations >= 2);
    REQUIRE(static_cast<int>(rec.cost_history.size()) == rec.iterations);
    REQUIRE(rec.stage_history.size() == rec.cost_history.size());
    REQUIRE(rec.stage_history.back() == Stage::fixed_binary);
    REQUIRE(!rec.prices.empty());
  }

  RunOptions lean;
  lean.keep_iteration_trace = false;
  const TrajectoryLog thin = run_closed_loop(sc, ControllerKind::distributed, fast_cfg(), lean);
  REQUIRE(thin.steps[0].cost_history.empty());

  const TrajectoryLog plain = run_closed_loop(sc, ControllerKind::decentralized, fast_cfg());
  REQUIRE(plain.steps[0].prices.empty());
  REQUIRE(plain.steps[0].cost_history.empty());
}

TEST_CASE("timing study shape") {
  TimingTable table = timing_study(1, 6, {2, 4, 6}, 19u);
  REQUIRE(table.rows.size() == 3);
  for (const TimingRow& row : table.rows) {
    REQUIRE(row.suppliers >= 1);
    REQUIRE(row.consumers >= row.suppliers);
    REQUIRE(row.suppliers + row.consumers == row.agents);
    REQUIRE(row.centralized_seconds > 0.0);
    REQUIRE(row.distributed_seconds > 0.0);
    REQUIRE(row.iterations >= 2);
  }
  REQUIRE(table.kendall_tau >= -1.0);
  REQUIRE(table.kendall_tau <= 1.0);
  REQUIRE((table.crossover_agents == -1 || table.crossover_agents >= 2));

  REQUIRE_THROWS_AS(timing_study(0, 6, {}, 1u), std::invalid_argument);
  REQUIRE_THROWS_AS(timing_study(1, 1, {}, 1u), std::invalid_argument);
}
