#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hubmpc/controllers.hpp"

namespace hubmpc {

enum class ControllerKind { centralized, decentralized, distributed };

inline const char* controller_name(ControllerKind k) {
  switch (k) {
    case ControllerKind::centralized: return "centralized";
    case ControllerKind::decentralized: return "decentralized";
    default: return "distributed";
  }
}

// Standard normal draw from the deterministic stream (Box-Muller).
inline double gauss(SplitMix64& rng) {
  const double u1 = rng.uniform();
  const double u2 = rng.uniform();
  return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(6.283185307179586 * u2);
}

// Generation recipe knobs. Defaults reproduce the bundled three-supplier /
// five-consumer comparison experiment; the scaling study overrides them.
struct ScenarioSpec {
  int zones_per_consumer = 7;
  int horizon = 24;
  int duration_steps = 336;          // seven days of half-hours
  bool prefer_preset = true;         // 3+5 wiring and COP presets when sizes match
  bool scale_hp_with_links = false;  // device capacity follows served-consumer count
  double demand_level = 1.0;         // multiplies the uncontrolled draw series
};

struct Scenario {
  std::vector<SupplierModel> suppliers;
  std::vector<ConsumerModel> consumers;
  Topology topology;
  Disturbances disturbances;
  Vec tank_x0;
  std::vector<Vec> room_x0;
  Vec tariff_slots;  // 48 half-hour CHF/kWh slots, cyclic from midnight
  int start_slot = 0;
  Weights weights;
  int horizon = 24;
  int duration_steps = 336;
  std::uint64_t seed = 0;

  double tariff(int step) const {
    require(tariff_slots.size() == 48, "tariff needs 48 half-hour slots");
    int s = (start_slot + step) % 48;
    if (s < 0) s += 48;
    return tariff_slots(s);
  }

  void validate() const {
    const int ns = topology.n_suppliers, nc = topology.n_consumers;
    require(static_cast<int>(suppliers.size()) == ns, "one model per supplier");
    require(static_cast<int>(consumers.size()) == nc, "one model per consumer");
    for (const auto& m : suppliers) m.validate();
    for (int j = 0; j < nc; ++j) {
      consumers[j].validate();
      require(consumers[j].n_zones() == topology.zones[j],
              "zone count mismatch between model and topology");
      require(room_x0[j].size() == topology.zones[j], "room start state sized to zones");
      require_finite(room_x0[j], "room start state");
    }
    require(tank_x0.size() == ns, "one tank start temperature per supplier");
    require_finite(tank_x0, "tank start state");
    require(static_cast<int>(room_x0.size()) == nc, "room start state per consumer");
    require(tariff_slots.size() == 48 && tariff_slots.minCoeff() > 0.0,
            "tariff needs 48 positive slots");
    require(start_slot >= 0 && start_slot < 48, "start slot out of range");
    require(horizon >= 1 && duration_steps >= 1, "horizon and duration must be positive");
    weights.validate();
    disturbances.validate(ns, nc, duration_steps + horizon);
  }
};

// 17.07 Rp/kWh off-peak between 22:00 and 06:00, 28.06 Rp/kWh otherwise.
inline Vec default_tariff_slots() {
  Vec t(48);
  for (int s = 0; s < 48; ++s) {
    const int hour = s / 2;
    t(s) = (hour >= 22 || hour < 6) ? 0.1707 : 0.2806;
  }
  return t;
}

// Thermal output window of the heat pump (electrical bounds times COP).
inline std::pair<double, double> hp_thermal_range(const SupplierModel& m) {
  return {m.cop_hp * m.hp_range.first, m.cop_hp * m.hp_range.second};
}

inline std::pair<double, double> boiler_thermal_range(const SupplierModel& m) {
  return {m.c_s(1) * m.boiler_range.first, m.c_s(1) * m.boiler_range.second};
}

namespace detail {

inline double population_std(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(xs.size()));
}

inline double clamp(double x, double lo, double hi) {
  return x < lo ? lo : (x > hi ? hi : x);
}

// Entrywise Gaussian perturbation of the structurally nonzero dynamics
// entries, sigma taken from the nominal entry population, projected back
// into the validity envelope. The ambient-leak column keeps the row mass
// balance so the perturbed building stays non-expansive.
inline ConsumerModel perturb_consumer(const ConsumerModel& nominal, SplitMix64& rng) {
  ConsumerModel m = nominal;
  const int z = m.n_zones();
  std::vector<double> a_entries, b_entries, s_entries;
  for (int i = 0; i < z; ++i) {
    a_entries.push_back(nominal.a_mat(i, i));
    if (i > 0) a_entries.push_back(nominal.a_mat(i, i - 1));
    if (i + 1 < z) a_entries.push_back(nominal.a_mat(i, i + 1));
    b_entries.push_back(nominal.b_mat(i, i));
    s_entries.push_back(nominal.e_mat(i, 1));
  }
  const double sig_a = population_std(a_entries);
  const double sig_b = population_std(b_entries);
  const double sig_s = population_std(s_entries);
  for (int i = 0; i < z; ++i) {
    double diag = clamp(nominal.a_mat(i, i) + sig_a * gauss(rng), 0.948, 0.985);
    double couple_sum = 0.0;
    if (i > 0) {
      double c = clamp(nominal.a_mat(i, i - 1) + sig_a * gauss(rng), 0.004, 0.016);
      m.a_mat(i, i - 1) = c;
      couple_sum += c;
    }
    if (i + 1 < z) {
      double c = clamp(nominal.a_mat(i, i + 1) + sig_a * gauss(rng), 0.004, 0.016);
      m.a_mat(i, i + 1) = c;
      couple_sum += c;
    }
    double leak = 1.0 - diag - couple_sum;
    if (leak < 0.012) diag = 1.0 - 0.012 - couple_sum;
    if (leak > 0.038) diag = 1.0 - 0.038 - couple_sum;
    m.a_mat(i, i) = diag;
    m.e_mat(i, 0) = 1.0 - diag - couple_sum;
    m.e_mat(i, 1) = clamp(nominal.e_mat(i, 1) + sig_s * gauss(rng), 0.010, 0.060);
    m.b_mat(i, i) = clamp(nominal.b_mat(i, i) + sig_b * gauss(rng), 0.22, 0.45);
  }
  m.validate();
  return m;
}

// Smooth diurnal shape with morning and evening bumps, mean near one.
inline double demand_shape(double hour) {
  return 0.92 + 0.18 * std::sin(6.283185307179586 * (hour - 17.2) / 24.0) +
         0.12 * std::sin(12.566370614359172 * (hour - 7.8) / 24.0);
}

}  // namespace detail

// Deterministic weather and uncontrolled-draw series on the half-hour grid.
// Steps 24..131 of every 336-step week carry a demand surge that stresses
// the supply side; the rest of the week has ample headroom.
inline Disturbances synthetic_disturbances(int ns, int nc, int steps,
                                           double demand_level, std::uint64_t seed) {
  require(ns >= 1 && nc >= 1 && steps >= 1, "series needs positive sizes");
  require(demand_level > 0.0, "demand level must be positive");
  Disturbances dst;

  SplitMix64 wrng(seed ^ 0x5bd1e995u);
  Vec ambient(steps), solar(steps);
  double ar_a = 0.0;
  double cloud = 0.6;
  for (int t = 0; t < steps; ++t) {
    const double hour = static_cast<double>(t % 48) / 2.0;
    if (t % 48 == 0) cloud = 0.25 + 0.75 * wrng.uniform() * wrng.uniform();
    ar_a = 0.94 * ar_a + 0.12 * gauss(wrng);
    ambient(t) = 6.0 + 3.2 * std::sin(6.283185307179586 * (hour - 15.0) / 24.0) +
                 1.6 * std::sin(6.283185307179586 * t / (48.0 * 6.37) + 1.0) + 1.2 * ar_a;
    const double bell = std::max(0.0, std::sin(3.141592653589793 * (hour - 8.25) / 9.5));
    solar(t) = 0.85 * cloud * std::pow(bell, 1.4);
  }
  Mat weather(steps, 2);
  weather.col(0) = ambient;
  weather.col(1) = solar;
  dst.d_c.assign(nc, weather);

  dst.d_s.resize(ns);
  for (int i = 0; i < ns; ++i) {
    SplitMix64 rng(seed ^ (0x9e3779b9u + 0x1000193u * static_cast<std::uint64_t>(i + 1)));
    const double level = 30.0 * demand_level * rng.uniform(0.9, 1.1);
    double ar = 0.0;
    Vec d(steps);
    for (int t = 0; t < steps; ++t) {
      const double hour = static_cast<double>(t % 48) / 2.0;
      const int week_step = t % 336;
      const double stress = (week_step >= 24 && week_step < 132) ? 1.85 : 1.0;
      ar = 0.90 * ar + 0.10 * gauss(rng);
      d(t) = std::max(0.0, level * detail::demand_shape(hour) * stress * (1.0 + 0.25 * ar));
    }
    dst.d_s[i] = d;
  }
  return dst;
}

// Builds the multi-agent benchmark environment: nominal hub and building
// models, per-agent perturbations, wiring, start states just outside the
// operating bands, the two-level tariff, and synthetic disturbances.
inline Scenario generate_scenario(int ns, int nc, const ScenarioSpec& spec,
                                  std::uint64_t seed) {
  require(ns >= 1 && nc >= 1, "agent counts must be positive");
  require(ns <= nc, "more suppliers than consumers");
  require(spec.zones_per_consumer >= 1, "zones per consumer must be positive");
  require(spec.horizon >= 1 && spec.duration_steps >= 1,
          "horizon and duration must be positive");

  Scenario sc;
  sc.seed = seed;
  sc.horizon = spec.horizon;
  sc.duration_steps = spec.duration_steps;
  sc.tariff_slots = default_tariff_slots();
  sc.start_slot = 0;

  const bool preset = spec.prefer_preset && ns == 3 && nc == 5;
  if (preset) {
    sc.topology = Topology::make(
        3, 5, {{0, 0}, {0, 1}, {1, 1}, {1, 2}, {1, 3}, {2, 3}, {2, 4}},
        std::vector<int>(5, spec.zones_per_consumer));
  } else {
    sc.topology = Topology::banded(ns, nc, spec.zones_per_consumer);
  }

  SplitMix64 rng(seed ^ 0xda3e39cb94b95bdbULL);
  sc.suppliers.reserve(ns);
  for (int i = 0; i < ns; ++i) {
    double cop;
    if (preset) {
      const double preset_cop[3] = {3.7095, 3.6728, 3.5367};
      cop = preset_cop[i];
    } else {
      cop = detail::clamp(3.53 + 0.12 * gauss(rng), 3.1, 4.1);
    }
    double scale = 1.0;
    if (spec.scale_hp_with_links)
      scale = std::max<std::size_t>(1, sc.topology.links_of_supplier[i].size());
    sc.suppliers.push_back(SupplierModel::hub(cop, scale));
  }

  const ConsumerModel nominal = ConsumerModel::building(spec.zones_per_consumer);
  sc.consumers.reserve(nc);
  for (int j = 0; j < nc; ++j) {
    SplitMix64 crng(seed ^ (0xc2b2ae3d27d4eb4fULL + 0x165667b1ULL * static_cast<std::uint64_t>(j + 1)));
    sc.consumers.push_back(detail::perturb_consumer(nominal, crng));
  }

  sc.tank_x0.resize(ns);
  for (int i = 0; i < ns; ++i) sc.tank_x0(i) = 60.0 - rng.uniform(0.2, 2.0);
  sc.room_x0.resize(nc);
  for (int j = 0; j < nc; ++j) {
    Vec x0(spec.zones_per_consumer);
    for (int z = 0; z < spec.zones_per_consumer; ++z) x0(z) = 23.0 - rng.uniform(0.2, 2.0);
    sc.room_x0[j] = x0;
  }

  sc.disturbances = synthetic_disturbances(
      ns, nc, spec.duration_steps + spec.horizon + 1, spec.demand_level, seed);
  sc.validate();
  return sc;
}

struct StepRecord {
  Vec tank_x;                        // post-transition tank temperatures
  std::vector<Vec> room_x;           // post-transition zone temperatures
  std::vector<Vec> supplier_u;       // applied (heat pump, boiler) kW electric
  std::vector<double> supplier_z;
  std::vector<Vec> supplier_unet;    // applied thermal draw toward each served consumer
  std::vector<Vec> consumer_u;       // applied per-zone heat
  std::vector<Vec> consumer_ucnet;   // reconciled per-tank splits
  std::vector<Vec> prices;           // final per-link prices (distributed runs)
  std::vector<double> cost_history;  // per-iteration planning cost (distributed runs)
  std::vector<Stage> stage_history;
  int iterations = 0;
  double cost_chf = 0.0;
  double balance_residual = 0.0;  // max |applied balance row|, kW
  double tank_exceed = 0.0;       // max degC beyond the soft bands this step
  double room_exceed = 0.0;
  double wall_seconds = 0.0;
  double parallel_seconds = 0.0;
  std::vector<double> agent_seconds;
};

struct TrajectoryLog {
  int start_step = 0;
  Vec tank_x0;
  std::vector<Vec> room_x0;
  std::vector<StepRecord> steps;

  int duration() const { return static_cast<int>(steps.size()); }
};

struct RunOptions {
  double forecast_noise = 0.0;  // relative sigma on look-ahead samples
  std::uint64_t noise_seed = 1;
  bool keep_iteration_trace = true;  // store per-step cost histories (distributed)
};

// One receding-horizon pass. Forecasts are the true future disturbances
// unless forecast noise is enabled; the measured sample (k = 0) is always
// exact. Plant reconciliation takes the consumers' draw decisions as the
// physical truth: zone draws are clamped into the radiator boxes with
// proportional re-splitting, supplier-side flows are recomputed from the
// same blocks, so every applied balance row closes exactly. Decentralized
// suppliers never planned for those draws; the tank absorbs them as an
// unplanned disturbance, which is the measured coordination failure.
inline TrajectoryLog run_closed_loop(const Scenario& sc, ControllerKind kind,
                                     const DistributedConfig& config,
                                     const RunOptions& opt = {}) {
  sc.validate();
  require(opt.forecast_noise >= 0.0, "forecast noise must be nonnegative");
  DistributedConfig cfg = config;
  cfg.horizon = sc.horizon;
  cfg.validate();

  const int ns = sc.topology.n_suppliers, nc = sc.topology.n_consumers;
  const int N = sc.horizon;
  SplitMix64 nrng(opt.noise_seed);

  TrajectoryLog log;
  log.start_step = 0;
  log.tank_x0 = sc.tank_x0;
  log.room_x0 = sc.room_x0;
  log.steps.reserve(sc.duration_steps);

  Vec tank = sc.tank_x0;
  std::vector<Vec> rooms = sc.room_x0;
  DualState carry;
  bool have_carry = false;

  for (int t = 0; t < sc.duration_steps; ++t) {
    std::vector<SupplierHorizon> shz(ns);
    for (int i = 0; i < ns; ++i) {
      shz[i].x0 = tank(i);
      shz[i].d = sc.disturbances.d_s[i].segment(t, N);
      shz[i].input_weight.resize(N);
      for (int k = 0; k < N; ++k) shz[i].input_weight(k) = sc.tariff(t + k);
      if (opt.forecast_noise > 0.0)
        for (int k = 1; k < N; ++k)
          shz[i].d(k) = std::max(0.0, shz[i].d(k) * (1.0 + opt.forecast_noise * gauss(nrng)));
    }
    std::vector<ConsumerHorizon> chz(nc);
    for (int j = 0; j < nc; ++j) {
      chz[j].x0 = rooms[j];
      chz[j].d = sc.disturbances.d_c[j].middleRows(t, N);
      chz[j].input_weight = 1.0;
      if (opt.forecast_noise > 0.0)
        for (int k = 1; k < N; ++k)
          for (int c = 0; c < 2; ++c)
            chz[j].d(k, c) += opt.forecast_noise * gauss(nrng);
    }

    ControlDecision dec;
    try {
      switch (kind) {
        case ControllerKind::centralized:
          dec = centralized_step(sc.suppliers, sc.consumers, sc.topology, sc.weights,
                                 shz, chz, cfg);
          break;
        case ControllerKind::decentralized:
          dec = decentralized_step(sc.suppliers, sc.consumers, sc.topology, sc.weights,
                                   shz, chz, cfg);
          break;
        default:
          dec = distributed_step(sc.suppliers, sc.consumers, sc.topology, sc.weights,
                                 shz, chz, cfg, have_carry ? &carry : nullptr);
          break;
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("closed-loop step " + std::to_string(t) + ": " + e.what());
    }
    if (kind == ControllerKind::distributed) {
      carry = dec.dual;
      have_carry = true;
    }

    StepRecord rec;
    rec.consumer_ucnet.resize(nc);
    rec.consumer_u.resize(nc);
    for (int j = 0; j < nc; ++j) {
      const int z = sc.topology.zones[j];
      const int tanks = static_cast<int>(sc.topology.tanks_of_consumer[j].size());
      Vec blocks = dec.inputs.consumer_ucnet[j];
      require(blocks.size() == z * tanks, "draw block width mismatch");
      Vec zone_sum = Vec::Zero(z);
      for (int k = 0; k < tanks; ++k) zone_sum += blocks.segment(k * z, z);
      for (int r = 0; r < z; ++r) {
        const double cap = sc.consumers[j].g_vec(r);
        if (zone_sum(r) > cap && zone_sum(r) > 0.0) {
          const double scale = cap / zone_sum(r);
          for (int k = 0; k < tanks; ++k) blocks(k * z + r) *= scale;
          zone_sum(r) = cap;
        }
      }
      rec.consumer_ucnet[j] = blocks;
      rec.consumer_u[j] = zone_sum;
    }

    rec.supplier_u.resize(ns);
    rec.supplier_z.resize(ns);
    rec.supplier_unet.resize(ns);
    rec.tank_x.resize(ns);
    double residual = 0.0;
    for (int i = 0; i < ns; ++i) {
      const auto& served = sc.topology.links_of_supplier[i];
      Vec unet(served.size());
      for (int pos = 0; pos < static_cast<int>(served.size()); ++pos) {
        const int j = served[pos];
        const int z = sc.topology.zones[j];
        const int block = sc.topology.tank_pos_in_consumer(i, j);
        unet(pos) = rec.consumer_ucnet[j].segment(block * z, z).sum();
      }
      rec.supplier_u[i] = dec.inputs.supplier_u[i];
      rec.supplier_z[i] = dec.inputs.supplier_z[i];
      rec.supplier_unet[i] = unet;
      const double delta_b = sc.suppliers[i].c_s(0) * rec.supplier_u[i](0) +
                             sc.suppliers[i].c_s(1) * rec.supplier_u[i](1) - unet.sum();
      rec.tank_x(i) = tank_step(sc.suppliers[i], tank(i), delta_b, sc.disturbances.d_s[i](t));
      for (int pos = 0; pos < static_cast<int>(served.size()); ++pos) {
        const int j = served[pos];
        const int z = sc.topology.zones[j];
        const int block = sc.topology.tank_pos_in_consumer(i, j);
        residual = std::max(residual, std::abs(unet(pos) - rec.consumer_ucnet[j]
                                                               .segment(block * z, z)
                                                               .sum()));
      }
    }
    rec.room_x.resize(nc);
    for (int j = 0; j < nc; ++j) {
      const int z = sc.topology.zones[j];
      const int tanks = static_cast<int>(sc.topology.tanks_of_consumer[j].size());
      Vec from_blocks = Vec::Zero(z);
      for (int k = 0; k < tanks; ++k) from_blocks += rec.consumer_ucnet[j].segment(k * z, z);
      residual = std::max(residual, (rec.consumer_u[j] - from_blocks).cwiseAbs().maxCoeff());
      rec.room_x[j] = building_step(sc.consumers[j], rooms[j], rec.consumer_u[j],
                                    sc.disturbances.d_c[j].row(t).transpose());
    }
    rec.balance_residual = residual;

    double cost = 0.0;
    for (int i = 0; i < ns; ++i)
      cost += (rec.supplier_u[i](0) + rec.supplier_u[i](1)) * kStepHours * sc.tariff(t);
    rec.cost_chf = cost;

    for (int i = 0; i < ns; ++i) {
      const Vec v = sc.suppliers[i].h_mat * rec.tank_x.segment(i, 1) - sc.suppliers[i].h_vec;
      rec.tank_exceed = std::max(rec.tank_exceed, v.maxCoeff());
    }
    for (int j = 0; j < nc; ++j) {
      const Vec v = sc.consumers[j].h_mat * rec.room_x[j] - sc.consumers[j].h_vec;
      rec.room_exceed = std::max(rec.room_exceed, v.maxCoeff());
    }
    rec.tank_exceed = pos_part(rec.tank_exceed);
    rec.room_exceed = pos_part(rec.room_exceed);

    rec.iterations = dec.diag.iterations;
    rec.wall_seconds = dec.diag.wall_seconds;
    rec.parallel_seconds = dec.diag.parallel_seconds;
    rec.agent_seconds = dec.diag.agent_seconds;
    if (kind == ControllerKind::distributed) {
      rec.prices = dec.dual.p;
      if (opt.keep_iteration_trace) {
        rec.cost_history = dec.diag.cost_history;
        rec.stage_history = dec.dual.stage_history;
      }
    }

    tank = rec.tank_x;
    rooms = rec.room_x;
    log.steps.push_back(std::move(rec));
  }
  return log;
}

struct Metrics {
  double room_heating_kwh = 0.0;
  double room_violation_degch = 0.0;
  double tank_supply_kwh = 0.0;
  double tank_cost_chf = 0.0;
  double tank_violation_degch = 0.0;
  double wall_seconds = 0.0;
  double parallel_seconds = 0.0;
};

// Energy integrals use kW times the half-hour step; violations integrate the
// positive part of the softened state rows over the post-transition states.
inline Metrics compute_metrics(const TrajectoryLog& log, const Scenario& sc) {
  const int ns = sc.topology.n_suppliers, nc = sc.topology.n_consumers;
  Metrics m;
  for (int t = 0; t < log.duration(); ++t) {
    const StepRecord& rec = log.steps[t];
    require(static_cast<int>(rec.supplier_u.size()) == ns &&
                static_cast<int>(rec.consumer_u.size()) == nc,
            "log does not match scenario agent counts");
    for (int i = 0; i < ns; ++i) {
      const double hp = rec.supplier_u[i](0), bo = rec.supplier_u[i](1);
      m.tank_supply_kwh += (sc.suppliers[i].cop_hp * hp + bo) * kStepHours;
      m.tank_cost_chf += (hp + bo) * kStepHours * sc.tariff(log.start_step + t);
      const Vec v = sc.suppliers[i].h_mat * rec.tank_x.segment(i, 1) - sc.suppliers[i].h_vec;
      m.tank_violation_degch += v.cwiseMax(0.0).sum() * kStepHours;
    }
    for (int j = 0; j < nc; ++j) {
      m.room_heating_kwh += rec.consumer_u[j].sum() * kStepHours;
      const Vec v = sc.consumers[j].h_mat * rec.room_x[j] - sc.consumers[j].h_vec;
      m.room_violation_degch += v.cwiseMax(0.0).sum() * kStepHours;
    }
    m.wall_seconds += rec.wall_seconds;
    m.parallel_seconds += rec.parallel_seconds;
  }
  return m;
}

// Splits a log at a step boundary; the tail carries its own start states so
// metrics stay additive across the cut.
inline std::pair<TrajectoryLog, TrajectoryLog> split_log(const TrajectoryLog& log, int at) {
  require(at >= 1 && at < log.duration(), "split point must be interior");
  TrajectoryLog head, tail;
  head.start_step = log.start_step;
  head.tank_x0 = log.tank_x0;
  head.room_x0 = log.room_x0;
  head.steps.assign(log.steps.begin(), log.steps.begin() + at);
  tail.start_step = log.start_step + at;
  tail.tank_x0 = log.steps[at - 1].tank_x;
  tail.room_x0 = log.steps[at - 1].room_x;
  tail.steps.assign(log.steps.begin() + at, log.steps.end());
  return {std::move(head), std::move(tail)};
}

struct TimingRow {
  int agents = 0;
  int suppliers = 0;
  int consumers = 0;
  double centralized_seconds = 0.0;
  double distributed_seconds = 0.0;  // per-iteration max across agents, summed
  int iterations = 0;
};

struct TimingTable {
  std::vector<TimingRow> rows;
  int crossover_agents = -1;  // first sampled count where distributed is faster
  bool centralized_monotone = false;
  bool distributed_plateau = false;
  double kendall_tau = 0.0;
  double mid_slope = 0.0;
  double tail_slope = 0.0;
};

namespace detail {

inline double ols_slope(const std::vector<std::pair<double, double>>& pts) {
  const double n = static_cast<double>(pts.size());
  if (pts.size() < 2) return 0.0;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (auto [x, y] : pts) {
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double denom = n * sxx - sx * sx;
  return denom <= 0.0 ? 0.0 : (n * sxy - sx * sy) / denom;
}

}  // namespace detail

// Single-step wall-time comparison across environment sizes at a fixed
// consumer-to-supplier ratio. The distributed number follows the per-step
// accounting of the coordination scheme: the slowest agent per iteration,
// summed until convergence. Solve times only; model assembly is excluded.
// Measurements run sequentially so they do not pollute each other.
inline TimingTable timing_study(int ratio, int max_agents,
                                std::vector<int> agent_counts, std::uint64_t seed) {
  require(ratio >= 1, "ratio is consumers per supplier, at least one");
  require(max_agents >= 2, "need at least one supplier and one consumer");
  if (agent_counts.empty()) {
    for (int n = 2; n <= max_agents;) {
      agent_counts.push_back(n);
      n = std::max(n + 2, static_cast<int>(std::lround(n * 1.45)));
    }
    if (agent_counts.back() != max_agents) agent_counts.push_back(max_agents);
  }

  ScenarioSpec spec;
  spec.zones_per_consumer = 3;
  spec.horizon = 24;
  spec.duration_steps = 1;
  spec.prefer_preset = false;
  spec.scale_hp_with_links = true;
  spec.demand_level = 0.55;

  DistributedConfig cfg;
  cfg.n_relax = 0;  // relaxed stage keeps the subproblems quadratic at scale

  TimingTable table;
  for (int n : agent_counts) {
    require(n >= 2 && n <= max_agents, "agent count out of range");
    int ns = std::max(1, n / (1 + ratio));
    int nc = n - ns;
    if (nc < ns) {
      ns = n / 2;
      nc = n - ns;
    }
    Scenario sc = generate_scenario(ns, nc, spec, seed ^ (0x9e3779b9ULL * n));
    RunOptions opt;
    opt.keep_iteration_trace = false;

    TimingRow row;
    row.agents = n;
    row.suppliers = ns;
    row.consumers = nc;
    TrajectoryLog central = run_closed_loop(sc, ControllerKind::centralized, cfg, opt);
    row.centralized_seconds = central.steps[0].parallel_seconds;
    TrajectoryLog dist = run_closed_loop(sc, ControllerKind::distributed, cfg, opt);
    row.distributed_seconds = dist.steps[0].parallel_seconds;
    row.iterations = dist.steps[0].iterations;
    table.rows.push_back(row);
  }

  for (const auto& row : table.rows)
    if (row.distributed_seconds < row.centralized_seconds) {
      table.crossover_agents = row.agents;
      break;
    }

  int concordant = 0, discordant = 0;
  const auto& rows = table.rows;
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = a + 1; b < rows.size(); ++b) {
      const double d = rows[b].centralized_seconds - rows[a].centralized_seconds;
      if (d > 0) ++concordant;
      if (d < 0) ++discordant;
    }
  const int pairs = concordant + discordant;
  table.kendall_tau = pairs == 0 ? 0.0 : static_cast<double>(concordant - discordant) / pairs;
  table.centralized_monotone =
      table.kendall_tau >= 0.6 &&
      rows.back().centralized_seconds > rows.front().centralized_seconds;

  const double amin = rows.front().agents, amax = rows.back().agents;
  std::vector<std::pair<double, double>> mid, tail;
  for (const auto& row : rows) {
    const double frac = (row.agents - amin) / std::max(1.0, amax - amin);
    if (frac >= 0.25 && frac <= 0.75) mid.emplace_back(row.agents, row.distributed_seconds);
    if (frac >= 0.75) tail.emplace_back(row.agents, row.distributed_seconds);
  }
  table.mid_slope = detail::ols_slope(mid);
  table.tail_slope = detail::ols_slope(tail);
  table.distributed_plateau =
      table.tail_slope <= 0.1 * std::max(table.mid_slope, 1e-12);
  return table;
}

}  // namespace hubmpc
