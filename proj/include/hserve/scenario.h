#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "hserve/engine.h"
#include "hserve/latency_models.h"
#include "hserve/metrics.h"
#include "hserve/profiles.h"
#include "hserve/scheduler.h"
#include "hserve/workload.h"
#include "json.hpp"

namespace hserve {

// One experiment: workload, hardware profiles, SLOs, policy and horizon.
struct Scenario {
  static constexpr int kSchemaVersion = 1;

  std::string name;
  ModelSize model = ModelSize::k70B;
  nlohmann::json profile_overrides = nlohmann::json::object();
  ProfileSet profiles;  // defaults for `model` with the overrides applied
  double ttft_s = 3.0;
  double tpot_s = 0.25;
  std::optional<double> omega_us;  // default: bookkeeping of max_piggyback
  PolicyConfig policy;
  double horizon_s = 600.0;
  std::uint64_t seed = 1;
  WorkloadConfig workload;
  bool swap_in_delay = true;
  std::int64_t max_piggyback = 256;
  FitOptions fit;
};

// Parses and validates a schema-1 scenario document.
Scenario parse_scenario(const nlohmann::json& j);
Scenario load_scenario(const std::string& path);
nlohmann::json to_json(const Scenario& s);

// Resolves a scenario argument: an existing path, else
// <dir>/<arg> or <dir>/<arg>.json where dir comes from HSERVE_SCENARIO_DIR.
std::string resolve_scenario_path(const std::string& arg);

// Copy with a different seed (workload arrivals and profile noise).
Scenario with_seed(Scenario s, std::uint64_t seed);

ModelsDoc fit_models(const Scenario& s);

// Copy with the CPU worker service time scaled by `factor` (> 1 is slower).
Scenario with_cpu_slowdown(Scenario s, double factor);

SchedulerConfig scheduler_config(const Scenario& s);

struct RunOptions {
  std::ostream* events = nullptr;
  std::ostream* audit = nullptr;
  bool digest_events = false;
  bool keep_traces = false;
  bool verify_traces = true;
  bool record_layer_starts = false;
  bool check_invariants = false;
  std::optional<FaultInjection> fault;
};

struct ScenarioRun {
  SimReport report;
  RunResult engine;
};

ScenarioRun run_scenario(const Scenario& s, const ModelsDoc& models,
                         const RunOptions& opts = {});

}  // namespace hserve
