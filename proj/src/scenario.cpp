#include "hserve/scenario.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "hserve/error.h"

namespace hserve {

using nlohmann::json;

namespace {

const char* kKnownKeys[] = {"schema_version", "name", "model", "profiles",
                            "slo", "policy", "horizon_s", "seed", "workload",
                            "engine", "fit"};

void reject_unknown(const json& j, std::initializer_list<const char*> known,
                    const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw InvalidConfig("unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace

Scenario parse_scenario(const json& j) {
  if (!j.is_object()) throw InvalidConfig("scenario must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : kKnownKeys) ok = ok || it.key() == k;
    if (!ok) throw InvalidConfig("unknown scenario key '" + it.key() + "'");
  }
  const int version = j.value("schema_version", 0);
  if (version != Scenario::kSchemaVersion) {
    throw InvalidConfig("unsupported scenario schema_version " +
                        std::to_string(version));
  }
  Scenario s;
  try {
    s.name = j.value("name", std::string("unnamed"));
    s.model = parse_model_size(j.value("model", std::string("70B")));
    // Defaults follow the model size; explicit values override them.
    if (s.model == ModelSize::k34B) {
      s.ttft_s = 2.0;
      s.tpot_s = 0.2;
    }
    if (j.contains("profiles")) s.profile_overrides = j.at("profiles");
    s.profiles = apply_overrides(default_profiles(s.model), s.profile_overrides);
    if (j.contains("slo")) {
      const auto& slo = j.at("slo");
      reject_unknown(slo, {"ttft_s", "tpot_s", "omega_us"}, "slo");
      s.ttft_s = slo.value("ttft_s", s.ttft_s);
      s.tpot_s = slo.value("tpot_s", s.tpot_s);
      if (slo.contains("omega_us")) s.omega_us = slo.at("omega_us").get<double>();
    }
    s.policy = parse_policy(j.value("policy", std::string("piggyback")));
    s.horizon_s = j.value("horizon_s", s.horizon_s);
    s.seed = j.value("seed", s.seed);
    if (j.contains("workload")) s.workload = j.at("workload").get<WorkloadConfig>();
    s.workload.seed = s.seed;
    if (j.contains("engine")) {
      const auto& e = j.at("engine");
      reject_unknown(e, {"swap_in_delay", "max_piggyback"}, "engine");
      s.swap_in_delay = e.value("swap_in_delay", s.swap_in_delay);
      s.max_piggyback = e.value("max_piggyback", s.max_piggyback);
    }
    if (j.contains("fit")) {
      const auto& f = j.at("fit");
      reject_unknown(f, {"samples", "seed", "gpu_dense_max_n", "cpu_dense_max_n",
                         "max_prefill_len", "max_decode_reqs"},
                     "fit");
      s.fit.samples = f.value("samples", s.fit.samples);
      s.fit.seed = f.value("seed", s.fit.seed);
      s.fit.gpu_dense_max_n = f.value("gpu_dense_max_n", s.fit.gpu_dense_max_n);
      s.fit.cpu_dense_max_n = f.value("cpu_dense_max_n", s.fit.cpu_dense_max_n);
      s.fit.max_prefill_len = f.value("max_prefill_len", s.fit.max_prefill_len);
      s.fit.max_decode_reqs = f.value("max_decode_reqs", s.fit.max_decode_reqs);
    }
  } catch (const json::exception& e) {
    throw InvalidConfig(std::string("malformed scenario: ") + e.what());
  }
  if (!(s.horizon_s > 0)) throw InvalidConfig("horizon_s must be > 0");
  if (s.max_piggyback < 0) throw InvalidConfig("max_piggyback must be >= 0");
  if (s.omega_us && !(*s.omega_us >= 0)) throw InvalidConfig("omega_us must be >= 0");
  validate(s.workload);
  validate(scheduler_config(s).slo);
  return s;
}

Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidConfig("cannot open scenario file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidConfig("scenario " + path + " is not valid JSON: " + e.what());
  }
  return parse_scenario(j);
}

json to_json(const Scenario& s) {
  json j = {{"schema_version", Scenario::kSchemaVersion},
            {"name", s.name},
            {"model", to_string(s.model)},
            {"profiles", s.profile_overrides},
            {"slo", {{"ttft_s", s.ttft_s}, {"tpot_s", s.tpot_s}}},
            {"policy", to_string(s.policy)},
            {"horizon_s", s.horizon_s},
            {"seed", s.seed},
            {"workload", s.workload},
            {"engine",
             {{"swap_in_delay", s.swap_in_delay},
              {"max_piggyback", s.max_piggyback}}},
            {"fit",
             {{"samples", s.fit.samples},
              {"seed", s.fit.seed},
              {"gpu_dense_max_n", s.fit.gpu_dense_max_n},
              {"cpu_dense_max_n", s.fit.cpu_dense_max_n},
              {"max_prefill_len", s.fit.max_prefill_len},
              {"max_decode_reqs", s.fit.max_decode_reqs}}}};
  if (s.omega_us) j["slo"]["omega_us"] = *s.omega_us;
  return j;
}

std::string resolve_scenario_path(const std::string& arg) {
  namespace fs = std::filesystem;
  if (fs::exists(arg)) return arg;
  if (const char* dir = std::getenv("HSERVE_SCENARIO_DIR")) {
    for (const auto& cand : {fs::path(dir) / arg, fs::path(dir) / (arg + ".json")}) {
      if (fs::exists(cand)) return cand.string();
    }
  }
  throw InvalidConfig("scenario not found: " + arg +
                      " (set HSERVE_SCENARIO_DIR to look up bundled names)");
}

Scenario with_seed(Scenario s, std::uint64_t seed) {
  s.seed = seed;
  s.workload.seed = seed;
  return s;
}

Scenario with_cpu_slowdown(Scenario s, double factor) {
  if (!(factor > 0)) throw InvalidInput("slowdown factor must be > 0");
  auto& c = s.profiles.cpu;
  c.attn_decode_per_unit *= factor;
  c.attn_decode_per_req *= factor;
  c.attn_decode_base *= factor;
  c.attn_prefill_per_unit *= factor;
  c.attn_prefill_base *= factor;
  c.dense_base *= factor;
  c.dense_per_token *= factor;
  c.dense_step *= factor;
  return s;
}

ModelsDoc fit_models(const Scenario& s) {
  return fit_all(s.profiles, to_string(s.model), s.fit);
}

SchedulerConfig scheduler_config(const Scenario& s) {
  SchedulerConfig c;
  c.slo.ttft_s = s.ttft_s;
  c.slo.tpot_s = s.tpot_s;
  c.slo.layers = s.profiles.cluster.layers;
  c.max_piggyback = s.max_piggyback;
  c.slo.omega_s =
      (s.omega_us ? *s.omega_us : default_omega_us(s.profiles.cluster, s.max_piggyback)) /
      1e6;
  c.policy = s.policy;
  return c;
}

ScenarioRun run_scenario(const Scenario& s, const ModelsDoc& models,
                         const RunOptions& opts) {
  EngineConfig cfg;
  cfg.sched = scheduler_config(s);
  cfg.horizon_s = s.horizon_s;
  cfg.seed = derive_seed(s.seed, 0x77);
  cfg.swap_in_delay = s.swap_in_delay;
  cfg.events = opts.events;
  cfg.audit = opts.audit;
  cfg.digest_events = opts.digest_events;
  cfg.keep_traces = opts.keep_traces;
  cfg.verify_traces = opts.verify_traces;
  cfg.record_layer_starts = opts.record_layer_starts;
  cfg.check_invariants = opts.check_invariants;
  cfg.fault = opts.fault;

  const auto requests = build_requests(s.workload, s.horizon_s);
  ScenarioRun out;
  out.engine = run_engine(s.profiles, models, requests, cfg);
  out.report = make_report(out.engine.records, s.horizon_s, s.ttft_s, s.tpot_s);
  out.report.scenario = s.name;
  out.report.policy = to_string(s.policy);
  out.report.seed = s.seed;
  out.report.counters = out.engine.counters;
  out.report.config = to_json(s);
  return out;
}

}  // namespace hserve
