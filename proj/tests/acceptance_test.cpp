// Acceptance suite: one PASS/FAIL line per criterion.
//
// Exit status is the number of failing criteria, except those listed in
// HSERVE_ACCEPT_KNOWN_GAPS (comma separated numbers), which are still
// printed as FAIL but do not affect the status.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hserve/scenario.h"

using namespace hserve;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::ostringstream note;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      note << " [" << what << "]";
    }
  }
};

std::string scenario_dir() {
  if (const char* d = std::getenv("HSERVE_SCENARIO_DIR")) return d;
  return HSERVE_BUNDLED_SCENARIOS;
}

struct Bundled {
  std::string name;
  Scenario scenario;
  ModelsDoc models;
};

std::vector<Bundled> load_bundled() {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(scenario_dir())) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Bundled> out;
  for (const auto& f : files) {
    auto s = load_scenario(f.string());
    auto m = fit_models(s);
    out.push_back({f.stem().string(), std::move(s), std::move(m)});
  }
  return out;
}

const Bundled& find(const std::vector<Bundled>& all, const std::string& name) {
  for (const auto& b : all) {
    if (b.name == name) return b;
  }
  throw std::runtime_error("bundled scenario missing: " + name);
}

Scenario with_cluster(Scenario s, const std::string& key, const json& value) {
  s.profile_overrides["cluster"][key] = value;
  s.profiles = apply_overrides(default_profiles(s.model), s.profile_overrides);
  return s;
}

// 1 ------------------------------------------------------------------------
Outcome model_fidelity() {
  Outcome o;
  double worst_noisy = 1.0, worst_exact = 1.0, worst_time = 0.0;
  for (auto model : {ModelSize::k34B, ModelSize::k70B}) {
    for (bool noisy : {true, false}) {
      auto prof = default_profiles(model);
      if (!noisy) {
        prof.gpu.noise_rel = 0.0;
        prof.cpu.noise_rel = 0.0;
      }
      FitOptions opt;
      opt.samples = 100;
      const auto t0 = Clock::now();
      const auto doc = fit_all(prof, to_string(model), opt);
      worst_time = std::max(worst_time, seconds_since(t0));
      for (const auto* pair : {&doc.gpu, &doc.cpu}) {
        const auto& dev = pair == &doc.gpu ? prof.gpu : prof.cpu;
        const auto acc = evaluate_accuracy(*pair, dev, opt, 1000, 911);
        const double lo = std::min({acc.prefill_attn, acc.decode_attn, acc.dense});
        (noisy ? worst_noisy : worst_exact) =
            std::min(noisy ? worst_noisy : worst_exact, lo);
      }
    }
  }
  o.require(worst_noisy >= 0.93, "noisy accuracy");
  o.require(worst_exact >= 0.99999, "noise-free accuracy");
  o.require(worst_time < 5.0, "fit runtime");
  o.note << std::setprecision(6) << " noisy " << worst_noisy << ", noise-free "
         << worst_exact << ", slowest fit " << std::setprecision(3) << worst_time
         << " s";
  return o;
}

// 2 ------------------------------------------------------------------------
Outcome dense_table() {
  Outcome o;
  const auto t0 = Clock::now();
  for (int spikes : {1, 4, 16}) {
    const std::int64_t width = 4096 / (spikes + 1);
    auto ladder = [&](std::int64_t n) {
      const auto k = std::min<std::int64_t>((n - 1) / width, spikes);
      return 100.0 + 200.0 * static_cast<double>(k);
    };
    std::int64_t calls = 0;
    const auto t = build_dense_table(
        [&](std::int64_t n) {
          ++calls;
          return ladder(n);
        },
        1, 4096);
    const std::int64_t bound = 4 * spikes * 12;
    o.require(calls <= bound, "probe count S=" + std::to_string(spikes));
    o.require(t.diagnostics.probe_calls <= bound, "reported probes");
    std::int64_t bad = 0;
    for (std::int64_t n = 1; n <= 4096; ++n) {
      if (std::abs(predict_dense(t, n) - ladder(n)) > t.threshold) ++bad;
    }
    o.require(bad == 0, "table mismatch S=" + std::to_string(spikes));
    o.note << " S=" << spikes << ": " << calls << "/" << bound << " probes";
  }
  const double dt = seconds_since(t0);
  o.require(dt < 1.0, "runtime");
  o.note << ", " << std::setprecision(3) << dt << " s";
  return o;
}

// 3 ------------------------------------------------------------------------
Outcome slo_guarantee(const std::vector<Bundled>& all) {
  Outcome o;
  const std::pair<double, double> slos[] = {{2.0, 0.2}, {3.0, 0.25}};
  for (const char* name : {"feasible_34b", "feasible_70b"}) {
    for (auto [ttft, tpot] : slos) {
      const auto t0 = Clock::now();
      Scenario s = find(all, name).scenario;
      s.ttft_s = ttft;
      s.tpot_s = tpot;
      s.horizon_s = 600.0;
      const auto models = fit_models(s);
      const auto run = run_scenario(s, models);
      const double dt = seconds_since(t0);
      const auto& a = run.report.attain;
      std::ostringstream tag;
      tag << name << " (" << ttft << ", " << tpot << ")";
      o.require(a.ttft_frac == 1.0 && a.ttft_total > 0, tag.str() + " TTFT");
      o.require(a.tpot_frac == 1.0 && a.tpot_total > 0, tag.str() + " TPOT");
      o.require(dt < 60.0, tag.str() + " runtime");
      o.note << " " << tag.str() << ": " << a.ttft_met << "/" << a.ttft_total << ", "
             << a.tpot_met << "/" << a.tpot_total << ", " << std::setprecision(3)
             << dt << " s;";
    }
  }
  return o;
}

// 4 ------------------------------------------------------------------------
Outcome binary_search(const std::vector<Bundled>& all) {
  Outcome o;
  const auto& m = find(all, "feasible_34b").models.gpu;
  std::mt19937_64 rng(4242);
  std::uniform_int_distribution<std::int64_t> plen(1, 8000);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int mismatches = 0;
  for (int t = 0; t < 200; ++t) {
    const auto p = plen(rng);
    const auto l = static_cast<std::int64_t>(u(rng) * static_cast<double>(p));
    Loads b;
    b.g = static_cast<std::int64_t>(u(rng) * 96);
    b.c_da = static_cast<double>(b.g) * u(rng) * 12000.0;
    b.n = b.g + static_cast<std::int64_t>(u(rng) * 2000);
    b.c_pa = u(rng) * 4e6;
    const double budget = 100.0 + u(rng) * 12000.0;
    const auto got = chunk_prefill_budget(l, p, b, m, budget, p - l);
    std::int64_t want = 0;
    for (std::int64_t q = 1; q <= p - l; ++q) {
      const double cost =
          per_layer_latency(m, b.c_pa + pairwise_units(l, q), b.c_da, b.g, b.n + q)
              .total();
      if (cost <= budget) want = q;
    }
    if (got != want) ++mismatches;
  }
  o.require(mismatches == 0, "mismatches");
  o.note << " " << mismatches << " mismatches over 200 states";
  return o;
}

// 5 ------------------------------------------------------------------------
Outcome asynchrony(const std::vector<Bundled>& all,
                   const std::map<std::string, ScenarioRun>& base_runs) {
  Outcome o;
  for (const auto& b : all) {
    const auto& r = base_runs.at(b.name);
    const auto it = r.engine.counters.find("blocked_idle");
    const double blocked = it == r.engine.counters.end() ? 0.0 : it->second;
    o.require(blocked == 0.0, b.name + " blocked idle");
  }
  // The CPU-bound mix is excluded from the paired comparison: with saturated
  // CPU workers the set of results ready at a layer depends on CPU speed.
  std::size_t compared = 0;
  for (const auto& b : all) {
    if (b.name == "heavy_mix") continue;
    RunOptions opt;
    opt.record_layer_starts = true;
    const auto fast = run_scenario(b.scenario, b.models, opt);
    const auto slow = run_scenario(with_cpu_slowdown(b.scenario, 2.0), b.models, opt);
    const auto& x = fast.engine.layer_runs;
    const auto& y = slow.engine.layer_runs;
    std::size_t diff = x.size() == y.size() ? 0 : 1;
    for (std::size_t i = 0; !diff && i < x.size(); ++i) {
      if (x[i].start != y[i].start || x[i].layer != y[i].layer) diff = i + 1;
    }
    o.require(diff == 0, b.name + " layer starts differ");
    compared += x.size();
  }
  o.note << " " << compared << " layer starts identical under 2x slower CPU";
  return o;
}

// 6 ------------------------------------------------------------------------
Outcome traces(const std::vector<Bundled>& all,
               const std::map<std::string, ScenarioRun>& base_runs) {
  Outcome o;
  std::int64_t be_checked = 0;
  for (const auto& b : all) {
    const auto& r = base_runs.at(b.name);
    o.require(r.engine.divergences.empty(), b.name + " streaming divergence");
    o.require(r.engine.faults.empty(), b.name + " integrity fault");
    std::set<RequestId> be;
    for (const auto& rec : r.engine.records) {
      if (rec.cls == ServiceClass::kBE) be.insert(rec.id);
    }
    for (const auto& t : r.engine.traces) {
      if (!be.count(t.id)) continue;
      ++be_checked;
      const auto chk = verify_trace(t, b.scenario.profiles.cluster.layers);
      o.require(!chk.divergence, b.name + " trace " + std::to_string(t.id));
    }
  }

  // Fault injection on an offloaded BE request.
  const auto& b = find(all, "feasible_70b");
  const auto& clean = base_runs.at(b.name);
  std::optional<RequestId> victim;
  for (const auto& rec : clean.engine.records) {
    if (rec.cls == ServiceClass::kBE && rec.offloaded_tokens > 0) {
      victim = rec.id;
      break;
    }
  }
  o.require(victim.has_value(), "no offloaded BE request to corrupt");
  if (victim) {
    const std::int64_t layer = b.scenario.profiles.cluster.layers / 2 + 1;
    RunOptions opt;
    opt.fault = FaultInjection{*victim, layer};
    const auto bad = run_scenario(b.scenario, b.models, opt);
    const bool hit = !bad.engine.divergences.empty() &&
                     bad.engine.divergences.front().id == *victim &&
                     bad.engine.divergences.front().layer == layer &&
                     !bad.engine.faults.empty() &&
                     bad.engine.faults.front().id == *victim &&
                     bad.engine.faults.front().layer == layer;
    o.require(hit, "injected fault not located");
    o.note << " fault at (" << *victim << ", " << layer << ") "
           << (hit ? "located" : "missed") << ";";
  }
  o.note << " " << be_checked << " retained BE traces verified";
  return o;
}

// 7 ------------------------------------------------------------------------
Outcome host_scaling(const std::vector<Bundled>& all) {
  Outcome o;
  const auto& b = find(all, "heavy_mix");
  std::vector<double> tput;
  for (int hosts = 1; hosts <= 4; ++hosts) {
    const auto s = with_cluster(b.scenario, "cpu_hosts", hosts);
    tput.push_back(run_scenario(s, b.models).report.be.decode);
  }
  for (std::size_t i = 1; i < tput.size(); ++i) {
    o.require(tput[i] >= tput[i - 1], "not monotone at " + std::to_string(i + 1));
  }
  const double ratio = tput[0] > 0 ? tput[3] / tput[0] : 0.0;
  o.require(ratio >= 2.0, "4 vs 1 hosts");

  const auto s4 = with_cluster(b.scenario, "cpu_hosts", 4);
  std::map<std::string, double> by_policy;
  for (const char* p : {"gpu_only", "headroom"}) {
    Scenario s = s4;
    s.policy = parse_policy(p);
    by_policy[p] = run_scenario(s, b.models).report.be.decode;
    o.require(tput[3] > by_policy[p], std::string("not above ") + p);
  }
  o.note << std::fixed << std::setprecision(1) << " BE decode tok/s by hosts";
  for (double t : tput) o.note << " " << t;
  o.note << " (" << std::setprecision(2) << ratio << "x); gpu_only "
         << std::setprecision(1) << by_policy["gpu_only"] << ", headroom "
         << by_policy["headroom"];
  return o;
}

// 8 ------------------------------------------------------------------------
Outcome admission_ablation(const std::vector<Bundled>& all) {
  Outcome o;
  const auto& b = find(all, "overload_2x");
  Scenario on = b.scenario, off = b.scenario;
  on.policy = parse_policy("piggyback");
  off.policy = parse_policy("no_admission_control");
  const auto a = run_scenario(on, b.models).report;
  const auto c = run_scenario(off, b.models).report;
  const double drop = 100.0 * (a.attain.ttft_frac - c.attain.ttft_frac);
  const double rel =
      a.ls.decode > 0 ? std::abs(a.ls.decode - c.ls.decode) / a.ls.decode : 1.0;
  o.require(drop >= 20.0, "TTFT drop below 20 points");
  o.require(rel <= 0.06, "LS decode throughput gap");
  o.note << std::fixed << std::setprecision(4) << " TTFT enabled "
         << a.attain.ttft_frac << " vs disabled " << c.attain.ttft_frac << " ("
         << std::setprecision(1) << drop << " points); LS decode " << a.ls.decode
         << " vs " << c.ls.decode << " tok/s (" << 100.0 * rel << "%)";
  return o;
}

// 9 ------------------------------------------------------------------------
Outcome headroom_violations(const std::vector<Bundled>& all) {
  Outcome o;
  const auto& b = find(all, "long_context_be");
  Scenario pig = b.scenario, head = b.scenario;
  pig.policy = parse_policy("piggyback");
  head.policy = parse_policy("headroom");
  const auto p = run_scenario(pig, b.models).report.attain;
  const auto h = run_scenario(head, b.models).report.attain;
  const auto pv = p.tpot_total - p.tpot_met;
  const auto hv = h.tpot_total - h.tpot_met;
  o.require(hv >= 1, "headroom has no TPOT violation");
  o.require(pv == 0, "piggyback violates TPOT");
  o.note << " TPOT violations: headroom " << hv << ", piggyback " << pv;
  return o;
}

// 10 -----------------------------------------------------------------------
Outcome determinism(const std::vector<Bundled>& all,
                    const std::map<std::string, ScenarioRun>& base_runs) {
  Outcome o;
  for (const auto& b : all) {
    RunOptions opt;
    opt.digest_events = true;
    const auto again = run_scenario(b.scenario, b.models, opt);
    const auto& first = base_runs.at(b.name);
    o.require(json(first.report).dump() == json(again.report).dump(),
              b.name + " report");
    o.require(first.engine.event_digest == again.engine.event_digest &&
                  first.engine.event_lines == again.engine.event_lines,
              b.name + " event log");
  }
  o.note << " " << all.size() << " scenarios reproduced byte for byte";
  return o;
}

std::set<int> known_gaps() {
  std::set<int> out;
  if (const char* v = std::getenv("HSERVE_ACCEPT_KNOWN_GAPS")) {
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) out.insert(std::stoi(item));
    }
  }
  return out;
}

}  // namespace

int main() {
  const auto gaps = known_gaps();
  int failing = 0;
  auto report = [&](int n, const std::string& title, const std::function<Outcome()>& f) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o.pass = false;
      o.note << " exception: " << e.what();
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << title
              << "):" << o.note.str() << " [" << std::fixed << std::setprecision(1)
              << seconds_since(t0) << " s]";
    if (!o.pass && gaps.count(n)) std::cout << " (documented gap)";
    std::cout << std::endl;
    std::cout.unsetf(std::ios::floatfield);
    if (!o.pass && !gaps.count(n)) ++failing;
  };

  std::vector<Bundled> all;
  std::map<std::string, ScenarioRun> base_runs;
  try {
    all = load_bundled();
    for (const auto& b : all) {
      RunOptions opt;
      opt.digest_events = true;
      opt.keep_traces = b.name != "heavy_mix";
      base_runs.emplace(b.name, run_scenario(b.scenario, b.models, opt));
    }
  } catch (const std::exception& e) {
    std::cout << "FAIL setup: " << e.what() << std::endl;
    return 1;
  }

  report(1, "model fidelity", model_fidelity);
  report(2, "dense table construction", dense_table);
  report(3, "SLO guarantee under exact models", [&] { return slo_guarantee(all); });
  report(4, "binary-search optimality", [&] { return binary_search(all); });
  report(5, "asynchrony contract", [&] { return asynchrony(all, base_runs); });
  report(6, "trace correctness", [&] { return traces(all, base_runs); });
  report(7, "directional throughput", [&] { return host_scaling(all); });
  report(8, "admission-control ablation", [&] { return admission_ablation(all); });
  report(9, "baseline degradation", [&] { return headroom_violations(all); });
  report(10, "determinism", [&] { return determinism(all, base_runs); });
  return failing;
}
