#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "hserve/error.h"
#include "hserve/scenario.h"

namespace fs = std::filesystem;
using namespace hserve;
using nlohmann::json;

namespace {

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << content;
}

ModelsDoc load_models(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidConfig("cannot open models document " + path);
  return json::parse(in).get<ModelsDoc>();
}

void print_summary(const SimReport& r) {
  const auto& a = r.attain;
  std::cout << std::fixed << std::setprecision(4)
            << "scenario " << r.scenario << "  policy " << r.policy << "  seed "
            << r.seed << "\n"
            << "  TTFT attainment " << a.ttft_frac << " (" << a.ttft_met << "/"
            << a.ttft_total << "), rejected " << a.ls_rejected << "\n"
            << "  TPOT attainment " << a.tpot_frac << " (" << a.tpot_met << "/"
            << a.tpot_total << "), p99 " << r.tpot_p99_s << " s\n"
            << "  BE throughput prefill " << r.be.prefill << " tok/s, decode "
            << r.be.decode << " tok/s\n"
            << "  LS decode throughput " << r.ls.decode << " tok/s\n";
}

struct Common {
  std::vector<std::string> scenarios;
  std::vector<std::string> policies;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string models;
  bool events = false;
  bool trace = false;
  bool audit = false;
  unsigned jobs = 0;
};

Scenario prepare(const std::string& arg, const Common& c) {
  auto s = load_scenario(resolve_scenario_path(arg));
  if (c.seed) s = with_seed(std::move(s), *c.seed);
  return s;
}

int cmd_fit(const Common& c) {
  auto s = prepare(c.scenarios.at(0), c);
  const auto doc = fit_models(s);
  json j = doc;
  const auto gpu_acc = evaluate_accuracy(doc.gpu, s.profiles.gpu, s.fit, 200,
                                         derive_seed(s.fit.seed, 0xACC));
  const auto cpu_acc = evaluate_accuracy(doc.cpu, s.profiles.cpu, s.fit, 200,
                                         derive_seed(s.fit.seed, 0xACD));
  j["diagnostics"] = {
      {"gpu_accuracy",
       {{"prefill_attn", gpu_acc.prefill_attn},
        {"decode_attn", gpu_acc.decode_attn},
        {"dense", gpu_acc.dense}}},
      {"cpu_accuracy",
       {{"prefill_attn", cpu_acc.prefill_attn},
        {"decode_attn", cpu_acc.decode_attn},
        {"dense", cpu_acc.dense}}}};
  fs::create_directories(c.out);
  write_file(fs::path(c.out) / "models.json", j.dump(2) + "\n");
  std::cout << "models written to " << (fs::path(c.out) / "models.json").string()
            << "\n"
            << "  GPU accuracy: prefill " << gpu_acc.prefill_attn << ", decode "
            << gpu_acc.decode_attn << ", dense " << gpu_acc.dense << "\n"
            << "  CPU accuracy: prefill " << cpu_acc.prefill_attn << ", decode "
            << cpu_acc.decode_attn << ", dense " << cpu_acc.dense << "\n";
  return 0;
}

int cmd_run(const Common& c) {
  auto s = prepare(c.scenarios.at(0), c);
  if (!c.policies.empty()) s.policy = parse_policy(c.policies.front());
  const ModelsDoc models = c.models.empty() ? fit_models(s) : load_models(c.models);
  fs::create_directories(c.out);
  const fs::path out(c.out);

  std::ofstream events, audit;
  RunOptions opts;
  if (c.events) {
    events.open(out / "events.jsonl", std::ios::binary);
    opts.events = &events;
  }
  if (c.audit) {
    audit.open(out / "audit.jsonl", std::ios::binary);
    opts.audit = &audit;
  }
  opts.keep_traces = c.trace;
  auto run = run_scenario(s, models, opts);

  write_file(out / "report.json", json(run.report).dump(2) + "\n");
  std::ostringstream req, sum;
  write_requests_csv(req, run.report);
  write_summary_csv(sum, run.report);
  write_file(out / "requests.csv", req.str());
  write_file(out / "summary.csv", sum.str());
  if (c.trace) {
    std::ofstream tr(out / "traces.jsonl", std::ios::binary);
    for (const auto& t : run.engine.traces) {
      const auto chk = verify_trace(t, s.profiles.cluster.layers);
      json line = {{"id", t.id}, {"passes", chk.passes}, {"entries", t.entries}};
      if (chk.divergence) {
        line["divergence"] = {{"pass", chk.divergence->pass},
                              {"layer", chk.divergence->layer},
                              {"detail", chk.divergence->detail}};
      }
      tr << line.dump() << '\n';
    }
  }
  print_summary(run.report);
  for (const auto& d : run.engine.divergences) {
    std::cerr << "trace divergence: request " << d.id << " pass " << d.pass
              << " layer " << d.layer << ": " << d.detail << "\n";
  }
  return run.engine.divergences.empty() && run.engine.faults.empty() ? 0 : 3;
}

int cmd_compare(const Common& c) {
  std::vector<Scenario> scenarios;
  for (const auto& a : c.scenarios) scenarios.push_back(prepare(a, c));
  for (const auto& s : scenarios) {
    if (s.workload.seed != scenarios.front().workload.seed) {
      std::cerr << "error: scenarios " << scenarios.front().name << " and "
                << s.name << " use different workload seeds ("
                << scenarios.front().workload.seed << " vs " << s.workload.seed
                << "); pass --seed to compare them on one workload\n";
      return 2;
    }
  }
  std::vector<std::string> policies = c.policies;
  if (policies.empty()) policies = {"piggyback", "gpu_only", "headroom"};

  std::vector<ModelsDoc> models;
  for (const auto& s : scenarios) {
    models.push_back(c.models.empty() ? fit_models(s) : load_models(c.models));
  }
  struct Job {
    std::size_t scenario;
    Scenario s;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    for (const auto& p : policies) {
      Scenario s = scenarios[i];
      s.policy = parse_policy(p);
      jobs.push_back({i, std::move(s)});
    }
  }
  std::vector<SimReport> reports(jobs.size());
  const unsigned workers = c.jobs ? c.jobs : std::max(1u, std::thread::hardware_concurrency());
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex m;
  for (unsigned w = 0; w < std::min<std::size_t>(workers, jobs.size()); ++w) {
    pool.emplace_back([&] {
      for (std::size_t k; (k = next++) < jobs.size();) {
        try {
          reports[k] = run_scenario(jobs[k].s, models[jobs[k].scenario]).report;
        } catch (...) {
          std::lock_guard<std::mutex> lock(m);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  fs::create_directories(c.out);
  const fs::path out(c.out);
  std::ostringstream table;
  table << "scenario,policy,seed,ttft_attainment,tpot_attainment,ls_rejected,"
           "be_prefill_tput,be_decode_tput,ls_decode_tput,tpot_p99_s\n";
  std::cout << std::left << std::setw(22) << "scenario" << std::setw(24) << "policy"
            << std::right << std::setw(8) << "TTFT" << std::setw(8) << "TPOT"
            << std::setw(12) << "BE pre/s" << std::setw(12) << "BE dec/s"
            << std::setw(12) << "LS dec/s" << "\n";
  for (const auto& r : reports) {
    table << r.scenario << ',' << r.policy << ',' << r.seed << ','
          << json(r.attain.ttft_frac).dump() << ',' << json(r.attain.tpot_frac).dump()
          << ',' << r.attain.ls_rejected << ',' << json(r.be.prefill).dump() << ','
          << json(r.be.decode).dump() << ',' << json(r.ls.decode).dump() << ','
          << json(r.tpot_p99_s).dump() << '\n';
    std::cout << std::left << std::setw(22) << r.scenario << std::setw(24) << r.policy
              << std::right << std::fixed << std::setprecision(4) << std::setw(8)
              << r.attain.ttft_frac << std::setw(8) << r.attain.tpot_frac
              << std::setprecision(1) << std::setw(12) << r.be.prefill
              << std::setw(12) << r.be.decode << std::setw(12) << r.ls.decode << "\n";
    std::string stem = r.scenario + "__" + r.policy;
    for (auto& ch : stem) {
      if (ch == ':') ch = '_';
    }
    std::ostringstream series;
    write_requests_csv(series, r);
    write_file(out / (stem + ".requests.csv"), series.str());
  }
  write_file(out / "compare.csv", table.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid LS/BE LLM serving simulator"};
  app.require_subcommand(1);
  Common c;

  auto add_common = [&](CLI::App* sub, bool multi) {
    if (multi) {
      sub->add_option("--scenario", c.scenarios, "Scenario file or bundled name")
          ->required();
      sub->add_option("--policy", c.policies,
                      "piggyback | headroom[:frac] | no_admission_control | gpu_only");
    } else {
      sub->add_option("--scenario", c.scenarios, "Scenario file or bundled name")
          ->required()
          ->expected(1);
    }
    sub->add_option("--seed", c.seed, "Override the scenario seed");
    sub->add_option("--out", c.out, "Output directory")->capture_default_str();
  };

  auto* fit = app.add_subcommand("fit", "Profile the oracles and fit latency models");
  add_common(fit, false);

  auto* run = app.add_subcommand("run", "Simulate one scenario");
  add_common(run, false);
  run->add_option("--policy", c.policies, "Override the scenario policy")->expected(1);
  run->add_flag("--events", c.events, "Write events.jsonl");
  run->add_flag("--trace", c.trace, "Write per-request computation traces");
  run->add_flag("--audit", c.audit, "Write scheduling decisions to audit.jsonl");
  run->add_option("--models", c.models, "Use a fitted models document");

  auto* cmp = app.add_subcommand("compare", "Run scenarios under several policies");
  add_common(cmp, true);
  cmp->add_option("--models", c.models, "Use a fitted models document");
  cmp->add_option("--jobs", c.jobs, "Worker threads (default: hardware)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*fit) return cmd_fit(c);
    if (*run) return cmd_run(c);
    if (*cmp) return cmd_compare(c);
  } catch (const FitDegenerate& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
