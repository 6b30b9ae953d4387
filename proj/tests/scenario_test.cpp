#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "hserve/error.h"
#include "hserve/scenario.h"

using namespace hserve;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json minimal() {
  return {{"schema_version", 1},
          {"name", "tiny"},
          {"model", "34B"},
          {"horizon_s", 5},
          {"seed", 3},
          {"workload",
           {{"ls", {{"rate", 1.0}, {"lengths", {{"kind", "preset"}, {"name", "sharegpt"}}}}}}}};
}

}  // namespace

TEST_CASE("model size picks the SLO defaults") {
  const auto s = parse_scenario(minimal());
  CHECK(s.ttft_s == 2.0);
  CHECK(s.tpot_s == 0.2);
  auto j = minimal();
  j["model"] = "70B";
  const auto t = parse_scenario(j);
  CHECK(t.ttft_s == 3.0);
  CHECK(t.tpot_s == 0.25);
  j["slo"] = {{"ttft_s", 4.0}};
  CHECK(parse_scenario(j).ttft_s == 4.0);
  CHECK(parse_scenario(j).tpot_s == 0.25);
}

TEST_CASE("malformed scenarios are rejected") {
  auto j = minimal();
  j["colour"] = "blue";
  CHECK_THROWS_AS(parse_scenario(j), InvalidConfig);
  j = minimal();
  j["schema_version"] = 2;
  CHECK_THROWS_AS(parse_scenario(j), InvalidConfig);
  j = minimal();
  j["horizon_s"] = 0;
  CHECK_THROWS_AS(parse_scenario(j), InvalidConfig);
  j = minimal();
  j["slo"] = {{"ttft_s", 1.0}, {"tpot", 0.1}};
  CHECK_THROWS_AS(parse_scenario(j), InvalidConfig);
  j = minimal();
  j["policy"] = "fastest";
  CHECK_THROWS(parse_scenario(j));
  j = minimal();
  j["engine"] = {{"max_piggyback", -1}};
  CHECK_THROWS_AS(parse_scenario(j), InvalidConfig);
  j = minimal();
  j["horizon_s"] = "long";
  CHECK_THROWS_AS(parse_scenario(j), InvalidConfig);
}

TEST_CASE("scenario serialisation round trips") {
  auto j = minimal();
  j["profiles"] = {{"cluster", {{"cpu_hosts", 2}}}};
  j["policy"] = "headroom:0.3";
  const auto s = parse_scenario(j);
  CHECK(s.profiles.cluster.cpu_hosts == 2);
  const auto again = parse_scenario(to_json(s));
  CHECK(to_json(again) == to_json(s));
  CHECK(again.profiles.cluster.cpu_hosts == 2);
}

TEST_CASE("bundled names resolve through the environment") {
  const auto dir = fs::temp_directory_path() / "hserve_scenario_test";
  fs::create_directories(dir);
  {
    std::ofstream(dir / "tiny.json") << minimal().dump();
  }
  ::setenv("HSERVE_SCENARIO_DIR", dir.string().c_str(), 1);
  CHECK(resolve_scenario_path("tiny") == (dir / "tiny.json").string());
  CHECK(resolve_scenario_path("tiny.json") == (dir / "tiny.json").string());
  CHECK_THROWS_AS(resolve_scenario_path("absent"), InvalidConfig);
  ::unsetenv("HSERVE_SCENARIO_DIR");
  CHECK_THROWS_AS(resolve_scenario_path("tiny"), InvalidConfig);
  CHECK(load_scenario((dir / "tiny.json").string()).name == "tiny");
  fs::remove_all(dir);
}

TEST_CASE("seed override and CPU slowdown") {
  const auto s = parse_scenario(minimal());
  const auto t = with_seed(s, 99);
  CHECK(t.seed == 99);
  CHECK(t.workload.seed == 99);
  const auto slow = with_cpu_slowdown(s, 2.0);
  CHECK(slow.profiles.cpu.attn_decode_per_unit == 2.0 * s.profiles.cpu.attn_decode_per_unit);
  CHECK(slow.profiles.gpu.dense_base == s.profiles.gpu.dense_base);
  CHECK_THROWS_AS(with_cpu_slowdown(s, 0.0), InvalidInput);
}

TEST_CASE("a short run reports the configuration it ran") {
  auto s = parse_scenario(minimal());
  const auto models = fit_models(s);
  const auto run = run_scenario(s, models);
  CHECK(run.report.scenario == "tiny");
  CHECK(run.report.seed == 3);
  CHECK(run.report.config == to_json(s));
  CHECK(run.engine.divergences.empty());
  CHECK(run.report.attain.ls_admitted + run.report.attain.ls_rejected > 0);
}
